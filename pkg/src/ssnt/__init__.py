"""Segment-to-segment neural transduction toolkit.

Trains monotone-alignment sequence transducers (direct x->y and channel
y->x roles) plus an LSTM language model, and decodes with a noisy-channel
beam search that combines direct, channel, language-model, and
length-bias scores.
"""

__version__ = "0.1.0"
