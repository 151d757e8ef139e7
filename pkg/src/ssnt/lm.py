"""Stacked-LSTM language model over output-side sequences.

Scores sequences left to right, EOS included, so the decoder can price
termination. Training runs batched with padded positions masked out of
the loss; scoring at decode time is incremental with immutable states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import PAD_ID, START_ID
from .errors import ConfigError, ContractError
from .tensor import Parameter, RngState, Tensor

INIT_RANGE = 0.08


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return x - (np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m)


@dataclass
class LmConfig:
    vocab_size: int
    hidden_size: int = 1024
    layers: int = 2
    embed_size: int | None = None

    def resolved_embed(self) -> int:
        return self.embed_size if self.embed_size is not None else self.hidden_size


@dataclass(frozen=True)
class LmState:
    """Immutable scoring state: per-layer (h, c) plus the cached next-token
    log distribution for the consumed prefix."""

    layer_states: tuple
    log_dist: np.ndarray
    consumed: int


class LmModel:
    def __init__(self, config: LmConfig, rng: RngState):
        if config.layers < 1:
            raise ConfigError("language model needs at least one layer")
        self.config = config
        v = config.vocab_size
        h = config.hidden_size
        e = config.resolved_embed()
        r = INIT_RANGE
        self.embed = Parameter("embed", rng.uniform(-r, r, (v, e)))
        self.cells = [
            T.LstmCell(f"layer{k}", e if k == 0 else h, h, rng)
            for k in range(config.layers)
        ]
        self.w_out = Parameter("w_out", rng.uniform(-r, r, (h, v)))
        self.b_out = Parameter("b_out", rng.uniform(-r, r, (v,)))

    def parameters(self) -> list[Parameter]:
        params = [self.embed]
        for cell in self.cells:
            params += cell.parameters()
        params += [self.w_out, self.b_out]
        return params

    # -- incremental scoring --------------------------------------------------

    def _consume_np(self, layer_states, token_id: int):
        x = self.embed.data[int(token_id)]
        new_states = []
        for cell, state in zip(self.cells, layer_states):
            state = cell.step_np(state, x)
            new_states.append(state)
            x = state[0]
        log_dist = _log_softmax(x @ self.w_out.data + self.b_out.data)
        return tuple(new_states), log_dist

    def lm_start(self) -> LmState:
        """State conditioned on START only."""
        states = tuple(cell.zero_state_np() for cell in self.cells)
        states, log_dist = self._consume_np(states, START_ID)
        return LmState(states, log_dist, 0)

    def lm_score_next(self, state: LmState, token_id: int) -> tuple[float, LmState]:
        """log p(token | prefix) and the state extended with that token."""
        lp = float(state.log_dist[int(token_id)])
        states, log_dist = self._consume_np(state.layer_states, token_id)
        return lp, LmState(states, log_dist, state.consumed + 1)

    def sequence_logprob(self, ids) -> float:
        state = self.lm_start()
        total = 0.0
        for tok in ids:
            lp, state = self.lm_score_next(state, int(tok))
            total += lp
        return total

    # -- training --------------------------------------------------------------

    def lm_nll(self, ids, dropout_rate: float = 0.0, rng: RngState | None = None,
               training: bool = False) -> Tensor:
        """Negative log probability of one sequence (EOS term included)."""
        ids = [int(t) for t in ids]
        if not ids:
            raise ContractError("lm_nll needs a non-empty sequence")
        inputs = [START_ID] + ids[:-1]
        x = T.dropout(T.take_rows(self.embed, np.asarray(inputs)), dropout_rate, rng, training)
        states = [cell.zero_state() for cell in self.cells]
        rows = []
        for t in range(len(inputs)):
            inp = T.reshape(T.narrow(x, 0, t, 1), (x.data.shape[1],))
            for k, cell in enumerate(self.cells):
                states[k] = cell.step(states[k], inp)
                inp = states[k][0]
                if k < len(self.cells) - 1:
                    inp = T.dropout(inp, dropout_rate, rng, training)
            rows.append(inp)
        top = T.dropout(T.stack(rows), dropout_rate, rng, training)
        logits = T.add(T.matmul(top, self.w_out), self.b_out)
        lp = T.take_per_row(T.log_softmax(logits, axis=1), np.asarray(ids))
        return T.neg(T.sum_(lp))

    def batch_nll(self, batch_ids: np.ndarray, lengths: np.ndarray,
                  dropout_rate: float = 0.0, rng: RngState | None = None,
                  training: bool = False) -> Tensor:
        """Mean per-sequence NLL over a padded batch.

        Padded steps are masked out of the loss, so each sequence's
        contribution equals its unbatched NLL.
        """
        b, width = batch_ids.shape
        inputs = np.concatenate([np.full((b, 1), START_ID, dtype=np.int64),
                                 batch_ids[:, :-1]], axis=1)
        # PAD inputs would still feed masked steps; keep them PAD for
        # determinism of the masked computation.
        states = [cell.zero_state(batch=b) for cell in self.cells]
        total = None
        for t in range(width):
            x = T.dropout(T.take_rows(self.embed, inputs[:, t]), dropout_rate, rng, training)
            inp = x
            for k, cell in enumerate(self.cells):
                states[k] = cell.step(states[k], inp)
                inp = states[k][0]
                if k < len(self.cells) - 1:
                    inp = T.dropout(inp, dropout_rate, rng, training)
            top = T.dropout(inp, dropout_rate, rng, training)
            logits = T.add(T.matmul(top, self.w_out), self.b_out)
            lp = T.take_per_row(T.log_softmax(logits, axis=1), batch_ids[:, t])
            mask = (t < lengths).astype(np.float64)
            step_loss = T.neg(T.sum_(T.mul(lp, Tensor(mask))))
            total = step_loss if total is None else T.add(total, step_loss)
        return T.scale(total, 1.0 / b)

    def perplexity(self, sequences) -> float:
        """exp of the mean per-token NLL across the sequences."""
        total, count = 0.0, 0
        for ids in sequences:
            total -= self.sequence_logprob(ids)
            count += len(list(ids))
        return float(np.exp(total / count))
