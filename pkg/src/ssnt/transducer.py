"""Monotone-alignment sequence transducer.

The model reads its input left to right with a unidirectional LSTM and,
per output token, either SHIFTs (reads one more input token) or EMITs the
next output token at the current position. Exact marginalization over the
latent monotone alignment is a dynamic program over a forward chart of
log probabilities.

The same class serves the direct (x -> y) and channel (y -> x) roles;
the role is purely a property of the data it was trained on. An optional
bidirectional input encoder exists for the direct role only; the channel
role requires prefix-causal input encodings.

Conventions: input positions are 0-based internally (position p means
p + 1 tokens read); the virtual pre-output alignment sits at position 0.
At the final input position EMIT is forced, so alignment transitions are
proper distributions and no probability mass runs past the end of the
input. Training reads only the full-consumption corner of the chart.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import START_ID
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .tensor import NEG_INF, Parameter, RngState, Tensor

log = logging.getLogger(__name__)

INIT_RANGE = 0.08


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return x - (np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m)


def _logsumexp(x: np.ndarray, axis: int = 0) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(x - m_safe), axis=axis)
    with np.errstate(divide="ignore"):
        out = np.where(s > 0.0, np.log(np.maximum(s, 1e-323)) + np.squeeze(m_safe, axis), NEG_INF)
    return out


@dataclass
class SsntConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    hidden_size: int = 256
    embed_size: int | None = None
    emit_hidden: int | None = None
    bidirectional: bool = False

    def resolved_embed(self) -> int:
        return self.embed_size if self.embed_size is not None else self.hidden_size

    def resolved_emit_hidden(self) -> int:
        return self.emit_hidden if self.emit_hidden is not None else self.hidden_size

    def encoder_width(self) -> int:
        return 2 * self.hidden_size if self.bidirectional else self.hidden_size


def alignment_transition(emit_probs, z_prev: int, i: int) -> float:
    """Probability of moving from position z_prev to position i (0-based).

    Zero for i < z_prev; emit_probs[i] at i == z_prev; otherwise the
    product of shift probabilities through the skipped positions times the
    emit probability at i.
    """
    emit_probs = np.asarray(emit_probs, dtype=np.float64)
    n = emit_probs.shape[0]
    if not (0 <= z_prev < n and 0 <= i < n):
        raise ContractError(f"positions must lie in [0, {n}), got z_prev={z_prev}, i={i}")
    if i < z_prev:
        return 0.0
    p = float(emit_probs[i])
    for u in range(z_prev, i):
        p *= 1.0 - float(emit_probs[u])
    return p


@dataclass
class ForwardChart:
    """Lattice of log marginal probabilities.

    ``log_alpha[i][j]`` (1-based in both coordinates) is the log
    probability of producing the first j output tokens with the alignment
    at input position i. Column 0 holds the virtual start at position 1.
    """

    log_alpha: np.ndarray

    @property
    def input_len(self) -> int:
        return self.log_alpha.shape[0] - 1

    @property
    def output_len(self) -> int:
        return self.log_alpha.shape[1] - 1

    def corner(self) -> float:
        return float(self.log_alpha[self.input_len, self.output_len])

    def last_column_marginal(self) -> float:
        return float(_logsumexp(self.log_alpha[1:, self.output_len], axis=0))


class EncoderStates:
    """Prefix-causal encoder states, extendable one token at a time.

    ``h[i]`` covers exactly the first i + 1 tokens; extending with further
    tokens never touches earlier entries.
    """

    def __init__(self, model: "SsntModel"):
        if model.config.bidirectional:
            raise ConfigError("incremental encoding requires a unidirectional encoder")
        self._model = model
        self._state = model._input_start_state()
        self.h: list[np.ndarray] = []

    def extend(self, token_id: int) -> "EncoderStates":
        emb = self._model.src_embed.data[int(token_id)]
        self._state = self._model.enc_cell.step_np(self._state, emb)
        self.h.append(self._state[0])
        return self

    def last_state(self):
        return self._state


def encode_input_prefix(states: EncoderStates, token_id: int) -> EncoderStates:
    """Functional alias for :meth:`EncoderStates.extend`."""
    return states.extend(token_id)


class SsntModel:
    """All learned tensors of one transducer plus its scoring operations."""

    def __init__(self, config: SsntConfig, rng: RngState):
        self.config = config
        h = config.hidden_size
        e = config.resolved_embed()
        hm = config.resolved_emit_hidden()
        henc = config.encoder_width()
        vs, vt = config.src_vocab_size, config.tgt_vocab_size
        r = INIT_RANGE

        self.src_embed = Parameter("src_embed", rng.uniform(-r, r, (vs, e)))
        self.tgt_embed = Parameter("tgt_embed", rng.uniform(-r, r, (vt, e)))
        self.enc_cell = T.LstmCell("enc", e, h, rng)
        self.enc_rev_cell = T.LstmCell("enc_rev", e, h, rng) if config.bidirectional else None
        self.dec_cell = T.LstmCell("dec", e, h, rng)
        self.w_word = Parameter("w_word", rng.uniform(-r, r, (vt, henc + h)))
        self.b_word = Parameter("b_word", rng.uniform(-r, r, (vt,)))
        self.w_emit = Parameter("w_emit", rng.uniform(-r, r, (hm, henc + h)))
        self.b_emit = Parameter("b_emit", rng.uniform(-r, r, (hm,)))
        self.u_emit = Parameter("u_emit", rng.uniform(-r, r, (hm,)))
        self.c_emit = Parameter("c_emit", rng.uniform(-r, r, ()))

    def parameters(self) -> list[Parameter]:
        params = [self.src_embed, self.tgt_embed]
        params += self.enc_cell.parameters()
        if self.enc_rev_cell is not None:
            params += self.enc_rev_cell.parameters()
        params += self.dec_cell.parameters()
        params += [self.w_word, self.b_word, self.w_emit, self.b_emit, self.u_emit, self.c_emit]
        return params

    # -- weight views ------------------------------------------------------

    def _henc(self) -> int:
        return self.config.encoder_width()

    def _word_enc_w(self) -> np.ndarray:
        return self.w_word.data[:, : self._henc()]

    def _word_dec_w(self) -> np.ndarray:
        return self.w_word.data[:, self._henc():]

    def _emit_enc_w(self) -> np.ndarray:
        return self.w_emit.data[:, : self._henc()]

    def _emit_dec_w(self) -> np.ndarray:
        return self.w_emit.data[:, self._henc():]

    # -- inference scoring (plain numpy) ------------------------------------

    def _input_start_state(self):
        emb = self.src_embed.data[START_ID]
        return self.enc_cell.step_np(self.enc_cell.zero_state_np(), emb)

    def _output_start_state(self):
        emb = self.tgt_embed.data[START_ID]
        return self.dec_cell.step_np(self.dec_cell.zero_state_np(), emb)

    def encode_input_np(self, x_ids) -> np.ndarray:
        """Encoder state matrix (I, encoder_width) for a full input."""
        state = self._input_start_state()
        rows = []
        for tok in x_ids:
            state = self.enc_cell.step_np(state, self.src_embed.data[int(tok)])
            rows.append(state[0])
        fwd = np.stack(rows) if rows else np.zeros((0, self.config.hidden_size))
        if self.enc_rev_cell is None:
            return fwd
        state = self.enc_rev_cell.step_np(self.enc_rev_cell.zero_state_np(),
                                          self.src_embed.data[START_ID])
        rev_rows = []
        for tok in reversed(list(x_ids)):
            state = self.enc_rev_cell.step_np(state, self.src_embed.data[int(tok)])
            rev_rows.append(state[0])
        bwd = np.stack(rev_rows[::-1])
        return np.concatenate([fwd, bwd], axis=1)

    def decoder_states_np(self, prefix_ids, count: int) -> np.ndarray:
        """States s_1..s_count; s_j encodes START plus the first j-1 tokens."""
        state = self._output_start_state()
        rows = [state[0]]
        for tok in list(prefix_ids)[: count - 1]:
            state = self.dec_cell.step_np(state, self.tgt_embed.data[int(tok)])
            rows.append(state[0])
        return np.stack(rows)

    def advance_decoder_np(self, state, token_id: int):
        return self.dec_cell.step_np(state, self.tgt_embed.data[int(token_id)])

    def emit_probability(self, h_vec: np.ndarray, s_vec: np.ndarray) -> float:
        """P(EMIT) from one encoder state and one decoder state (unforced)."""
        hid = np.tanh(self._emit_enc_w() @ h_vec + self._emit_dec_w() @ s_vec + self.b_emit.data)
        z = float(self.u_emit.data @ hid + self.c_emit.data)
        return float(np.exp(_log_sigmoid(np.asarray(z))))

    def word_distribution(self, h_vec: np.ndarray, s_vec: np.ndarray) -> np.ndarray:
        """Next-token distribution over the full output vocabulary."""
        logits = self._word_enc_w() @ h_vec + self._word_dec_w() @ s_vec + self.b_word.data
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def _emit_logit_matrix(self, hmat: np.ndarray, smat: np.ndarray) -> np.ndarray:
        """Raw emit logits for every (input position, output step) pair."""
        enc_part = hmat @ self._emit_enc_w().T
        dec_part = smat @ self._emit_dec_w().T + self.b_emit.data
        hid = np.tanh(enc_part[:, None, :] + dec_part[None, :, :])
        return hid @ self.u_emit.data + float(self.c_emit.data)

    def forward_chart(self, x_ids, y_ids) -> ForwardChart:
        """Exact marginalization lattice for one (input, output) pair."""
        x_ids, y_ids = list(x_ids), list(y_ids)
        if not x_ids or not y_ids:
            raise ContractError("forward chart needs non-empty input and output")
        i_len, j_len = len(x_ids), len(y_ids)
        hmat = self.encode_input_np(x_ids)
        smat = self.decoder_states_np(y_ids, j_len)
        zmat = self._emit_logit_matrix(hmat, smat)
        log_emit = _log_sigmoid(zmat)
        log_shift = _log_sigmoid(-zmat)
        word_logits = (hmat @ self._word_enc_w().T)[:, None, :] \
            + (smat @ self._word_dec_w().T + self.b_word.data)[None, :, :]
        word_lp = _log_softmax(word_logits, axis=2)
        logword = word_lp[:, np.arange(j_len), y_ids]

        chart = np.full((i_len + 1, j_len + 1), NEG_INF)
        chart[1, 0] = 0.0
        col = np.full(i_len, NEG_INF)
        col[0] = 0.0
        for j in range(j_len):
            trans = T.transition_log_matrix(log_emit[:, j], log_shift[:, j], force_last=True)
            col = _logsumexp(col[:, None] + trans, axis=0) + logword[:, j]
            chart[1:, j + 1] = col
        return ForwardChart(chart)

    # -- training graph ------------------------------------------------------

    def _embed_step(self, table, token_id, rate, rng, training):
        row = T.take_rows(table, int(token_id))
        return T.dropout(row, rate, rng, training)

    def _encode_taped(self, x_ids, rate, rng, training):
        state = self.enc_cell.zero_state()
        state = self.enc_cell.step(state, self._embed_step(self.src_embed, START_ID, rate, rng, training))
        rows = []
        for tok in x_ids:
            state = self.enc_cell.step(state, self._embed_step(self.src_embed, tok, rate, rng, training))
            rows.append(state[0])
        fwd = T.stack(rows)
        if self.enc_rev_cell is None:
            return fwd
        state = self.enc_rev_cell.zero_state()
        state = self.enc_rev_cell.step(state, self._embed_step(self.src_embed, START_ID, rate, rng, training))
        rev = []
        for tok in reversed(list(x_ids)):
            state = self.enc_rev_cell.step(state, self._embed_step(self.src_embed, tok, rate, rng, training))
            rev.append(state[0])
        return T.concat([fwd, T.stack(rev[::-1])], axis=1)

    def _decode_taped(self, y_ids, rate, rng, training):
        state = self.dec_cell.zero_state()
        state = self.dec_cell.step(state, self._embed_step(self.tgt_embed, START_ID, rate, rng, training))
        rows = [state[0]]
        for tok in list(y_ids)[:-1]:
            state = self.dec_cell.step(state, self._embed_step(self.tgt_embed, tok, rate, rng, training))
            rows.append(state[0])
        return T.stack(rows)

    @staticmethod
    def _row(mat: Tensor, k: int) -> Tensor:
        return T.reshape(T.narrow(mat, 0, k, 1), (mat.data.shape[1],))

    def _nll_from_states(self, hmat: Tensor, smat: Tensor, y_ids) -> Tensor:
        """Chart corner loss given taped encoder/decoder state matrices."""
        i_len = hmat.data.shape[0]
        j_len = len(y_ids)
        henc = self._henc()
        hs = self.config.hidden_size
        hm = self.config.resolved_emit_hidden()
        v = self.config.tgt_vocab_size

        w_enc = T.narrow(self.w_word, 1, 0, henc)
        w_dec = T.narrow(self.w_word, 1, henc, hs)
        a_enc = T.narrow(self.w_emit, 1, 0, henc)
        a_dec = T.narrow(self.w_emit, 1, henc, hs)

        word_enc = T.matmul(hmat, transpose(w_enc))
        word_dec = T.add(T.matmul(smat, transpose(w_dec)), self.b_word)
        emit_enc = T.matmul(hmat, transpose(a_enc))
        emit_dec = T.add(T.matmul(smat, transpose(a_dec)), self.b_emit)

        hid = T.tanh(T.add(T.reshape(emit_enc, (i_len, 1, hm)),
                           T.reshape(emit_dec, (1, j_len, hm))))
        z = T.add(T.reshape(T.matmul(T.reshape(hid, (i_len * j_len, hm)), self.u_emit),
                            (i_len, j_len)), self.c_emit)
        log_emit = T.log_sigmoid(z)
        log_shift = T.log_sigmoid(T.neg(z))
        word_lp = T.log_softmax(T.add(T.reshape(word_enc, (i_len, 1, v)),
                                      T.reshape(word_dec, (1, j_len, v))), axis=2)
        logword = T.reshape(
            T.take_per_row(T.reshape(word_lp, (i_len * j_len, v)),
                           np.tile(np.asarray(y_ids, dtype=np.int64), i_len)),
            (i_len, j_len))

        corner = chart_corner(log_emit, log_shift, logword)
        if corner.data == NEG_INF:
            log.warning("full-consumption probability is exactly zero for a length-%d/%d pair",
                        i_len, j_len)
        return T.neg(corner)

    def sequence_nll(self, x_ids, y_ids, dropout_rate: float = 0.0,
                     rng: RngState | None = None, training: bool = False) -> Tensor:
        """Negative log probability of the output with full input consumption.

        Only the corner chart cell counts: the final output token must be
        emitted after the entire input has been read. Differentiable when a
        tape is open.
        """
        x_ids, y_ids = list(x_ids), list(y_ids)
        if not x_ids or not y_ids:
            raise ContractError("sequence_nll needs non-empty input and output")
        # Dropout on the input and output of each LSTM: token embeddings
        # inside the encode/decode helpers, hidden states here.
        hmat = T.dropout(self._encode_taped(x_ids, dropout_rate, rng, training),
                         dropout_rate, rng, training)
        smat = T.dropout(self._decode_taped(y_ids, dropout_rate, rng, training),
                         dropout_rate, rng, training)
        return self._nll_from_states(hmat, smat, y_ids)

    def batch_nll_losses(self, pairs, dropout_rate: float = 0.0,
                         rng: RngState | None = None, training: bool = False) -> list[Tensor]:
        """Per-pair losses with the LSTM recurrences batched across pairs.

        Padded steps feed only states beyond each pair's true length, which
        are never read, so every loss equals its unbatched value. The
        bidirectional encoder is not batchable this way and falls back to
        the per-pair path.
        """
        from .corpus import PAD_ID

        if self.config.bidirectional:
            return [self.sequence_nll(p.source.ids, p.target.ids, dropout_rate, rng, training)
                    for p in pairs]
        b = len(pairs)
        hs = self.config.hidden_size
        src_seqs = [list(p.source.ids) for p in pairs]
        tgt_seqs = [list(p.target.ids) for p in pairs]
        max_src = max(len(s) for s in src_seqs)
        max_tgt = max(len(t) for t in tgt_seqs)

        enc_in = np.full((b, max_src + 1), PAD_ID, dtype=np.int64)
        enc_in[:, 0] = START_ID
        for k, s in enumerate(src_seqs):
            enc_in[k, 1 : len(s) + 1] = s
        dec_in = np.full((b, max_tgt), PAD_ID, dtype=np.int64)
        dec_in[:, 0] = START_ID
        for k, t in enumerate(tgt_seqs):
            dec_in[k, 1 : len(t)] = t[:-1]

        def run(cell, table, ids, steps):
            state = cell.zero_state(batch=b)
            rows = []
            for t in range(steps):
                x = T.dropout(T.take_rows(table, ids[:, t]), dropout_rate, rng, training)
                state = cell.step(state, x)
                rows.append(state[0])
            return T.dropout(T.stack(rows), dropout_rate, rng, training)

        h_full = run(self.enc_cell, self.src_embed, enc_in, max_src + 1)
        h_all = T.narrow(h_full, 0, 1, max_src)  # drop the START-step row
        s_all = run(self.dec_cell, self.tgt_embed, dec_in, max_tgt)

        losses = []
        for k, (x_ids, y_ids) in enumerate(zip(src_seqs, tgt_seqs)):
            i_len, j_len = len(x_ids), len(y_ids)
            hmat = T.reshape(T.narrow(T.narrow(h_all, 1, k, 1), 0, 0, i_len), (i_len, hs))
            smat = T.reshape(T.narrow(T.narrow(s_all, 1, k, 1), 0, 0, j_len), (j_len, hs))
            losses.append(self._nll_from_states(hmat, smat, y_ids))
        return losses

    # -- decode-time scorers -------------------------------------------------

    def direct_scorer(self, x_ids) -> "DirectScorer":
        return DirectScorer(self, x_ids)

    def channel_scorer(self, out_ids) -> "ChannelScorer":
        return ChannelScorer(self, out_ids)

    def channel_prefix_score(self, input_prefix_ids, output_prefix_ids) -> float:
        """log sum of chart mass for an output prefix, reading at most the
        given input prefix. Convenience wrapper over the incremental cache."""
        scorer = self.channel_scorer(list(output_prefix_ids))
        cache = scorer.start()
        for tok in input_prefix_ids:
            cache = cache.extend(int(tok))
        return cache.prefix_score(len(list(output_prefix_ids)))


def transpose(a: Tensor) -> Tensor:
    """Taped 2-D transpose."""
    out = a.data.T.copy()
    if T._active_tape() is None:
        return Tensor(out)

    def vjp(g):
        T._accum(a, g.T)

    return T._node(out, (a,), vjp)


def chart_corner(log_emit: Tensor, log_shift: Tensor, logword: Tensor) -> Tensor:
    """Full-consumption corner of the forward chart as one fused operation.

    Inputs are (input positions x output steps) matrices of raw emit /
    shift / selected-word log probabilities; the final input position's
    emit is forced inside. The backward pass is the matching reverse
    dynamic program, so long charts cost two passes rather than one tape
    node per cell.
    """
    le, ls, lw = log_emit.data, log_shift.data, logword.data
    i_len, j_len = le.shape
    alphas = np.empty((j_len + 1, i_len))
    alphas[0] = NEG_INF
    alphas[0, 0] = 0.0
    trans_stack = np.empty((j_len, i_len, i_len))
    for j in range(j_len):
        trans_stack[j] = T.transition_log_matrix(le[:, j], ls[:, j], force_last=True)
        pre = _logsumexp(alphas[j][:, None] + trans_stack[j], axis=0)
        alphas[j + 1] = pre + lw[:, j]
    corner = np.asarray(alphas[j_len, i_len - 1])

    def build_vjp(accum):
        def vjp(g):
            g_le = np.zeros_like(le)
            g_ls = np.zeros_like(ls)
            g_lw = np.zeros_like(lw)
            g_alpha = np.zeros(i_len)
            g_alpha[i_len - 1] = float(g)
            for j in range(j_len - 1, -1, -1):
                g_lw[:, j] = g_alpha
                pre = alphas[j + 1][None, :] - lw[None, :, j]
                with np.errstate(invalid="ignore"):
                    weights = np.where(
                        np.isfinite(pre),
                        np.exp(alphas[j][:, None] + trans_stack[j] - pre), 0.0)
                weights *= g_alpha[None, :]
                d_t = weights
                col = d_t.sum(axis=0)
                dc = col - d_t.sum(axis=1)
                rev = np.cumsum(dc[::-1])[::-1]
                g_le[:, j] = col
                g_ls[:, j] = np.concatenate((rev[1:], [0.0]))
                g_le[i_len - 1, j] = 0.0
                g_ls[i_len - 1, j] = 0.0
                g_alpha = weights.sum(axis=1)
            accum(log_emit, g_le)
            accum(log_shift, g_ls)
            accum(logword, g_lw)
        return vjp

    return T.custom_node(corner, (log_emit, log_shift, logword), build_vjp)


class DirectScorer:
    """Per-input proposal machinery for the direct model.

    Encoder-side projections are computed once per input; per-hypothesis
    work is one matrix-vector product plus row softmaxes.
    """

    def __init__(self, model: SsntModel, x_ids):
        self.model = model
        self.x_ids = [int(t) for t in x_ids]
        if not self.x_ids:
            raise ContractError("cannot decode an empty input")
        self.input_len = len(self.x_ids)
        self.hmat = model.encode_input_np(self.x_ids)
        self.word_enc = self.hmat @ model._word_enc_w().T
        self.emit_enc = self.hmat @ model._emit_enc_w().T
        self.vocab_size = model.config.tgt_vocab_size
        self._start = model._output_start_state()

    def start_state(self):
        return self._start

    def advance(self, state, token_id: int):
        return self.model.advance_decoder_np(state, token_id)

    def extension_scores(self, state, k: int):
        """(log transition, token log-probs) for target positions k..I-1.

        Row m corresponds to target position k + m; EMIT is forced at the
        final input position.
        """
        m = self.model
        s = state[0]
        hid = np.tanh(self.emit_enc[k:] + (m._emit_dec_w() @ s + m.b_emit.data))
        z = hid @ m.u_emit.data + float(m.c_emit.data)
        log_emit = _log_sigmoid(z)
        log_shift = _log_sigmoid(-z)
        log_emit[-1] = 0.0
        log_shift[-1] = NEG_INF
        trans = np.concatenate(([0.0], np.cumsum(log_shift[:-1]))) + log_emit
        logits = self.word_enc[k:] + (m._word_dec_w() @ s + m.b_word.data)
        return trans, _log_softmax(logits, axis=1)

    def sequence_viterbi_path_score(self, y_ids, positions) -> float:
        """Score of one specific alignment path (for coherence checks)."""
        state = self._start
        total = 0.0
        prev = 0
        for tok, pos in zip(y_ids, positions):
            trans, words = self.extension_scores(state, prev)
            total += trans[pos - prev] + words[pos - prev, int(tok)]
            state = self.advance(state, int(tok))
            prev = pos
        return total


def direct_next_scores(scorer: DirectScorer, state, base_score: float, k: int, k1: int):
    """Top-k1 (token, position, score) extensions of one hypothesis.

    Scores are base_score plus the transition and token log probabilities;
    ties break by smaller token id, then smaller position.
    """
    trans, words = scorer.extension_scores(state, k)
    n, v = words.shape
    scores = (base_score + trans[:, None] + words).reshape(-1)
    positions = np.repeat(np.arange(k, k + n), v)
    tokens = np.tile(np.arange(v), n)
    finite = scores > NEG_INF
    scores, positions, tokens = scores[finite], positions[finite], tokens[finite]
    order = np.lexsort((positions, tokens, -scores))[:k1]
    return [(int(tokens[o]), int(positions[o]), float(scores[o])) for o in order]


class ChannelScorer:
    """Incremental channel evaluation against one fixed output sequence.

    The channel's output side (the observed sequence it must explain) is
    fixed per decode, so its decoder states and projections are shared by
    every hypothesis; each hypothesis owns a growing :class:`ChannelCache`
    keyed by the input tokens read so far.
    """

    def __init__(self, model: SsntModel, out_ids):
        self.model = model
        self.out_ids = np.asarray([int(t) for t in out_ids], dtype=np.int64)
        self.width = len(self.out_ids)
        smat = model.decoder_states_np(self.out_ids, self.width)
        self.emit_dec = smat @ model._emit_dec_w().T + model.b_emit.data
        self.word_dec = smat @ model._word_dec_w().T + model.b_word.data
        self._start_enc = model._input_start_state()

    def start(self) -> "ChannelCache":
        return ChannelCache(self, 0, self._start_enc, [], [], None)


class ChannelCache:
    """Forward chart rows for one hypothesis's read prefix.

    Extending by one token reuses every previously computed row; nothing
    is recomputed. ``prefix_score(a)`` marginalizes over how much of the
    prefix was read to emit the first ``a`` output tokens;
    ``exact_final()`` forces full consumption of the read prefix at the
    final output token, matching the training objective.
    """

    __slots__ = ("scorer", "length", "enc_state", "chart_rows", "csum_rows", "last_logword")

    def __init__(self, scorer, length, enc_state, chart_rows, csum_rows, last_logword):
        self.scorer = scorer
        self.length = length
        self.enc_state = enc_state
        self.chart_rows = chart_rows      # row b: (width + 1,) including column a=0
        self.csum_rows = csum_rows        # cumulative log-shift through row b, per output step
        self.last_logword = last_logword

    def extend(self, token_id: int) -> "ChannelCache":
        s = self.scorer
        m = s.model
        width = s.width
        enc_state = m.enc_cell.step_np(self.enc_state, m.src_embed.data[int(token_id)])
        h = enc_state[0]
        hid = np.tanh(m._emit_enc_w() @ h + s.emit_dec)
        z = hid @ m.u_emit.data + float(m.c_emit.data)
        log_emit = _log_sigmoid(z)
        log_shift = _log_sigmoid(-z)
        word_lp = _log_softmax(h @ m._word_enc_w().T + s.word_dec, axis=1)
        logword = word_lp[np.arange(width), s.out_ids]

        base = self._base_into_new_row(self.length, width)
        new_row = np.empty(width + 1)
        new_row[0] = 0.0 if self.length == 0 else NEG_INF
        acc = new_row[0]
        for a in range(1, width + 1):
            acc = np.logaddexp(base[a - 1], acc) + log_emit[a - 1] + logword[a - 1]
            new_row[a] = acc
        total = self.csum_rows[-1] if self.csum_rows else np.zeros(width)
        return ChannelCache(
            s, self.length + 1, enc_state,
            self.chart_rows + [new_row],
            self.csum_rows + [total + log_shift],
            logword,
        )

    def _base_into_new_row(self, rows: int, width: int) -> np.ndarray:
        """logsumexp over predecessor rows of chart mass shifted to the
        row after ``rows`` (emit/word factors excluded)."""
        if rows == 0:
            return np.full(width, NEG_INF)
        cmat = np.stack(self.chart_rows)[:, :width]
        total = self.csum_rows[rows - 1]
        prev = np.stack([np.zeros(width)] + self.csum_rows[: rows - 1])
        return _logsumexp(cmat + (total - prev), axis=0)

    def prefix_score(self, covered: int) -> float:
        """log P(first ``covered`` output tokens | read prefix), summed over
        all read amounts up to the current length."""
        if covered == 0:
            return 0.0
        if self.length == 0:
            return NEG_INF
        col = np.stack(self.chart_rows)[:, covered]
        return float(_logsumexp(col, axis=0))

    def exact_final(self) -> float:
        """Full-consumption score: every output token emitted, with the final
        one emitted exactly at the end of the read prefix."""
        if self.length == 0:
            return NEG_INF
        width = self.scorer.width
        j = self.length
        if j == 1:
            base = np.full(width, NEG_INF)
        else:
            cmat = np.stack(self.chart_rows[: j - 1])[:, :width]
            total = self.csum_rows[j - 2]
            prev = np.stack([np.zeros(width)] + self.csum_rows[: j - 2])
            base = _logsumexp(cmat + (total - prev), axis=0)
        acc = self.chart_rows[j - 1][0]
        for a in range(1, width + 1):
            acc = np.logaddexp(base[a - 1], acc) + self.last_logword[a - 1]
        return float(acc)
