"""Noisy-channel beam search over the input-coverage/output-length lattice.

Cell (i, j) holds hypotheses that cover the first i + 1 input tokens
(0-based position i) and have produced j output tokens. Per column j, the
direct model proposes token extensions of the previous column's
hypotheses; each target cell keeps the k1 best-ranked proposals, rescored
under the combined objective, of which the k2 best survive.

The direct-model component of the objective is the score of the
hypothesis's own alignment path through the lattice (a max over
alignments, not a marginal). The channel component of a live hypothesis
is the forward marginal over how much of it the channel has read; when a
hypothesis terminates (EOS at full input coverage) the channel component
switches to the exact full-consumption score used in training.

Every top-k selection orders by higher score, then smaller token id, then
smaller predecessor input position, then smaller predecessor slot, making
decoding a total order and therefore reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import EOS_ID, PAD_ID, START_ID
from .errors import ConfigError, ContractError
from .lm import LmModel
from .tensor import NEG_INF
from .transducer import SsntModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Lambda:
    """Combination weights: direct, channel, language model, length bias."""

    direct: float = 1.0
    channel: float = 1.0
    lm: float = 1.0
    length_bias: float = 0.0

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not np.isfinite(v):
                raise ConfigError(f"lambda weight {name} must be finite, got {v}")

    def as_dict(self):
        return {"direct": self.direct, "channel": self.channel,
                "lm": self.lm, "length_bias": self.length_bias}

    def scaled(self, factor: float) -> "Lambda":
        return Lambda(self.direct * factor, self.channel * factor,
                      self.lm * factor, self.length_bias * factor)

    @classmethod
    def from_string(cls, text: str) -> "Lambda":
        parts = text.split(",")
        if len(parts) != 4:
            raise ConfigError(f"lambda must be four comma-joined numbers, got {text!r}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ConfigError(f"bad lambda value in {text!r}") from exc
        return cls(*vals)

    def __str__(self):
        return ",".join(repr(v) for v in
                        (self.direct, self.channel, self.lm, self.length_bias))


@dataclass
class DecodeConfig:
    """Search sizes: k1 proposals per cell, k2 kept per cell, output cap."""

    k1: int = 20
    k2: int = 10
    j_max: int | None = None

    def __post_init__(self):
        if self.k1 < 1:
            raise ConfigError(f"k1 must be >= 1, got {self.k1}")
        if self.k2 < 1 or self.k2 > self.k1:
            raise ConfigError(f"k2 must satisfy 1 <= k2 <= k1, got k2={self.k2}, k1={self.k1}")
        if self.j_max is not None and self.j_max < 1:
            raise ConfigError(f"j_max must be >= 1, got {self.j_max}")

    def resolve_j_max(self, input_len: int) -> int:
        if self.j_max is not None:
            return self.j_max
        return min(2 * input_len + 5, 64)


def combined_objective(direct_lp, channel_lp, lm_lp, length: int, lam: Lambda) -> float:
    """lam1*direct + lam2*channel + lam3*lm + lam4*length.

    Zero-weight components are excluded entirely (their scores may be
    None); -inf in any weighted component absorbs the whole score.
    """
    total = lam.length_bias * length
    for weight, lp in ((lam.direct, direct_lp), (lam.channel, channel_lp), (lam.lm, lm_lp)):
        if weight == 0.0:
            continue
        if lp is None:
            raise ContractError("weighted component score missing")
        if lp == NEG_INF:
            return NEG_INF
        total += weight * lp
    return total


@dataclass
class Hypothesis:
    """One beam entry: its lattice cell, last token, scores, and states."""

    pos: int                       # input position covered (0-based)
    j: int                         # output tokens produced so far
    token: int                     # last token (W entry)
    prev: tuple | None             # backpointer (pos, slot) into column j-1
    direct: float                  # alignment-path direct log-probability
    channel: float | None
    lm: float | None
    combined: float
    terminal: bool = False
    dec_state: tuple | None = None
    lm_state: object = None
    cache: object = None


class DecodeStats:
    """Instrumentation: per-cell candidate counts and model evaluations."""

    def __init__(self):
        self.cell_candidates: dict[tuple, int] = {}
        self.cell_rescored: dict[tuple, int] = {}
        self.channel_extends = 0
        self.channel_width = 0
        self.parent_expansions = 0
        self.terminal_rescored = 0

    @property
    def channel_evaluations(self) -> int:
        """Emit/word score computations performed by the channel model."""
        return self.channel_extends * self.channel_width

    @property
    def total_rescored(self) -> int:
        return sum(self.cell_rescored.values())


class BeamChart:
    """Column-major lattice of hypothesis lists (the Q/bp/W store)."""

    def __init__(self, input_len: int, j_max: int):
        self.input_len = input_len
        self.j_max = j_max
        self.columns: list[list[list[Hypothesis]]] = [
            [[] for _ in range(input_len)] for _ in range(j_max + 1)
        ]

    def cell(self, pos: int, j: int) -> list[Hypothesis]:
        return self.columns[j][pos]

    def nonterminal_count(self, pos: int, j: int) -> int:
        return sum(1 for h in self.cell(pos, j) if not h.terminal)

    def terminals(self):
        for j in range(1, self.j_max + 1):
            for slot, hyp in enumerate(self.cell(self.input_len - 1, j)):
                if hyp.terminal:
                    yield j, slot, hyp


def backtrace(chart: BeamChart, pos: int, j: int, slot: int) -> list[int]:
    """Token sequence of one chart entry, in forward order."""
    tokens = []
    cur = chart.cell(pos, j)[slot]
    expect_j = j
    while True:
        tokens.append(cur.token)
        if cur.prev is None:
            if expect_j != 1:
                raise ContractError("backpointer chain does not terminate at column 1")
            break
        expect_j -= 1
        if expect_j < 1:
            raise ContractError("backpointer chain underruns the chart")
        ppos, pslot = cur.prev
        cur = chart.cell(ppos, expect_j)[pslot]
    tokens.reverse()
    if len(tokens) != j:
        raise ContractError(f"backtraced length {len(tokens)} != column {j}")
    return tokens


@dataclass
class DecodeResult:
    tokens: list[int]              # content tokens, EOS stripped
    score: float
    terminal: bool
    truncated: bool
    components: dict
    chart: BeamChart
    cell: tuple                    # (pos, j, slot) of the returned entry


def _check_model_compatibility(direct: SsntModel, channel: SsntModel | None,
                               lm: LmModel | None):
    if channel is not None:
        if channel.config.bidirectional:
            raise ConfigError("channel model must use a unidirectional encoder")
        if channel.config.src_vocab_size != direct.config.tgt_vocab_size:
            raise ConfigError(
                "channel input vocabulary size "
                f"{channel.config.src_vocab_size} != direct output vocabulary size "
                f"{direct.config.tgt_vocab_size}")
        if channel.config.tgt_vocab_size != direct.config.src_vocab_size:
            raise ConfigError(
                "channel output vocabulary size "
                f"{channel.config.tgt_vocab_size} != direct input vocabulary size "
                f"{direct.config.src_vocab_size}")
    if lm is not None and lm.config.vocab_size != direct.config.tgt_vocab_size:
        raise ConfigError(
            f"language model vocabulary size {lm.config.vocab_size} != "
            f"direct output vocabulary size {direct.config.tgt_vocab_size}")


def noisy_channel_decode(x_ids, direct: SsntModel, lam: Lambda, config: DecodeConfig,
                         channel: SsntModel | None = None, lm: LmModel | None = None,
                         stats: DecodeStats | None = None) -> DecodeResult:
    """Best output sequence for one input under the combined objective."""
    x_ids = [int(t) for t in x_ids]
    if not x_ids:
        raise ConfigError("cannot decode an empty input")
    _check_model_compatibility(direct, channel, lm)
    use_channel = lam.channel != 0.0
    use_lm = lam.lm != 0.0
    if use_channel and channel is None:
        raise ConfigError("nonzero channel weight requires a channel model")
    if use_lm and lm is None:
        raise ConfigError("nonzero language-model weight requires a language model")

    input_len = len(x_ids)
    j_max = config.resolve_j_max(input_len)
    vocab = direct.config.tgt_vocab_size
    scorer = direct.direct_scorer(x_ids)
    channel_scorer = channel.channel_scorer(x_ids + [EOS_ID]) if use_channel else None
    if stats is None:
        stats = DecodeStats()
    stats.channel_width = input_len + 1 if use_channel else 0

    root = Hypothesis(
        pos=0, j=0, token=-1, prev=None, direct=0.0,
        channel=0.0 if use_channel else None,
        lm=0.0 if use_lm else None,
        combined=0.0,
        dec_state=scorer.start_state(),
        lm_state=lm.lm_start() if use_lm else None,
        cache=channel_scorer.start() if use_channel else None,
    )

    chart = BeamChart(input_len, j_max)
    base_tokens = np.array([t for t in range(vocab) if t not in (PAD_ID, START_ID, EOS_ID)],
                           dtype=np.int64)
    final_tokens = np.sort(np.append(base_tokens, EOS_ID))

    for j in range(1, j_max + 1):
        if j == 1:
            parents = [(0, 0, root)]
        else:
            parents = [
                (k, slot, hyp)
                for k in range(input_len)
                for slot, hyp in enumerate(chart.cell(k, j - 1))
                if not hyp.terminal
            ]
        if not parents:
            break
        expansions = []
        for k, slot, hyp in parents:
            trans, words = scorer.extension_scores(hyp.dec_state, k)
            expansions.append((k, slot, hyp, trans, words))
            stats.parent_expansions += 1

        for i in range(input_len):
            allowed = final_tokens if i == input_len - 1 else base_tokens
            ranks, toks, dincs, pidx = [], [], [], []
            for p, (k, slot, hyp, trans, words) in enumerate(expansions):
                if k > i:
                    continue
                m = i - k
                inc = trans[m] + words[m, allowed]
                ranks.append(hyp.combined + inc)
                dincs.append(inc)
                toks.append(allowed)
                pidx.append(np.full(len(allowed), p, dtype=np.int64))
            if not ranks:
                continue
            ranks = np.concatenate(ranks)
            dincs = np.concatenate(dincs)
            toks = np.concatenate(toks)
            pidx = np.concatenate(pidx)
            finite = ranks > NEG_INF
            ranks, dincs, toks, pidx = ranks[finite], dincs[finite], toks[finite], pidx[finite]
            stats.cell_candidates[(i, j)] = int(ranks.size)
            if ranks.size == 0:
                continue
            ppos = np.array([expansions[p][0] for p in pidx], dtype=np.int64)
            pslot = np.array([expansions[p][1] for p in pidx], dtype=np.int64)
            order = np.lexsort((pslot, ppos, toks, -ranks))[: config.k1]
            stats.cell_rescored[(i, j)] = int(order.size)

            rescored = []
            for o in order:
                k, slot, hyp, _, _ = expansions[pidx[o]]
                token = int(toks[o])
                d_new = hyp.direct + float(dincs[o])
                is_terminal = token == EOS_ID
                if is_terminal:
                    stats.terminal_rescored += 1
                cache_new = None
                ch_score = None
                if use_channel:
                    if is_terminal:
                        ch_score = hyp.cache.exact_final()
                    else:
                        cache_new = hyp.cache.extend(token)
                        stats.channel_extends += 1
                        ch_score = cache_new.prefix_score(i + 1)
                lm_score = None
                if use_lm:
                    lm_score = hyp.lm + float(hyp.lm_state.log_dist[token])
                obj = combined_objective(d_new, ch_score, lm_score, j, lam)
                if obj == NEG_INF:
                    continue
                rescored.append((obj, token, k, slot, hyp, d_new, ch_score, lm_score,
                                 cache_new, is_terminal))
            rescored.sort(key=lambda r: (-r[0], r[1], r[2], r[3]))
            kept = []
            for obj, token, k, slot, hyp, d_new, ch_score, lm_score, cache_new, is_terminal \
                    in rescored[: config.k2]:
                if is_terminal:
                    kept.append(Hypothesis(
                        pos=i, j=j, token=token, prev=(k, slot) if j > 1 else None,
                        direct=d_new, channel=ch_score, lm=lm_score, combined=obj,
                        terminal=True))
                else:
                    kept.append(Hypothesis(
                        pos=i, j=j, token=token, prev=(k, slot) if j > 1 else None,
                        direct=d_new, channel=ch_score, lm=lm_score, combined=obj,
                        dec_state=scorer.advance(hyp.dec_state, token),
                        lm_state=lm.lm_score_next(hyp.lm_state, token)[1] if use_lm else None,
                        cache=cache_new))
            chart.columns[j][i] = kept

    best = None
    for j, slot, hyp in chart.terminals():
        key = (-hyp.combined, j, slot)
        if best is None or key < best[0]:
            best = (key, j, slot, hyp)
    truncated = best is None
    if truncated:
        log.warning("no EOS-terminated hypothesis within %d output tokens; "
                    "returning the best partial hypothesis", j_max)
        for j in range(1, j_max + 1):
            for slot, hyp in enumerate(chart.cell(input_len - 1, j)):
                key = (-hyp.combined, j, slot)
                if best is None or key < best[0]:
                    best = (key, j, slot, hyp)
        if best is None:
            raise ContractError("decoder produced no hypotheses at full coverage")
    _, j, slot, hyp = best
    tokens = backtrace(chart, input_len - 1, j, slot)
    if hyp.terminal:
        tokens = tokens[:-1]
    return DecodeResult(
        tokens=tokens, score=hyp.combined, terminal=hyp.terminal, truncated=truncated,
        components={"direct": hyp.direct, "channel": hyp.channel, "lm": hyp.lm, "length": j},
        chart=chart, cell=(input_len - 1, j, slot))


def direct_beam_decode(x_ids, direct: SsntModel, beam: int,
                       j_max: int | None = None):
    """Plain beam search under the direct model alone.

    Standalone implementation (it shares only the scorer with the
    noisy-channel decoder): per-cell beams of alignment-path scores, EOS
    permitted only at full input coverage, identical tie-breaking.
    Returns (content token ids, path log-probability, terminal flag).
    """
    x_ids = [int(t) for t in x_ids]
    if not x_ids:
        raise ConfigError("cannot decode an empty input")
    if beam < 1:
        raise ConfigError(f"beam must be >= 1, got {beam}")
    input_len = len(x_ids)
    cap = min(2 * input_len + 5, 64) if j_max is None else j_max
    scorer = direct.direct_scorer(x_ids)
    # Entries: (score, tokens tuple, dec_state or None, terminal)
    prev_cells = None
    best_terminal = None
    best_fallback = None  # best entry at full coverage across all columns
    for j in range(1, cap + 1):
        if j == 1:
            parents_by_pos = {0: [(0.0, (), scorer.start_state())]}
        else:
            parents_by_pos = {
                k: [(s, toks, st) for s, toks, st, term in prev_cells[k] if not term]
                for k in range(input_len)
            }
        if not any(parents_by_pos.values()):
            break
        cells = [[] for _ in range(input_len)]
        expanded = {}
        for k, plist in parents_by_pos.items():
            for slot, (score, toks, state) in enumerate(plist):
                expanded[(k, slot)] = (score, toks, state, scorer.extension_scores(state, k))
        for i in range(input_len):
            candidates = []
            for (k, slot), (score, toks, state, (trans, words)) in expanded.items():
                if k > i:
                    continue
                m = i - k
                last = input_len - 1
                for tok in range(words.shape[1]):
                    if tok in (PAD_ID, START_ID) or (tok == EOS_ID and i != last):
                        continue
                    cand = score + trans[m] + words[m, tok]
                    if cand > NEG_INF:
                        candidates.append((cand, tok, k, slot, toks, state))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
            kept = []
            for cand, tok, k, slot, toks, state in candidates[:beam]:
                if tok == EOS_ID:
                    entry = (cand, toks + (tok,), None, True)
                    if best_terminal is None or cand > best_terminal[0]:
                        best_terminal = entry
                else:
                    entry = (cand, toks + (tok,), scorer.advance(state, tok), False)
                kept.append(entry)
                if i == input_len - 1 and not entry[3]:
                    if best_fallback is None or cand > best_fallback[0]:
                        best_fallback = entry
            cells[i] = kept
        prev_cells = cells
    if best_terminal is not None:
        score, tokens, _, _ = best_terminal
        return list(tokens[:-1]), score, True
    log.warning("direct beam search found no EOS-terminated hypothesis within %d tokens", cap)
    if best_fallback is None:
        raise ContractError("direct beam search produced no hypotheses at full coverage")
    return list(best_fallback[1]), best_fallback[0], False


def grid_search_lambda(dev_inputs, dev_refs, direct: SsntModel, grid,
                       config: DecodeConfig, channel: SsntModel | None = None,
                       lm: LmModel | None = None, metric: str = "exact"):
    """Decode the dev set under every weight tuple; return the best tuple.

    ``dev_refs`` are reference content-token id sequences. Ties keep the
    earlier grid entry.
    """
    from .metrics import rouge_l_f1

    grid = list(grid)
    if not grid or not dev_inputs:
        raise ConfigError("grid search needs a non-empty grid and dev set")
    if len(dev_inputs) != len(dev_refs):
        raise ConfigError(f"dev set sizes differ: {len(dev_inputs)} inputs, {len(dev_refs)} references")
    if metric not in ("exact", "rougeL"):
        raise ConfigError(f"unsupported grid-search metric {metric!r}")

    results = []
    best = None
    for lam in grid:
        total = 0.0
        for x, ref in zip(dev_inputs, dev_refs):
            out = noisy_channel_decode(x, direct, lam, config, channel=channel, lm=lm)
            if metric == "exact":
                total += 1.0 if tuple(out.tokens) == tuple(int(t) for t in ref) else 0.0
            else:
                total += rouge_l_f1([str(t) for t in out.tokens], [str(t) for t in ref])
        score = total / len(dev_inputs)
        results.append((lam, score))
        if best is None or score > best[1]:
            best = (lam, score)
        log.info("grid point %s -> %s %.4f", lam, metric, score)
    return best[0], results
