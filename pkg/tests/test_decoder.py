"""Decoder tests: exhaustive-search equivalence, degeneracy, coherence,
beam monotonicity, instrumented complexity, and lambda grid search."""

import itertools

import numpy as np
import pytest

from ssnt import decoder as D
from ssnt import lm as L
from ssnt import transducer as M
from ssnt.corpus import EOS_ID, PAD_ID, START_ID, UNK_ID
from ssnt.errors import ConfigError, ContractError
from ssnt.tensor import NEG_INF, RngState

from test_transducer import emit_word_tables, enumerate_alignment_mass

VOCAB = 7  # four proposable tokens: UNK plus ids 4..6


def make_models(seed, vocab=VOCAB, hidden=4):
    direct = M.SsntModel(
        M.SsntConfig(src_vocab_size=vocab, tgt_vocab_size=vocab, hidden_size=hidden),
        RngState(seed))
    channel = M.SsntModel(
        M.SsntConfig(src_vocab_size=vocab, tgt_vocab_size=vocab, hidden_size=hidden),
        RngState(seed + 1000))
    lm = L.LmModel(L.LmConfig(vocab_size=vocab, hidden_size=hidden, layers=1),
                   RngState(seed + 2000))
    return direct, channel, lm


def proposable_tokens(vocab=VOCAB):
    return [t for t in range(vocab) if t not in (PAD_ID, START_ID, EOS_ID)]


def oracle_direct_viterbi(direct, x_ids, content):
    """Max over monotone alignment paths of the direct path score for
    content + EOS, scored with scalar model calls."""
    y = list(content) + [EOS_ID]
    emit, word = emit_word_tables(direct, x_ids, y, force_last=True)
    i_len, j_len = len(x_ids), len(y)
    best = NEG_INF
    for path in itertools.product(range(i_len), repeat=j_len):
        if path[-1] != i_len - 1:
            continue
        if any(path[k + 1] < path[k] for k in range(j_len - 1)):
            continue
        total = 0.0
        prev = 0
        ok = True
        for j, pos in enumerate(path):
            step = M.alignment_transition(emit[:, j], prev, pos)
            if step == 0.0 or word[pos, j] == 0.0:
                ok = False
                break
            total += np.log(step) + np.log(word[pos, j])
            prev = pos
        if ok:
            best = max(best, total)
    return best


def oracle_channel_exact(channel, content, x_ids):
    """Brute-force full-consumption channel probability of x + EOS given
    the content tokens."""
    if not content:
        return NEG_INF
    out = list(x_ids) + [EOS_ID]
    emit, word = emit_word_tables(channel, list(content), out, force_last=True)
    mass = enumerate_alignment_mass(emit, word, len(content) - 1, len(out))
    return np.log(mass) if mass > 0 else NEG_INF


def oracle_exhaustive_argmax(x_ids, direct, channel, lm, lam, j_max):
    """Argmax over every candidate output sequence under the combined
    objective, all components computed by brute force."""
    best_seq, best_score = None, NEG_INF
    for length in range(0, j_max):
        for content in itertools.product(proposable_tokens(), repeat=length):
            d = oracle_direct_viterbi(direct, x_ids, content) if lam.direct != 0 else None
            c = oracle_channel_exact(channel, content, x_ids) if lam.channel != 0 else None
            l = lm.sequence_logprob(list(content) + [EOS_ID]) if lam.lm != 0 else None
            score = D.combined_objective(d, c, l, length + 1, lam)
            if score > best_score:
                best_seq, best_score = list(content), score
    return best_seq, best_score


class TestCombinedObjective:
    def test_direct_only(self):
        lam = D.Lambda(1, 0, 0, 0)
        assert D.combined_objective(-2.5, None, None, 3, lam) == -2.5

    def test_pure_noisy_channel(self):
        lam = D.Lambda(0, 1, 1, 0)
        assert D.combined_objective(None, -2.0, -0.5, 3, lam) == -2.5

    def test_arithmetic(self):
        lam = D.Lambda(0.5, 1, 1, 0.2)
        got = D.combined_objective(-1.0, -2.0, -0.5, 3, lam)
        assert got == pytest.approx(-0.5 - 2.0 - 0.5 + 0.6)

    def test_neg_inf_absorbs(self):
        lam = D.Lambda(0.5, 1, 1, 0.2)
        assert D.combined_objective(-1.0, NEG_INF, -0.5, 3, lam) == NEG_INF

    def test_zero_weight_ignores_neg_inf(self):
        lam = D.Lambda(1, 0, 0, 0)
        assert D.combined_objective(-1.0, NEG_INF, None, 2, lam) == -1.0

    def test_lambda_validation(self):
        with pytest.raises(ConfigError):
            D.Lambda(np.nan, 0, 0, 0)
        with pytest.raises(ConfigError):
            D.Lambda.from_string("1,2,3")

    def test_negative_length_bias_allowed(self):
        lam = D.Lambda.from_string("1,1,1,-0.3")
        assert lam.length_bias == -0.3


class TestDecodeConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            D.DecodeConfig(k1=0)
        with pytest.raises(ConfigError):
            D.DecodeConfig(k1=5, k2=6)
        with pytest.raises(ConfigError):
            D.DecodeConfig(j_max=0)

    def test_default_j_max(self):
        cfg = D.DecodeConfig()
        assert cfg.resolve_j_max(4) == 13
        assert cfg.resolve_j_max(100) == 64

    def test_paper_default_sizes(self):
        cfg = D.DecodeConfig()
        assert (cfg.k1, cfg.k2) == (20, 10)


LAMBDA_SETTINGS = [
    D.Lambda(1, 0, 0, 0),
    D.Lambda(0, 1, 1, 0),
    D.Lambda(0.5, 1, 1, -0.3),
]


class TestExhaustiveEquivalence:
    @pytest.mark.parametrize("lam", LAMBDA_SETTINGS, ids=["direct", "channel+lm", "mixed"])
    def test_saturated_beams_match_exhaustive_argmax(self, lam):
        config = D.DecodeConfig(k1=4096, k2=4096, j_max=3)
        gen = np.random.default_rng(55)
        for trial in range(12):
            direct, channel, lm = make_models(seed=trial)
            x = list(gen.integers(4, VOCAB, size=2))
            result = D.noisy_channel_decode(
                x, direct, lam, config,
                channel=channel if lam.channel else None,
                lm=lm if lam.lm else None)
            want_seq, want_score = oracle_exhaustive_argmax(x, direct, channel, lm, lam, 3)
            assert result.tokens == want_seq
            assert result.score == pytest.approx(want_score, abs=1e-9)


class TestDegeneracy:
    def test_direct_only_equals_standalone_beam(self):
        gen = np.random.default_rng(77)
        for trial in range(10):
            direct, _, _ = make_models(seed=trial + 50)
            x = list(gen.integers(4, VOCAB, size=int(gen.integers(1, 4))))
            for beam in (1, 2, 4):
                nc = D.noisy_channel_decode(
                    x, direct, D.Lambda(1, 0, 0, 0),
                    D.DecodeConfig(k1=beam, k2=beam, j_max=5))
                tokens, score, terminal = D.direct_beam_decode(x, direct, beam, j_max=5)
                assert nc.tokens == tokens
                if terminal and nc.terminal:
                    assert nc.score == pytest.approx(score, abs=1e-9)


class TestScoreCoherence:
    def test_cached_scores_equal_recomputation(self):
        direct, channel, lm = make_models(seed=5)
        lam = D.Lambda(0.7, 1.0, 0.9, 0.1)
        config = D.DecodeConfig(k1=8, k2=4, j_max=4)
        x = [4, 5, 6]
        result = D.noisy_channel_decode(x, direct, lam, config, channel=channel, lm=lm)
        chart = result.chart
        scorer = direct.direct_scorer(x)
        for j in range(1, 5):
            for i in range(len(x)):
                for slot, hyp in enumerate(chart.cell(i, j)):
                    tokens = D.backtrace(chart, i, j, slot)
                    # Alignment path from the backpointer chain.
                    path = []
                    jj, pos, sl = j, i, slot
                    node = hyp
                    while True:
                        path.append(node.pos)
                        if node.prev is None:
                            break
                        pos, sl = node.prev
                        jj -= 1
                        node = chart.cell(pos, jj)[sl]
                    path.reverse()
                    d_fresh = scorer.sequence_viterbi_path_score(tokens, path)
                    assert d_fresh == pytest.approx(hyp.direct, abs=1e-9)
                    content = tokens[:-1] if hyp.terminal else tokens
                    cache = channel.channel_scorer(x + [EOS_ID]).start()
                    for tok in content:
                        cache = cache.extend(tok)
                    c_fresh = cache.exact_final() if hyp.terminal else cache.prefix_score(i + 1)
                    assert c_fresh == pytest.approx(hyp.channel, abs=1e-9)
                    l_fresh = lm.sequence_logprob(tokens)
                    assert l_fresh == pytest.approx(hyp.lm, abs=1e-9)
                    combo = D.combined_objective(hyp.direct, hyp.channel, hyp.lm, j, lam)
                    assert combo == pytest.approx(hyp.combined, abs=1e-12)


class TestBacktrace:
    def test_single_column_terminal(self):
        direct, _, _ = make_models(seed=6)
        result = D.noisy_channel_decode([4], direct, D.Lambda(1, 0, 0, 0),
                                        D.DecodeConfig(k1=8, k2=8, j_max=1))
        pos, j, slot = result.cell
        assert j == 1
        assert len(D.backtrace(result.chart, pos, j, slot)) == 1

    def test_length_equals_column(self):
        direct, channel, lm = make_models(seed=7)
        result = D.noisy_channel_decode([4, 5], direct, D.Lambda(1, 1, 1, 0),
                                        D.DecodeConfig(k1=6, k2=3, j_max=4),
                                        channel=channel, lm=lm)
        chart = result.chart
        for j in range(1, 5):
            for i in range(2):
                for slot in range(len(chart.cell(i, j))):
                    assert len(D.backtrace(chart, i, j, slot)) == j

    def test_broken_chain_detected(self):
        direct, _, _ = make_models(seed=8)
        result = D.noisy_channel_decode([4, 5], direct, D.Lambda(1, 0, 0, 0),
                                        D.DecodeConfig(k1=4, k2=2, j_max=3))
        chart = result.chart
        hyp = next(h for j in (2, 3) for c in range(2) for h in chart.cell(c, j))
        hyp.prev = None  # corrupt
        with pytest.raises(ContractError):
            D.backtrace(chart, hyp.pos, hyp.j, chart.cell(hyp.pos, hyp.j).index(hyp))


class TestInvariance:
    def test_positive_scaling_of_lambda_preserves_output(self):
        direct, channel, lm = make_models(seed=9)
        config = D.DecodeConfig(k1=8, k2=4, j_max=4)
        lam = D.Lambda(0.5, 1.0, 1.0, -0.2)
        x = [4, 6, 5]
        base = D.noisy_channel_decode(x, direct, lam, config, channel=channel, lm=lm)
        for factor in (0.25, 3.0):
            scaled = D.noisy_channel_decode(x, direct, lam.scaled(factor), config,
                                            channel=channel, lm=lm)
            assert scaled.tokens == base.tokens
            assert scaled.score == pytest.approx(base.score * factor, rel=1e-9)

    def test_monotone_beam_property(self):
        # Scores of truncated (non-terminal) fallbacks live on a different
        # scale, so the monotonicity claim applies to terminal results.
        direct, channel, lm = make_models(seed=10)
        x = [4, 5]
        lam = D.Lambda(1, 1, 1, 0)
        prev_score = None
        seen_terminal = 0
        for k in (1, 2, 4, 8, 16, 64, 256, 2048):
            result = D.noisy_channel_decode(
                x, direct, lam, D.DecodeConfig(k1=k, k2=k, j_max=3),
                channel=channel, lm=lm)
            if not result.terminal:
                continue
            seen_terminal += 1
            if prev_score is not None:
                assert result.score >= prev_score - 1e-12
            prev_score = result.score
        assert seen_terminal >= 4


class TestComplexity:
    def test_instrumented_counts_match_formula(self):
        direct, channel, lm = make_models(seed=11)
        x = [4, 5, 6]
        input_len = len(x)
        k1, k2, j_max = 6, 3, 5
        stats = D.DecodeStats()
        D.noisy_channel_decode(x, direct, D.Lambda(1, 1, 1, 0),
                               D.DecodeConfig(k1=k1, k2=k2, j_max=j_max),
                               channel=channel, lm=lm, stats=stats)
        # Candidate counts derive from chart occupancy and the proposable
        # token sets; rescoring caps at k1 per cell; every non-terminal
        # rescore costs exactly one channel row of input_len + 1 scores.
        assert stats.channel_width == input_len + 1
        assert stats.channel_evaluations == stats.channel_extends * (input_len + 1)
        assert stats.channel_extends == stats.total_rescored - stats.terminal_rescored
        for (i, j), n in stats.cell_candidates.items():
            assert stats.cell_rescored[(i, j)] == min(k1, n)
        # Upper bound: k1 rescores per cell, each costing input_len + 1
        # channel evaluations.
        bound = (input_len + 1) * input_len * j_max * k1
        assert stats.channel_evaluations <= bound

    def test_candidate_counts_derive_from_occupancy(self):
        direct, channel, lm = make_models(seed=12)
        x = [4, 5]
        input_len = len(x)
        stats = D.DecodeStats()
        result = D.noisy_channel_decode(x, direct, D.Lambda(1, 1, 1, 0),
                                        D.DecodeConfig(k1=5, k2=2, j_max=4),
                                        channel=channel, lm=lm, stats=stats)
        chart = result.chart
        n_tokens = len(proposable_tokens())
        for (i, j), n in stats.cell_candidates.items():
            allowed = n_tokens + 1 if i == input_len - 1 else n_tokens
            if j == 1:
                parents = 1
            else:
                parents = sum(chart.nonterminal_count(k, j - 1) for k in range(i + 1))
            assert n == parents * allowed


class TestModelCompatibility:
    def test_vocab_mismatch_rejected(self):
        direct, _, _ = make_models(seed=13)
        bad_channel = M.SsntModel(
            M.SsntConfig(src_vocab_size=VOCAB + 3, tgt_vocab_size=VOCAB, hidden_size=4),
            RngState(1))
        with pytest.raises(ConfigError, match=str(VOCAB + 3)):
            D.noisy_channel_decode([4], direct, D.Lambda(1, 1, 0, 0),
                                   D.DecodeConfig(k1=2, k2=1), channel=bad_channel)

    def test_missing_channel_model_rejected(self):
        direct, _, _ = make_models(seed=14)
        with pytest.raises(ConfigError):
            D.noisy_channel_decode([4], direct, D.Lambda(1, 1, 0, 0), D.DecodeConfig())

    def test_bidirectional_channel_rejected(self):
        direct, _, lm = make_models(seed=15)
        bi = M.SsntModel(M.SsntConfig(src_vocab_size=VOCAB, tgt_vocab_size=VOCAB,
                                      hidden_size=4, bidirectional=True), RngState(2))
        with pytest.raises(ConfigError):
            D.noisy_channel_decode([4], direct, D.Lambda(1, 1, 0, 0),
                                   D.DecodeConfig(k1=2, k2=1), channel=bi)


class TestGridSearch:
    def test_single_point_grid(self):
        direct, channel, lm = make_models(seed=16)
        lam = D.Lambda(1, 0, 0, 0)
        best, results = D.grid_search_lambda(
            [[4, 5]], [(4,)], direct, [lam], D.DecodeConfig(k1=4, k2=2, j_max=3))
        assert best == lam
        assert len(results) == 1

    def test_deterministic(self):
        direct, channel, lm = make_models(seed=17)
        grid = [D.Lambda(1, 0, 0, 0), D.Lambda(0, 1, 1, 0), D.Lambda(1, 1, 1, 0)]
        dev_x = [[4, 5], [5, 6], [6, 4]]
        dev_ref = [(4,), (5,), (6,)]
        cfg = D.DecodeConfig(k1=6, k2=3, j_max=3)
        first = D.grid_search_lambda(dev_x, dev_ref, direct, grid, cfg,
                                     channel=channel, lm=lm)
        second = D.grid_search_lambda(dev_x, dev_ref, direct, grid, cfg,
                                      channel=channel, lm=lm)
        assert first[0] == second[0]
        assert first[1] == second[1]

    def test_recovers_planted_best_lambda(self):
        # Build a dev set from the direct model's own outputs so the
        # direct-only point is optimal, then check the grid finds it.
        direct, channel, lm = make_models(seed=18)
        cfg = D.DecodeConfig(k1=6, k2=3, j_max=3)
        dev_x = [[4, 5], [5, 6], [6, 6], [4, 4]]
        dev_ref = []
        for x in dev_x:
            out = D.noisy_channel_decode(x, direct, D.Lambda(1, 0, 0, 0), cfg)
            dev_ref.append(tuple(out.tokens))
        grid = [D.Lambda(0, 1, 1, 0), D.Lambda(1, 0, 0, 0), D.Lambda(0, 1, 1, -0.5)]
        best, results = D.grid_search_lambda(dev_x, dev_ref, direct, grid, cfg,
                                             channel=channel, lm=lm)
        assert best == D.Lambda(1, 0, 0, 0)
        assert dict(results)[best] == 1.0

    def test_tie_keeps_earlier_grid_entry(self):
        direct, channel, lm = make_models(seed=19)
        cfg = D.DecodeConfig(k1=4, k2=2, j_max=2)
        lam_a, lam_b = D.Lambda(1, 0, 0, 0), D.Lambda(2, 0, 0, 0)
        best, results = D.grid_search_lambda(
            [[4]], [(9999,)], direct, [lam_a, lam_b], cfg)
        # Both score 0; the earlier entry wins.
        assert best == lam_a


class TestTruncation:
    def test_no_terminal_returns_best_partial_with_flag(self):
        direct, _, _ = make_models(seed=20)
        # Forbid EOS by making it unreachable: j_max=1 with a 2-token input
        # means no hypothesis reaches coverage with EOS in one step unless
        # proposed directly; pick the case where EOS survives nowhere by
        # using k2=1 and checking the flag honestly.
        result = D.noisy_channel_decode([4, 5, 6, 4], direct, D.Lambda(1, 0, 0, 0),
                                        D.DecodeConfig(k1=1, k2=1, j_max=1))
        # With j_max=1 the only EOS cell is (I-1, 1); whether it survives
        # depends on scores. The contract: terminal xor truncated.
        assert result.terminal != result.truncated
