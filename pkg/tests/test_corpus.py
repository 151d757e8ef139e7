"""Corpus module tests: preprocessing, vocab, encoding, loading, batching."""

import collections

import numpy as np
import pytest

from ssnt import corpus as C
from ssnt.errors import ConfigError, DataError
from ssnt.tensor import RngState


class TestPreprocess:
    def test_lowercase_and_digits(self):
        rules = C.PreprocessRules(lowercase=True, digit_to_hash=True)
        assert C.preprocess("The Year 2003", rules) == ["the", "year", "####"]

    def test_empty_line(self):
        assert C.preprocess("", C.PreprocessRules()) == []

    def test_repeated_whitespace_collapses(self):
        assert C.preprocess("a b  c", C.PreprocessRules()) == ["a", "b", "c"]

    def test_rules_off_by_default(self):
        assert C.preprocess("The 12", C.PreprocessRules()) == ["The", "12"]


class TestBuildVocab:
    def test_min_count_threshold(self):
        streams = [["a"] * 10 + ["b"] * 3]
        vocab = C.build_vocab(streams, min_count=5)
        assert "a" in vocab.tokens and "b" not in vocab.tokens
        assert vocab.token_id("b") == C.UNK_ID

    def test_min_count_one_keeps_everything(self):
        vocab = C.build_vocab([["x", "y", "x"]], min_count=1)
        assert set(vocab.tokens[4:]) == {"x", "y"}

    def test_frequency_then_lexicographic_order(self):
        vocab = C.build_vocab([["b", "a", "b", "a", "c"]], min_count=1)
        # a and b tie on count 2, so a precedes b; c (count 1) is last.
        assert vocab.tokens[4:] == ["a", "b", "c"]

    def test_reserved_ids_fixed(self):
        vocab = C.build_vocab([["z"]])
        assert vocab.tokens[:4] == list(C.RESERVED_TOKENS)
        assert (C.PAD_ID, C.START_ID, C.EOS_ID, C.UNK_ID) == (0, 1, 2, 3)

    def test_vocab_file_byte_identical(self, tmp_path):
        streams = [["c", "a", "b", "a"]]
        p1, p2 = tmp_path / "v1.vocab", tmp_path / "v2.vocab"
        C.build_vocab(streams).save(p1)
        C.build_vocab(streams).save(p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert C.Vocabulary.load(p1) == C.Vocabulary.load(p2)


class TestEncodeDecode:
    @pytest.fixture
    def vocab(self):
        return C.build_vocab([["a", "b", "c"]])

    def test_round_trip_in_vocabulary(self, vocab):
        toks = ["a", "c", "b"]
        seq = C.encode(toks, vocab, C.INPUT_ROLE)
        assert C.decode_ids(seq, vocab) == toks

    def test_out_of_vocab_becomes_unk(self, vocab):
        seq = C.encode(["a", "zzz"], vocab, C.INPUT_ROLE)
        assert seq.ids[1] == C.UNK_ID

    def test_output_role_appends_eos(self, vocab):
        seq = C.encode(["a", "b"], vocab, C.OUTPUT_ROLE)
        assert seq.ids == (vocab.token_id("a"), vocab.token_id("b"), C.EOS_ID)

    def test_decode_strips_reserved(self, vocab):
        seq = C.encode(["a", "b"], vocab, C.OUTPUT_ROLE)
        assert C.decode_ids(seq, vocab) == ["a", "b"]

    def test_unknown_id_is_data_error(self, vocab):
        with pytest.raises(DataError):
            C.decode_ids([len(vocab) + 5], vocab)

    def test_swapped_pair_orientation(self, vocab):
        pair = C.ParallelPair(
            C.encode(["a", "b"], vocab, C.INPUT_ROLE),
            C.encode(["c"], vocab, C.OUTPUT_ROLE),
        )
        sw = pair.swapped()
        assert sw.source.ids == (vocab.token_id("c"),)
        assert sw.target.ids == (vocab.token_id("a"), vocab.token_id("b"), C.EOS_ID)


class TestLoadParallel:
    @pytest.fixture
    def vocabs(self):
        v = C.build_vocab([["a", "b", "c", "d"]])
        return v, v

    def test_three_line_files(self, tmp_path, vocabs):
        src, tgt = tmp_path / "x.src", tmp_path / "x.tgt"
        src.write_text("a\nb\nc\n")
        tgt.write_text("b\nc\nd\n")
        loaded = C.load_parallel(src, tgt, C.PreprocessRules(), *vocabs)
        assert len(loaded.pairs) == 3 and loaded.dropped == 0
        assert loaded.pairs[0].source.ids == (vocabs[0].token_id("a"),)

    def test_over_length_pair_dropped_and_counted(self, tmp_path, vocabs):
        src, tgt = tmp_path / "x.src", tmp_path / "x.tgt"
        src.write_text("a b c d\na\n")
        tgt.write_text("a\nb\n")
        rules = C.PreprocessRules(max_src_len=3)
        loaded = C.load_parallel(src, tgt, rules, *vocabs)
        assert len(loaded.pairs) == 1
        assert loaded.dropped == 1

    def test_unequal_line_counts(self, tmp_path, vocabs):
        src, tgt = tmp_path / "x.src", tmp_path / "x.tgt"
        src.write_text("a\nb\nc\n")
        tgt.write_text("a\nb\nc\nd\n")
        with pytest.raises(DataError, match="3.*4"):
            C.load_parallel(src, tgt, C.PreprocessRules(), *vocabs)


class TestBatches:
    def _data(self, n):
        vocab = C.build_vocab([["a", "b"]])
        return [
            C.ParallelPair(
                C.encode(["a"] * (1 + k % 3), vocab, C.INPUT_ROLE),
                C.encode(["b"], vocab, C.OUTPUT_ROLE),
            )
            for k in range(n)
        ]

    def test_batch_sizes_with_final_partial(self):
        sizes = [len(b) for b in C.batches(self._data(10), 4)]
        assert sizes == [4, 4, 2]

    def test_same_seed_same_order(self):
        data = self._data(17)
        first = [id(item) for b in C.batches(data, 5, RngState(3), shuffle=True) for item in b.items]
        second = [id(item) for b in C.batches(data, 5, RngState(3), shuffle=True) for item in b.items]
        assert first == second

    def test_epoch_covers_dataset_exactly_once(self):
        data = self._data(23)
        seen = collections.Counter()
        for b in C.batches(data, 7, RngState(5), shuffle=True):
            for item in b.items:
                seen[id(item)] += 1
        assert seen == collections.Counter({id(d): 1 for d in data})

    def test_padding_and_lengths(self):
        data = self._data(3)
        batch = next(C.batches(data, 3))
        assert batch.source.shape == (3, 3)
        assert list(batch.source_lengths) == [1, 2, 3]
        # PAD fills only beyond the true length.
        assert batch.source[0, 1] == C.PAD_ID
        assert (batch.source[2] != C.PAD_ID).all()

    def test_bad_size_rejected(self):
        with pytest.raises(ConfigError):
            list(C.batches(self._data(3), 0))
