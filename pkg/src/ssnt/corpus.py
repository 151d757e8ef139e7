"""Corpus ingestion: preprocessing, vocabularies, encoding, and batching.

File conventions: plain UTF-8 text with one whitespace-tokenized sequence
per line; parallel data lives in two line-aligned files. Vocabulary files
hold one token per line, the id being the line number, with the four
reserved tokens on lines 0-3.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

PAD_ID = 0
START_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")

INPUT_ROLE = "input"
OUTPUT_ROLE = "output"


@dataclass(frozen=True)
class PreprocessRules:
    lowercase: bool = False
    digit_to_hash: bool = False
    min_count: int = 1
    max_src_len: int | None = None
    max_tgt_len: int | None = None

    def __post_init__(self):
        if self.min_count < 1:
            raise ConfigError(f"min_count must be >= 1, got {self.min_count}")


def preprocess(line: str, rules: PreprocessRules) -> list[str]:
    """Whitespace-split surface tokens, transformed per the rules.

    Digit replacement maps every character in [0-9] to '#'.
    """
    if rules.lowercase:
        line = line.lower()
    if rules.digit_to_hash:
        line = "".join("#" if c.isdigit() and c in "0123456789" else c for c in line)
    return line.split()


class Vocabulary:
    """Token/id bijection with fixed reserved ids 0..3.

    Ids above the reserved range are assigned by descending frequency,
    ties broken lexicographically, so the same corpus always produces a
    byte-identical vocabulary file.
    """

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise DataError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def token_id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise DataError(f"token id {token_id} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[token_id]

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = fh.read().splitlines()
        return cls(tokens)


def build_vocab(token_streams, min_count: int = 1) -> Vocabulary:
    """Count tokens across streams and keep those seen >= min_count times."""
    counts: dict[str, int] = {}
    for stream in token_streams:
        for tok in stream:
            counts[tok] = counts.get(tok, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED_TOKENS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED_TOKENS) + kept)


@dataclass(frozen=True)
class TokenSequence:
    """Integer-encoded sequence; output-role sequences end with EOS."""

    ids: tuple[int, ...]
    role: str

    def __post_init__(self):
        if self.role not in (INPUT_ROLE, OUTPUT_ROLE):
            raise ConfigError(f"unknown sequence role {self.role!r}")
        if self.role == OUTPUT_ROLE and (not self.ids or self.ids[-1] != EOS_ID):
            raise DataError("output-role sequences must end with EOS")
        if PAD_ID in self.ids:
            raise DataError("PAD must not appear inside a sequence")

    def content_ids(self) -> tuple[int, ...]:
        return self.ids[:-1] if self.role == OUTPUT_ROLE else self.ids

    def __len__(self):
        return len(self.ids)


def encode(tokens, vocab: Vocabulary, role: str) -> TokenSequence:
    """Map surface tokens to ids, appending EOS for output-role sequences."""
    ids = [vocab.token_id(t) for t in tokens]
    if role == OUTPUT_ROLE:
        ids.append(EOS_ID)
    return TokenSequence(tuple(ids), role)


def decode_ids(seq, vocab: Vocabulary) -> list[str]:
    """Map ids back to tokens, stripping the reserved symbols."""
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    out = []
    for i in ids:
        tok = vocab.token(int(i))
        if int(i) >= 4:
            out.append(tok)
    return out


@dataclass(frozen=True)
class ParallelPair:
    source: TokenSequence
    target: TokenSequence

    def __post_init__(self):
        if len(self.source.content_ids()) == 0 or len(self.target.content_ids()) == 0:
            raise DataError("parallel pairs must be non-empty on both sides")

    def swapped(self) -> "ParallelPair":
        """The channel-role view: input becomes output and vice versa."""
        src = TokenSequence(self.target.content_ids(), INPUT_ROLE)
        tgt = TokenSequence(self.source.content_ids() + (EOS_ID,), OUTPUT_ROLE)
        return ParallelPair(src, tgt)


def read_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def read_token_lines(path: str, rules: PreprocessRules) -> list[list[str]]:
    return [preprocess(line, rules) for line in read_lines(path)]


@dataclass
class LoadedCorpus:
    pairs: list[ParallelPair]
    dropped: int = 0


def load_parallel(src_path: str, tgt_path: str, rules: PreprocessRules,
                  src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> LoadedCorpus:
    """Pair up line-aligned files; over-length or empty pairs are dropped."""
    src_lines = read_lines(src_path)
    tgt_lines = read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"parallel files differ in length: {src_path} has {len(src_lines)} lines, "
            f"{tgt_path} has {len(tgt_lines)}"
        )
    pairs = []
    dropped = 0
    for s_line, t_line in zip(src_lines, tgt_lines):
        s_toks = preprocess(s_line, rules)
        t_toks = preprocess(t_line, rules)
        # Length limits count content tokens only; EOS is excluded.
        too_long = (rules.max_src_len is not None and len(s_toks) > rules.max_src_len) or (
            rules.max_tgt_len is not None and len(t_toks) > rules.max_tgt_len)
        if too_long or not s_toks or not t_toks:
            dropped += 1
            continue
        pairs.append(ParallelPair(
            encode(s_toks, src_vocab, INPUT_ROLE),
            encode(t_toks, tgt_vocab, OUTPUT_ROLE),
        ))
    if dropped:
        log.warning("dropped %d of %d pairs (length limits or empty lines)", dropped, len(src_lines))
    return LoadedCorpus(pairs, dropped)


def load_text(path: str, rules: PreprocessRules, vocab: Vocabulary,
              role: str = OUTPUT_ROLE) -> list[TokenSequence]:
    """Unpaired corpus: one sequence per non-empty line."""
    seqs = []
    for toks in read_token_lines(path, rules):
        if toks:
            seqs.append(encode(toks, vocab, role))
    return seqs


@dataclass
class Batch:
    """Examples padded to the batch max length; true lengths exclude padding."""

    items: list
    source: np.ndarray
    source_lengths: np.ndarray
    target: np.ndarray | None = None
    target_lengths: np.ndarray | None = None

    def __len__(self):
        return len(self.items)


def _pad(seqs: list[tuple[int, ...]]):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if len(seqs) else 0
    mat = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for k, s in enumerate(seqs):
        mat[k, : len(s)] = s
    return mat, lengths


def _make_batch(chunk) -> Batch:
    if isinstance(chunk[0], ParallelPair):
        src, src_len = _pad([p.source.ids for p in chunk])
        tgt, tgt_len = _pad([p.target.ids for p in chunk])
        return Batch(list(chunk), src, src_len, tgt, tgt_len)
    mat, lengths = _pad([s.ids for s in chunk])
    return Batch(list(chunk), mat, lengths)


def batches(data, size: int, rng=None, shuffle: bool = False):
    """Yield batches covering every example exactly once per epoch.

    The final partial batch is emitted. Shuffle order comes from the
    supplied rng, so a fixed seed fixes the epoch order.
    """
    if size < 1:
        raise ConfigError(f"batch size must be >= 1, got {size}")
    order = np.arange(len(data))
    if shuffle:
        if rng is None:
            raise ConfigError("shuffling requires an rng")
        order = rng.permutation(len(data))
    for start in range(0, len(data), size):
        chunk = [data[i] for i in order[start : start + size]]
        yield _make_batch(chunk)
