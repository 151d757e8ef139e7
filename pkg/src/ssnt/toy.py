"""Bundled synthetic transduction task: copy with a suffix rewrite.

Inputs are strings over a 12-symbol alphabet drawn from a seeded Markov
chain; the output copies the input except that the final token is
rewritten to ``alphabet[(prev + last) % 4]``. Outputs therefore always
end in one of the first four symbols, and the valid ending depends on the
preceding token, which is the regularity a language model trained on
unpaired outputs can learn.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

import numpy as np

ALPHABET = list("abcdefghijkl")
REWRITE_CLASSES = 4
MIN_LEN = 2
MAX_LEN = 8


def rewrite_suffix(tokens: list[str]) -> list[str]:
    prev = ALPHABET.index(tokens[-2]) if len(tokens) >= 2 else 0
    last = ALPHABET.index(tokens[-1])
    return tokens[:-1] + [ALPHABET[(prev + last) % REWRITE_CLASSES]]


def _transition_matrix() -> np.ndarray:
    n = len(ALPHABET)
    mat = np.full((n, n), 0.2 / (n - 2))
    for k in range(n):
        mat[k, (k + 1) % n] = 0.5
        mat[k, (k + 5) % n] = 0.3
    return mat / mat.sum(axis=1, keepdims=True)


def sample_input(gen: np.random.Generator, trans: np.ndarray) -> list[str]:
    n = len(ALPHABET)
    length = int(gen.integers(MIN_LEN, MAX_LEN + 1))
    tok = int(gen.integers(0, n))
    out = [ALPHABET[tok]]
    for _ in range(length - 1):
        tok = int(gen.choice(n, p=trans[tok]))
        out.append(ALPHABET[tok])
    return out


@dataclass
class ToyTask:
    train_src: list[str]
    train_tgt: list[str]
    dev_src: list[str]
    dev_tgt: list[str]
    test_src: list[str]
    test_tgt: list[str]
    unpaired: list[str]


def generate_task(seed: int, n_train: int = 2000, n_dev: int = 100, n_test: int = 200,
                  n_unpaired: int = 10000) -> ToyTask:
    gen = np.random.default_rng(seed)
    trans = _transition_matrix()

    def paired(n):
        src, tgt = [], []
        for _ in range(n):
            toks = sample_input(gen, trans)
            src.append(" ".join(toks))
            tgt.append(" ".join(rewrite_suffix(toks)))
        return src, tgt

    train_src, train_tgt = paired(n_train)
    dev_src, dev_tgt = paired(n_dev)
    test_src, test_tgt = paired(n_test)
    unpaired = [" ".join(rewrite_suffix(sample_input(gen, trans))) for _ in range(n_unpaired)]
    return ToyTask(train_src, train_tgt, dev_src, dev_tgt, test_src, test_tgt, unpaired)


def write_task(task: ToyTask, outdir: str):
    os.makedirs(outdir, exist_ok=True)

    def dump(name, lines):
        with open(os.path.join(outdir, name), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    dump("train.src", task.train_src)
    dump("train.tgt", task.train_tgt)
    dump("dev.src", task.dev_src)
    dump("dev.tgt", task.dev_tgt)
    dump("test.src", task.test_src)
    dump("test.tgt", task.test_tgt)
    dump("unpaired.txt", task.unpaired)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if not argv or len(argv) > 2:
        print("usage: python -m ssnt.toy OUTDIR [SEED]", file=sys.stderr)
        return 1
    seed = int(argv[1]) if len(argv) == 2 else 1
    write_task(generate_task(seed), argv[0])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
