"""Output-quality metrics: exact match and ROUGE-1/2/L F1.

Corpus-level ROUGE is the mean of per-example F1 values. No stemming or
stopword filtering is applied anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DataError


@dataclass
class ScoreReport:
    metric: str
    value: float
    per_example: list[float]
    matched: int        # examples scoring exactly 1.0
    total: int

    def as_tsv(self) -> str:
        return f"{self.metric}\t{self.value}\t{self.matched}\t{self.total}"


def _normalize(text: str) -> str:
    return " ".join(text.split())


def exact_match(predictions: list[str], references: list[str]) -> ScoreReport:
    """Fraction of predictions string-identical to their references after
    whitespace normalization."""
    if len(predictions) != len(references):
        raise DataError(
            f"prediction/reference counts differ: {len(predictions)} vs {len(references)}")
    per = [1.0 if _normalize(p) == _normalize(r) else 0.0
           for p, r in zip(predictions, references)]
    matched = int(sum(per))
    total = len(per)
    value = matched / total if total else 0.0
    return ScoreReport("exact", value, per, matched, total)


def _ngrams(tokens, n: int):
    return [tuple(tokens[k : k + n]) for k in range(len(tokens) - n + 1)]


def _f1(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0.0 else 2 * precision * recall / (precision + recall)


def rouge_n_f1(prediction_tokens, reference_tokens, n: int) -> float:
    """Clipped n-gram overlap F1; empty overlap (or 0/0) scores 0."""
    if n not in (1, 2):
        raise ConfigError(f"rouge-n supports n in {{1, 2}}, got {n}")
    pred = _ngrams(list(prediction_tokens), n)
    ref = _ngrams(list(reference_tokens), n)
    if not pred or not ref:
        return 0.0
    ref_counts: dict[tuple, int] = {}
    for g in ref:
        ref_counts[g] = ref_counts.get(g, 0) + 1
    overlap = 0
    for g in pred:
        if ref_counts.get(g, 0) > 0:
            ref_counts[g] -= 1
            overlap += 1
    return _f1(overlap / len(pred), overlap / len(ref))


def _lcs_length(a, b) -> int:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_l_f1(prediction_tokens, reference_tokens) -> float:
    """Longest-common-subsequence F1 over token sequences."""
    pred = list(prediction_tokens)
    ref = list(reference_tokens)
    if not pred or not ref:
        return 0.0
    lcs = _lcs_length(pred, ref)
    return _f1(lcs / len(pred), lcs / len(ref))


def corpus_rouge(predictions: list[str], references: list[str], kind: str) -> ScoreReport:
    """Mean per-example ROUGE F1 over whitespace-tokenized text lines."""
    if len(predictions) != len(references):
        raise DataError(
            f"prediction/reference counts differ: {len(predictions)} vs {len(references)}")
    per = []
    for p, r in zip(predictions, references):
        pt, rt = p.split(), r.split()
        if kind == "rouge1":
            per.append(rouge_n_f1(pt, rt, 1))
        elif kind == "rouge2":
            per.append(rouge_n_f1(pt, rt, 2))
        elif kind == "rougeL":
            per.append(rouge_l_f1(pt, rt))
        else:
            raise ConfigError(f"unknown rouge kind {kind!r}")
    total = len(per)
    value = sum(per) / total if total else 0.0
    matched = sum(1 for v in per if v == 1.0)
    return ScoreReport(kind, value, per, matched, total)


def score_lines(kind: str, predictions: list[str], references: list[str]) -> ScoreReport:
    if kind == "exact":
        return exact_match(predictions, references)
    return corpus_rouge(predictions, references, kind)
