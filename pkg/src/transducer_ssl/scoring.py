"""Word error rate with an explicit S/D/I alignment, and corpus evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import torch

from .frontend import Utterance, Vocabulary


class WerResult(NamedTuple):
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int
    rate: float

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_counts(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(S, D, I) of a minimal unit-cost alignment.

    Backtrace ties prefer substitution (or match), then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        r = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
    S = D = I = 0
    i, j = n, m
    while i or j:
        if i and j and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i][j] == d[i - 1][j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return S, D, I


def wer(ref: Sequence, hyp: Sequence) -> WerResult:
    S, D, I = edit_counts(ref, hyp)
    return WerResult(S, D, I, len(ref), (S + D + I) / max(len(ref), 1))


@dataclass
class SetScore:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    def add(self, r: WerResult) -> None:
        self.substitutions += r.substitutions
        self.deletions += r.deletions
        self.insertions += r.insertions
        self.ref_words += r.ref_words

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / max(self.ref_words, 1)


@dataclass
class EvalReport:
    sets: dict[str, SetScore] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        """Reference-word-weighted mean of the per-set rates."""
        words = sum(s.ref_words for s in self.sets.values())
        return sum(s.errors for s in self.sets.values()) / max(words, 1)

    def to_dict(self) -> dict:
        return {
            "sets": {
                name: {
                    "substitutions": s.substitutions,
                    "deletions": s.deletions,
                    "insertions": s.insertions,
                    "ref_words": s.ref_words,
                    "wer": s.wer,
                }
                for name, s in self.sets.items()
            },
            "overall_wer": self.overall,
        }


def decode_corpus(model, utterances: Sequence[Utterance], chunk_size=None, left_chunks: int = 0, max_symbols_per_frame: int = 10) -> list[list[int]]:
    model.eval()
    dtype = next(model.parameters()).dtype
    return [
        model.decode(torch.from_numpy(u.features).to(dtype), chunk_size, left_chunks, max_symbols_per_frame)
        for u in utterances
    ]


def evaluate(
    model,
    test_sets: Mapping[str, Sequence[Utterance]],
    vocab: Vocabulary,
    chunk_size=None,
    left_chunks: int = 0,
    max_symbols_per_frame: int = 10,
) -> EvalReport:
    """Greedy-decode every utterance and score words of the detokenized text."""
    report = EvalReport()
    for name, utts in test_sets.items():
        missing = [u.id for u in utts if u.transcript is None]
        if missing:
            raise ValueError(f"test set {name!r}: utterances without transcript: {missing[:5]}")
        score = SetScore()
        hyps = decode_corpus(model, utts, chunk_size, left_chunks, max_symbols_per_frame)
        for u, hyp in zip(utts, hyps):
            score.add(wer(vocab.decode(u.transcript).split(), vocab.decode(hyp).split()))
        report.sets[name] = score
    return report
