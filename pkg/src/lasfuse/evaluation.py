"""Word error rate, oracle WER over N-best lists and second-pass rescoring."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .tokenizer import CoverageError, Vocabulary


@dataclass
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / self.ref_words if self.ref_words else 0.0

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(self.substitutions + other.substitutions, self.insertions + other.insertions,
                            self.deletions + other.deletions, self.ref_words + other.ref_words)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rate"] = self.rate
        return d


def _words(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def align(ref, hyp) -> list[tuple]:
    """Minimal-cost alignment as ``(op, ref_word, hyp_word)`` with op in C/S/I/D.

    On equal cost the backtrace prefers match/substitution, then insertion,
    then deletion.
    """
    r, h = _words(ref), _words(hyp)
    n, m = len(r), len(h)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = min(D[i - 1, j - 1] + (r[i - 1] != h[j - 1]), D[i, j - 1] + 1, D[i - 1, j] + 1)
    ops, i, j = [], n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            ops.append(("C" if r[i - 1] == h[j - 1] else "S", r[i - 1], h[j - 1]))
            i, j = i - 1, j - 1
        elif j > 0 and D[i, j] == D[i, j - 1] + 1:
            ops.append(("I", None, h[j - 1]))
            j -= 1
        else:
            ops.append(("D", r[i - 1], None))
            i -= 1
    return ops[::-1]


def wer(ref, hyp) -> WerBreakdown:
    """Levenshtein word alignment with unit costs; ``ref`` must be non-empty."""
    r = _words(ref)
    if not r:
        raise ValueError("reference must contain at least one word")
    ops = align(r, hyp)
    return WerBreakdown(sum(o == "S" for o, *_ in ops), sum(o == "I" for o, *_ in ops),
                        sum(o == "D" for o, *_ in ops), len(r))


def corpus_wer(pairs: Sequence[tuple]) -> WerBreakdown:
    total = WerBreakdown(0, 0, 0, 0)
    for ref, hyp in pairs:
        total = total + wer(ref, hyp)
    return total


def _hyps(nbest) -> list:
    return nbest["hyps"] if isinstance(nbest, Mapping) else nbest


def _text(h) -> str:
    return h["text"] if isinstance(h, Mapping) else h


def oracle_wer(refs: Mapping[str, str], nbests: Sequence[Mapping]) -> WerBreakdown:
    """Corpus WER when each utterance picks its lowest-error hypothesis."""
    by_id = {nb["id"]: nb for nb in nbests}
    total = WerBreakdown(0, 0, 0, 0)
    for uid, ref in refs.items():
        if uid not in by_id:
            raise KeyError(f"no N-best list for utterance {uid!r}")
        hyps = _hyps(by_id[uid])
        if not hyps:
            raise ValueError(f"empty N-best list for utterance {uid!r}")
        total = total + min((wer(ref, _text(h)) for h in hyps), key=lambda b: b.errors)
    return total


def top1_wer(refs: Mapping[str, str], nbests: Sequence[Mapping]) -> WerBreakdown:
    by_id = {nb["id"]: nb for nb in nbests}
    missing = [u for u in refs if u not in by_id]
    if missing:
        raise KeyError(f"no N-best list for utterances {missing[:5]}")
    return corpus_wer([(ref, _text(_hyps(by_id[uid])[0])) for uid, ref in refs.items()])


def lm_text_scorer(lm, vocab: Vocabulary) -> Callable[[str], float]:
    """Text -> second-LM log-probability (EOS included)."""
    from .lm import lm_logprob

    cache: dict[str, float] = {}

    def score(text: str) -> float:
        if text not in cache:
            bad = vocab.uncovered(text)
            if bad:
                raise CoverageError(bad)
            cache[text] = lm_logprob(lm, vocab.encode(text))
        return cache[text]

    return score


def rescore_nbest(nbest: Mapping, scorer: Callable[[str], float], weight: float) -> dict:
    """Re-rank by ``first-pass total + weight * second_lm(text)`` (stable sort).

    Adds ``second_lm_logp`` and ``rescored_total`` to every hypothesis.
    """
    hyps = []
    for h in nbest["hyps"]:
        h2 = dict(h)
        if "second_lm_logp" not in h2:
            h2["second_lm_logp"] = float(scorer(h["text"]))
        h2["rescored_total"] = h["total"] + weight * h2["second_lm_logp"]
        hyps.append(h2)
    hyps.sort(key=lambda h: -h["rescored_total"])
    out = dict(nbest)
    out["hyps"] = hyps
    return out


def crossover_weight(total_a: float, lm_a: float, total_b: float, lm_b: float) -> float:
    """Second-pass weight above which ``b`` overtakes ``a`` (needs ``lm_b > lm_a``)."""
    return (total_a - total_b) / (lm_b - lm_a)


def tune_rescoring_weight(refs: Mapping[str, str], nbests: Sequence[Mapping], scorer, grid) -> tuple[float, float]:
    """Pick the grid weight with the lowest rescored top-1 WER (first of ties)."""
    scored = [rescore_nbest(nb, scorer, 0.0) for nb in nbests]
    best = None
    for w in grid:
        rate = top1_wer(refs, [rescore_nbest(nb, scorer, w) for nb in scored]).rate
        if best is None or rate < best[1]:
            best = (w, rate)
    return best


def aligned_table(ref: str, hyp: str) -> str:
    """Two-row text alignment with ``***`` for gaps and error tags below."""
    ops = align(ref, hyp)
    cols = []
    for op, r, h in ops:
        r = r if r is not None else "***"
        h = h if h is not None else "***"
        w = max(len(r), len(h), 1)
        cols.append((r.ljust(w), h.ljust(w), ("" if op == "C" else op).ljust(w)))
    return "\n".join(
        [
            "REF: " + " ".join(c[0] for c in cols),
            "HYP: " + " ".join(c[1] for c in cols),
            "     " + " ".join(c[2] for c in cols),
        ]
    )
