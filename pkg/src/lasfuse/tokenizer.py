"""Byte-pair-encoding wordpieces with guaranteed character coverage.

Words are whitespace tokens.  Each word is spelled as the boundary marker
``▁`` followed by its characters; the marker counts as one more character of
the charset and merges with what follows, so word-initial pieces carry it.
Decoding is ``"".join(pieces).replace("▁", " ").strip()``.
Text round-trips exactly when it is single-space separated without leading
or trailing whitespace; other whitespace is normalized to that form.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

MARKER = "▁"
PAD, BOS, EOS = "<pad>", "<s>", "</s>"
SPECIALS = (PAD, BOS, EOS)
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
VOCAB_FORMAT = "lasfuse-vocab v1"


class CoverageError(ValueError):
    """Text contains characters outside the vocabulary's charset."""

    def __init__(self, chars):
        self.chars = sorted(set(chars))
        super().__init__(f"uncovered characters: {self.chars!r}")


class VocabConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple
    terminated: bool = True

    def __len__(self):
        return len(self.ids)


def _symbols(word: str) -> tuple:
    return (MARKER,) + tuple(word)


def _word_counts(lines: Iterable[str]) -> Counter:
    counts = Counter()
    for line in lines:
        counts.update(line.split())
    return counts


def _merge_word(symbols: tuple, pair: tuple) -> tuple:
    a, b = pair
    out, i, n = [], 0, len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


class Vocabulary:
    """Immutable wordpiece inventory with ordered merge rules."""

    def __init__(self, pieces: Sequence[str], merges: Sequence[tuple]):
        if tuple(pieces[: len(SPECIALS)]) != SPECIALS:
            raise VocabConfigError("vocabulary must start with the special pieces")
        if len(set(pieces)) != len(pieces):
            raise VocabConfigError("duplicate pieces")
        self.pieces = tuple(pieces)
        self.merges = tuple(tuple(m) for m in merges)
        self.index = {p: i for i, p in enumerate(self.pieces)}
        self.ranks = {m: r for r, m in enumerate(self.merges)}
        self.charset = frozenset(p for p in self.pieces[len(SPECIALS):] if len(p) == 1 and p != MARKER)
        self.pad_id, self.bos_id, self.eos_id = (self.index[s] for s in SPECIALS)
        self._cache: dict[str, tuple] = {}

    def __len__(self):
        return len(self.pieces)

    @property
    def size(self) -> int:
        return len(self.pieces)

    def uncovered(self, text: str) -> set:
        return {ch for ch in text if not ch.isspace() and ch not in self.charset} | (
            {MARKER} if MARKER in text else set()
        )

    def _encode_word(self, word: str) -> tuple:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        symbols = _symbols(word)
        while len(symbols) > 1:
            best = None
            for pair in zip(symbols, symbols[1:]):
                r = self.ranks.get(pair)
                if r is not None and (best is None or r < best[0]):
                    best = (r, pair)
            if best is None:
                break
            symbols = _merge_word(symbols, best[1])
        ids = tuple(self.index[s] for s in symbols)
        self._cache[word] = ids
        return ids

    def encode(self, text: str, eos: bool = True) -> TokenSeq:
        bad = self.uncovered(text)
        if bad:
            raise CoverageError(bad)
        ids = []
        for word in text.split():
            ids.extend(self._encode_word(word))
        if eos:
            ids.append(self.eos_id)
        return TokenSeq(tuple(ids), terminated=eos)

    def decode(self, seq) -> str:
        ids = seq.ids if isinstance(seq, TokenSeq) else seq
        out = []
        for i in ids:
            if not 0 <= i < len(self.pieces):
                raise IndexError(f"piece id {i} out of range")
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.pieces[i])
        return "".join(out).replace(MARKER, " ").strip()

    def piece_strings(self, ids) -> list[str]:
        return [self.pieces[i] for i in ids]

    # serialization ------------------------------------------------------

    def save(self, path) -> None:
        lines = [VOCAB_FORMAT, f"pieces {len(self.pieces)}"]
        lines += list(self.pieces)
        lines.append(f"merges {len(self.merges)}")
        lines += [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines[0] != VOCAB_FORMAT:
            raise VocabConfigError(f"{path}: unknown vocabulary format {lines[0]!r}")
        n = int(lines[1].split()[1])
        pieces = lines[2 : 2 + n]
        k = int(lines[2 + n].split()[1])
        merges = [tuple(l.split(" ")) for l in lines[3 + n : 3 + n + k]]
        return cls(pieces, merges)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.pieces == other.pieces and self.merges == other.merges

    def __hash__(self):
        return hash((self.pieces, self.merges))


def learn_bpe(corpus: Iterable[str], target_size: int) -> Vocabulary:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Ties go to the lexicographically smallest pair.  Stops at ``target_size``
    pieces or when no pair occurs at least twice.
    """
    counts = _word_counts(corpus)
    if any(MARKER in w for w in counts):
        raise CoverageError({MARKER})
    words = {w: _symbols(w) for w in counts}
    base = sorted({ch for w in counts for ch in w} | {MARKER})
    pieces = list(SPECIALS) + base
    if target_size < len(pieces):
        raise VocabConfigError(
            f"target_size {target_size} below charset+specials = {len(pieces)}"
        )
    merges = []
    known = set(pieces)
    while len(pieces) < target_size:
        pair_counts = Counter()
        for w, syms in words.items():
            c = counts[w]
            for pair in zip(syms, syms[1:]):
                pair_counts[pair] += c
        if not pair_counts:
            break
        best_n = max(pair_counts.values())
        if best_n < 2:
            break
        best = min(p for p, n in pair_counts.items() if n == best_n)
        merges.append(best)
        new = best[0] + best[1]
        if new not in known:
            pieces.append(new)
            known.add(new)
        words = {w: _merge_word(syms, best) for w, syms in words.items()}
    return Vocabulary(pieces, merges)


def coverage_filter(lines: Iterable[str], vocab: Vocabulary):
    """Split ``lines`` into encodable ones and ``(line, reason)`` rejects."""
    kept, dropped = [], []
    for line in lines:
        bad = vocab.uncovered(line)
        if bad:
            dropped.append((line, f"uncovered characters: {''.join(sorted(bad))}"))
        else:
            kept.append(line)
    return kept, dropped
