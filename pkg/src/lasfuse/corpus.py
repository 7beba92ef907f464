"""Synthetic paired speech/text data, unpaired text, dedup cap and bucketing."""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tokenizer import TokenSeq, Vocabulary

FRAMES_MAGIC = b"LFRM"
FRAMES_VERSION = 1

# Four topics share one lexicon; a sentence's topic favours its own nouns,
# objects and places (weight 8 against 1), so early words predict late ones.
# Number agreement and verb/object selection add local structure.  Upper-case
# symbols are nonterminals, everything else a word.
TOPICS = {
    "home": {"NS": ["cat", "dog", "child"], "THING": ["ball", "book"], "FOOD": ["water", "food"],
             "PLACE": ["house", "garden"]},
    "farm": {"NS": ["farmer", "dog", "bird"], "THING": ["apple", "ball"], "FOOD": ["bread", "food"],
             "PLACE": ["farm", "river"]},
    "school": {"NS": ["teacher", "child", "bird"], "THING": ["book", "apple"], "FOOD": ["bread", "water"],
               "PLACE": ["school", "park"]},
    "park": {"NS": ["dog", "cat", "bird"], "THING": ["ball", "apple"], "FOOD": ["water", "bread"],
             "PLACE": ["park", "tree"]},
}
PLURALS = {"cat": "cats", "dog": "dogs", "bird": "birds", "child": "children", "teacher": "teachers",
           "farmer": "farmers"}
WORD_CLASSES = {
    "NS": sorted(PLURALS),
    "THING": ["ball", "book", "apple"],
    "FOOD": ["bread", "water", "food", "apple"],
    "PLACE": ["house", "garden", "park", "river", "farm", "school", "tree"],
}


def topic_grammar(on_topic: float = 8.0, off_topic: float = 1.0) -> dict:
    g = {
        "S": [(1, [f"S_{t}"]) for t in TOPICS] + [(1, ["INTJ"])],
        "VS": [(3, ["sees", "DOBJ"]), (3, ["likes", "DOBJ"]), (2, ["finds", "DOBJ"])],
        "VP": [(3, ["see", "DOBJ"]), (3, ["like", "DOBJ"]), (2, ["find", "DOBJ"])],
        "DOBJ": [(2, ["the"]), (1, ["a"]), (1, ["my"])],
        "ADJ": [(3, ["small"]), (3, ["big"]), (2, ["red"]), (2, ["old"]), (1, ["happy"])],
        "TIME": [(3, ["today"]), (2, ["now"]), (2, ["again"])],
        "INTJ": [(6, ["yeah"]), (3, ["okay"]), (2, ["well"])],
        "PREP": [(3, ["in"]), (2, ["near"]), (1, ["under"]), (1, ["on"])],
    }
    for t, lex in TOPICS.items():
        g[f"S_{t}"] = [
            (5, [f"NPS_{t}", "VS", f"OBJ_{t}"]),
            (5, [f"NPP_{t}", "VP", f"OBJ_{t}"]),
            (3, [f"NPS_{t}", "VSF", f"FOOD_{t}", f"PP_{t}"]),
            (3, [f"NPP_{t}", "VPF", f"FOOD_{t}", f"PP_{t}"]),
            (2, [f"NPS_{t}", "is", "ADJ", f"PP_{t}"]),
            (2, [f"NPP_{t}", "are", "ADJ", f"PP_{t}"]),
            (2, ["INTJ", f"NPS_{t}", "VS", f"OBJ_{t}", "TIME"]),
        ]
        g[f"NPS_{t}"] = [(3, ["the", f"NS_{t}"]), (2, ["a", f"NS_{t}"]), (2, ["my", f"NS_{t}"]),
                         (2, ["the", "ADJ", f"NS_{t}"])]
        g[f"NPP_{t}"] = [(4, ["the", f"NP_{t}"]), (2, ["my", f"NP_{t}"]), (2, ["your", f"NP_{t}"]),
                         (2, ["ADJ", f"NP_{t}"])]
        g[f"OBJ_{t}"] = [(3, [f"THING_{t}"]), (2, [f"FOOD_{t}"])]
        g[f"PP_{t}"] = [(1, ["PREP", "the", f"PLACE_{t}"])]
        for cls, words in WORD_CLASSES.items():
            g[f"{cls}_{t}"] = [(on_topic if w in lex[cls] else off_topic, [w]) for w in words]
        g[f"NP_{t}"] = [(on_topic if w in lex["NS"] else off_topic, [PLURALS[w]]) for w in WORD_CLASSES["NS"]]
    g["VSF"] = [(3, ["feeds"]), (2, ["wants"])]
    g["VPF"] = [(3, ["feed"]), (2, ["want"])]
    return g


DEFAULT_GRAMMAR = topic_grammar()


class Grammar:
    """Weighted production rules sampled top-down from ``S``."""

    def __init__(self, rules: dict | None = None, start: str = "S"):
        self.rules = rules or DEFAULT_GRAMMAR
        self.start = start
        for lhs, options in self.rules.items():
            for w, _ in options:
                if w <= 0:
                    raise ValueError(f"non-positive weight in rule {lhs}")
        self._probs = {
            lhs: np.array([w for w, _ in opts], dtype=float) / sum(w for w, _ in opts)
            for lhs, opts in self.rules.items()
        }

    def words(self) -> list[str]:
        out = set()
        for opts in self.rules.values():
            for _, rhs in opts:
                out.update(s for s in rhs if s not in self.rules)
        return sorted(out)

    def sample(self, rng: np.random.Generator) -> str:
        out, stack = [], [self.start]
        while stack:
            sym = stack.pop()
            if sym not in self.rules:
                out.append(sym)
                continue
            k = rng.choice(len(self.rules[sym]), p=self._probs[sym])
            stack.extend(reversed(self.rules[sym][k][1]))
        return " ".join(out)

    def sample_lines(self, n: int, rng: np.random.Generator) -> list[str]:
        return [self.sample(rng) for _ in range(n)]


@dataclass
class SynthConfig:
    frames_per_token: int = 4
    feat_dim: int = 16
    noise: float = 1.5
    seed: int = 0
    grammar: Grammar = field(default_factory=Grammar)
    # pieces are split into groups of this size whose prototypes sit close
    # together (offset scale ``group_spread``); 1 gives independent prototypes
    group_size: int = 3
    group_spread: float = 0.25

    def __post_init__(self):
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.group_size < 1 or self.group_spread < 0:
            raise ValueError("group_size must be >= 1 and group_spread >= 0")


@dataclass
class Utterance:
    id: str
    text: str
    tokens: TokenSeq
    frames: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return 0 if self.frames is None else self.frames.shape[0]


def make_prototypes(vocab_size: int, cfg: SynthConfig) -> np.ndarray:
    """One Gaussian prototype frame per piece id, fixed by ``cfg.seed``.

    With ``group_size > 1`` pieces are randomly grouped; each prototype is its
    group's Gaussian centre plus ``group_spread`` times its own Gaussian
    offset, which makes pieces inside a group acoustically confusable.
    """
    rng = np.random.default_rng([cfg.seed, 7919])
    if cfg.group_size == 1:
        return rng.standard_normal((vocab_size, cfg.feat_dim)).astype(np.float32)
    n_groups = -(-vocab_size // cfg.group_size)
    centres = rng.standard_normal((n_groups, cfg.feat_dim))
    group = rng.permutation(vocab_size) % n_groups
    offsets = rng.standard_normal((vocab_size, cfg.feat_dim))
    return (centres[group] + cfg.group_spread * offsets).astype(np.float32)


def synth_utterance(text: str, vocab: Vocabulary, prototypes: np.ndarray, cfg: SynthConfig,
                    rng: np.random.Generator, uid: str = "") -> Utterance:
    """Expand each reference piece into ``k`` noisy copies of its prototype."""
    tokens = vocab.encode(text)
    pieces = np.array(tokens.ids[:-1], dtype=np.int64)
    if pieces.size == 0:
        raise ValueError("cannot synthesize frames for an empty transcript")
    k = cfg.frames_per_token
    clean = np.repeat(prototypes[pieces], k, axis=0)
    noise = rng.standard_normal(clean.shape) * cfg.noise
    frames = (clean + noise).astype(np.float32)
    return Utterance(uid, text, tokens, frames)


def text_utterance(text: str, vocab: Vocabulary, uid: str = "") -> Utterance:
    return Utterance(uid, text, vocab.encode(text), None)


def dedup_cap(utterances: Sequence, threshold: int) -> list:
    """Keep at most ``threshold`` copies of each exact transcript, earliest first."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    seen = Counter()
    out = []
    for u in utterances:
        text = u if isinstance(u, str) else u.text
        seen[text] += 1
        if seen[text] <= threshold:
            out.append(u)
    return out


# ---------------------------------------------------------------------------
# bucketing


@dataclass
class BucketPlan:
    boundaries: list          # inclusive upper frame-length bound per bucket
    batch_sizes: list
    members: list             # utterance indices per bucket

    def bucket_of(self, length: int) -> int:
        for b, ub in enumerate(self.boundaries):
            if length <= ub:
                return b
        return len(self.boundaries) - 1


def _lengths(utterances) -> np.ndarray:
    return np.array([u.num_frames if u.frames is not None else len(u.tokens) for u in utterances])


def default_batch_sizes(n_buckets: int, largest: int = 128, smallest: int = 32) -> list[int]:
    """Geometric interpolation from ``largest`` (shortest bucket) to ``smallest``."""
    if n_buckets == 1:
        return [largest]
    ratio = (smallest / largest) ** (1.0 / (n_buckets - 1))
    return [max(1, int(round(largest * ratio**b))) for b in range(n_buckets)]


def plan_buckets(utterances: Sequence[Utterance], n_buckets: int,
                 batch_sizes: Sequence[int] | None = None,
                 largest: int = 128, smallest: int = 32) -> BucketPlan:
    """Length-quantile buckets; the batch size shrinks as lengths grow."""
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    if len(utterances) == 0:
        raise ValueError("cannot bucket an empty corpus")
    lengths = _lengths(utterances)
    qs = np.quantile(lengths, np.arange(1, n_buckets + 1) / n_buckets, method="higher")
    bounds = sorted({int(q) for q in qs})
    bounds[-1] = int(lengths.max())
    if batch_sizes is None:
        sizes = default_batch_sizes(n_buckets, largest, smallest)
    else:
        sizes = list(batch_sizes)
        if len(sizes) != n_buckets:
            raise ValueError(f"need {n_buckets} batch sizes, got {len(sizes)}")
    # collapsed quantiles keep the batch sizes of the buckets they stand for
    sizes = [sizes[min(i * n_buckets // len(bounds), n_buckets - 1)] for i in range(len(bounds))]
    members = [[] for _ in bounds]
    for i, n in enumerate(lengths):
        members[int(np.searchsorted(bounds, n))].append(i)
    return BucketPlan(bounds, sizes, members)


def iterate_epoch(plan: BucketPlan, order: str = "shortest_first",
                  rng: np.random.Generator | None = None) -> Iterator[list[int]]:
    """Yield batches of utterance indices; each batch comes from one bucket.

    ``shortest_first`` walks buckets from shortest to longest (utterances
    within a bucket shuffled when ``rng`` is given); ``shuffled`` shuffles
    the batch order across buckets.
    """
    if order not in ("shortest_first", "shuffled"):
        raise ValueError(f"unknown order {order!r}")
    batches = []
    for members, size in zip(plan.members, plan.batch_sizes):
        idx = list(members)
        if rng is not None:
            idx = [idx[j] for j in rng.permutation(len(idx))]
        batches.extend(idx[s : s + size] for s in range(0, len(idx), size))
    if order == "shuffled":
        if rng is None:
            raise ValueError("shuffled order needs an rng")
        batches = [batches[j] for j in rng.permutation(len(batches))]
    yield from batches


@dataclass
class Batch:
    frames: np.ndarray | None     # [B, T, F]
    frame_lengths: np.ndarray | None
    targets: np.ndarray           # [B, U] piece ids incl. EOS, PAD after
    target_mask: np.ndarray       # [B, U] 1.0 on real targets
    ids: list

    @property
    def size(self) -> int:
        return self.targets.shape[0]


def collate(utterances: Sequence[Utterance], pad_id: int, dtype=np.float32) -> Batch:
    B = len(utterances)
    U = max(len(u.tokens) for u in utterances)
    targets = np.full((B, U), pad_id, dtype=np.int64)
    tmask = np.zeros((B, U), dtype=dtype)
    for r, u in enumerate(utterances):
        n = len(u.tokens)
        targets[r, :n] = u.tokens.ids
        tmask[r, :n] = 1.0
    frames = lengths = None
    if all(u.frames is not None for u in utterances):
        lengths = np.array([u.num_frames for u in utterances])
        F = utterances[0].frames.shape[1]
        frames = np.zeros((B, int(lengths.max()), F), dtype=dtype)
        for r, u in enumerate(utterances):
            frames[r, : lengths[r]] = u.frames
    return Batch(frames, lengths, targets, tmask, [u.id for u in utterances])


# ---------------------------------------------------------------------------
# on-disk corpus: JSON lines + companion little-endian fp32 frames file


def write_corpus(path_prefix, utterances: Sequence[Utterance]) -> tuple[Path, Path]:
    prefix = Path(path_prefix)
    jsonl, binf = prefix.with_suffix(".jsonl"), prefix.with_suffix(".frames")
    with open(binf, "wb") as fb, open(jsonl, "w", encoding="utf-8") as fj:
        fb.write(FRAMES_MAGIC + struct.pack("<I", FRAMES_VERSION))
        for u in utterances:
            rec = {"id": u.id, "text": u.text}
            if u.frames is not None:
                rec["frames_offset"] = fb.tell()
                T, F = u.frames.shape
                fb.write(struct.pack("<II", T, F))
                fb.write(np.ascontiguousarray(u.frames, dtype="<f4").tobytes())
            fj.write(json.dumps(rec) + "\n")
    return jsonl, binf


def read_corpus(path_prefix, vocab: Vocabulary) -> list[Utterance]:
    prefix = Path(path_prefix)
    jsonl, binf = prefix.with_suffix(".jsonl"), prefix.with_suffix(".frames")
    blob = binf.read_bytes() if binf.exists() else b""
    if blob and blob[:4] != FRAMES_MAGIC:
        raise ValueError(f"{binf}: bad frames file")
    out = []
    for line in jsonl.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        frames = None
        off = rec.get("frames_offset")
        if off is not None:
            T, F = struct.unpack("<II", blob[off : off + 8])
            frames = np.frombuffer(blob, dtype="<f4", count=T * F, offset=off + 8).reshape(T, F).astype(np.float32)
        out.append(Utterance(rec["id"], rec["text"], vocab.encode(rec["text"]), frames))
    return out


def write_text(path, lines: Sequence[str]) -> None:
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def read_text(path) -> list[str]:
    return [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
