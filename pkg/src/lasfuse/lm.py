"""External recurrent wordpiece language model.

One LSTM layer followed by a linear projection and the softmax layer.  The
post-projection vector is what deep fusion, cold fusion and the lower-layer
decoder consume as the LM hidden state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import Batch, collate, iterate_epoch, plan_buckets, text_utterance
from .params import AdamState, ParamStore, adam_step
from .tokenizer import BOS_ID, PAD_ID, TokenSeq, Vocabulary

log = logging.getLogger(__name__)


@dataclass
class LmConfig:
    vocab_size: int
    emb_dim: int = 64
    units: int = 128
    proj_dim: int = 64
    dropout: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LmTrainConfig:
    epochs: int = 6
    lr: float = 0.001
    batch_size: int = 64
    patience: int = 2
    seed: int = 0


class RnnLm:
    """LSTM LM whose parameters live under ``prefix`` in ``store``."""

    def __init__(self, cfg: LmConfig, store: ParamStore | None = None, rng=None, prefix: str = "lm",
                 dtype=np.float32):
        self.cfg = cfg
        self.prefix = prefix
        if store is None:
            store = ParamStore(dtype)
            self.init_params(store, rng, with_output=True)
        self.store = store

    def init_params(self, store: ParamStore, rng, with_output: bool = True) -> None:
        p, c = self.prefix, self.cfg
        store.add(f"{p}.emb", (c.vocab_size, c.emb_dim), rng)
        store.add(f"{p}.lstm.Wx", (c.emb_dim, 4 * c.units), rng)
        store.add(f"{p}.lstm.Wh", (c.units, 4 * c.units), rng)
        store.add(f"{p}.lstm.b", (4 * c.units,), rng)
        store.add(f"{p}.proj.W", (c.units, c.proj_dim), rng)
        store.add(f"{p}.proj.b", (c.proj_dim,), rng)
        if with_output:
            store.add(f"{p}.out.W", (c.proj_dim, c.vocab_size), rng)
            store.add(f"{p}.out.b", (c.vocab_size,), rng)

    def _p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    @property
    def dtype(self):
        return self.store.dtype

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def param_names(self) -> list[str]:
        return self.store.names(self.prefix + ".")

    def initial_state(self, batch_size: int) -> dict:
        z = np.zeros((batch_size, self.cfg.units), self.dtype)
        return {"h": Tensor(z), "c": Tensor(z.copy())}

    def hidden_step(self, prev_ids, state: dict, train: bool = False, rng=None):
        """Advance the recurrence; returns ``(post-projection hidden, new state)``."""
        prev_ids = np.asarray(prev_ids)
        if prev_ids.size and (prev_ids.min() < 0 or prev_ids.max() >= self.vocab_size):
            raise IndexError("label id out of range")
        x = ag.embedding(self._p("emb"), prev_ids)
        h, c = ag.lstm_cell(x, state["h"], state["c"], self._p("lstm.Wx"), self._p("lstm.Wh"), self._p("lstm.b"))
        hd = ag.dropout(h, self.cfg.dropout, rng, train)
        d = ag.affine(hd, self._p("proj.W"), self._p("proj.b"))
        return d, {"h": h, "c": c}

    def step(self, prev_ids, state: dict, train: bool = False, rng=None):
        """One LM step: ``(log-probs [B, V], hidden [B, proj_dim], new state)``."""
        d, new_state = self.hidden_step(prev_ids, state, train, rng)
        logits = ag.affine(d, self._p("out.W"), self._p("out.b"))
        return ag.log_softmax(logits), d, new_state

    def sequence_logits(self, inputs: np.ndarray, mask: np.ndarray, train: bool = False, rng=None) -> Tensor:
        x = ag.embedding(self._p("emb"), inputs)
        h = ag.lstm_sequence(x, self._p("lstm.Wx"), self._p("lstm.Wh"), self._p("lstm.b"), mask=mask)
        h = ag.dropout(h, self.cfg.dropout, rng, train)
        d = ag.affine(h, self._p("proj.W"), self._p("proj.b"))
        return ag.affine(d, self._p("out.W"), self._p("out.b"))

    def batch_loss(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        """Summed cross-entropy of every target (EOS included) given BOS-shifted inputs."""
        inputs = np.concatenate([np.full((batch.size, 1), BOS_ID), batch.targets[:, :-1]], axis=1)
        inputs = np.where(batch.target_mask > 0, inputs, PAD_ID)
        logits = self.sequence_logits(inputs, batch.target_mask, train, rng)
        return ag.softmax_xent(logits, batch.targets, 0.0, batch.target_mask)

    def reorder_state(self, state: dict, idx) -> dict:
        idx = np.asarray(idx)
        return {k: Tensor(v.data[idx]) for k, v in state.items()}


def lm_logprob(lm: RnnLm, seq) -> float:
    """``log P(seq)`` by stepping the LM; ``seq`` ids must end with EOS."""
    ids = seq.ids if isinstance(seq, TokenSeq) else tuple(seq)
    if not ids:
        raise ValueError("empty sequence")
    with ag.no_grad():
        state = lm.initial_state(1)
        prev, total = BOS_ID, 0.0
        for y in ids:
            logp, _, state = lm.step([prev], state)
            total += float(logp.data[0, y])
            prev = y
    return total


def lm_logprob_batch(lm: RnnLm, seqs) -> np.ndarray:
    """Whole-sequence log-probabilities through the fused sequence path."""
    utts = [_as_text_utt(s) for s in seqs]
    batch = collate(utts, PAD_ID, dtype=lm.dtype)
    with ag.no_grad():
        inputs = np.concatenate([np.full((batch.size, 1), BOS_ID), batch.targets[:, :-1]], axis=1)
        logits = lm.sequence_logits(np.where(batch.target_mask > 0, inputs, PAD_ID), batch.target_mask)
        logp = ag.log_softmax_np(logits.data.astype(np.float64))
    picked = np.take_along_axis(logp, batch.targets[..., None], axis=-1)[..., 0]
    return (picked * batch.target_mask).sum(axis=1)


class _SeqUtt:
    __slots__ = ("id", "tokens", "frames")

    def __init__(self, ids):
        self.id = ""
        self.tokens = TokenSeq(tuple(ids))
        self.frames = None

    @property
    def num_frames(self):
        return 0


def _as_text_utt(seq):
    if isinstance(seq, TokenSeq):
        return _SeqUtt(seq.ids)
    if hasattr(seq, "tokens"):
        return seq
    return _SeqUtt(seq)


def perplexity(lm: RnnLm, seqs, batch_size: int = 256) -> float:
    """``exp(-total log-prob / predicted tokens)``; EOS counts as a predicted token."""
    seqs = list(seqs)
    if not seqs:
        raise ValueError("empty corpus")
    total, count = 0.0, 0
    for s in range(0, len(seqs), batch_size):
        chunk = seqs[s : s + batch_size]
        total += float(lm_logprob_batch(lm, chunk).sum())
        count += sum(len(_as_text_utt(c).tokens) for c in chunk)
    return math.exp(-total / count)


def unigram_perplexity(train_seqs, eval_seqs, vocab_size: int, alpha: float = 1.0) -> float:
    """Add-``alpha`` unigram model estimated by counting, evaluated on ``eval_seqs``."""
    counts = np.full(vocab_size, alpha, dtype=np.float64)
    for s in train_seqs:
        for y in _as_text_utt(s).tokens.ids:
            counts[y] += 1
    logp = np.log(counts / counts.sum())
    total, n = 0.0, 0
    for s in eval_seqs:
        ids = _as_text_utt(s).tokens.ids
        total += logp[list(ids)].sum()
        n += len(ids)
    return math.exp(-total / n)


def train_lm(lm: RnnLm, train_lines, dev_lines, vocab: Vocabulary, cfg: LmTrainConfig,
             progress=None) -> dict:
    """Adam training with dev-perplexity early stopping; keeps the best parameters.

    Lines must already be covered by ``vocab`` (see ``coverage_filter``).
    Returns a history dict with the dev perplexity per epoch (epoch 0 is the
    initialization).
    """
    train_utts = [text_utterance(l, vocab) for l in train_lines]
    dev_utts = [text_utterance(l, vocab) for l in dev_lines]
    rng = np.random.default_rng([cfg.seed, 31])
    state = AdamState(lr=cfg.lr)
    names = lm.param_names()
    best = perplexity(lm, dev_utts)
    best_arrays = {n: lm.store[n].data.copy() for n in names}
    history = {"dev_ppl": [best], "train_loss": [], "best_epoch": 0}
    plan = plan_buckets(train_utts, 1, batch_sizes=[cfg.batch_size])
    bad = 0
    for epoch in range(1, cfg.epochs + 1):
        tot, ntok = 0.0, 0
        for idx in iterate_epoch(plan, "shortest_first", rng):
            batch = collate([train_utts[i] for i in idx], PAD_ID, lm.dtype)
            for n in names:
                lm.store[n].grad = None
            loss = lm.batch_loss(batch, train=True, rng=rng)
            ntoks = float(batch.target_mask.sum())
            (loss * (1.0 / ntoks)).backward()
            adam_step(lm.store, state, names)
            tot += loss.item()
            ntok += ntoks
        ppl = perplexity(lm, dev_utts)
        history["train_loss"].append(tot / ntok)
        history["dev_ppl"].append(ppl)
        log.info("lm epoch %d train xent %.4f dev ppl %.3f", epoch, tot / ntok, ppl)
        if progress:
            progress(epoch, ppl)
        if ppl < best:
            best, bad = ppl, 0
            best_arrays = {n: lm.store[n].data.copy() for n in names}
            history["best_epoch"] = epoch
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    for n in names:
        lm.store[n].data = best_arrays[n]
        lm.store[n].grad = None
    history["best_dev_ppl"] = best
    return history
