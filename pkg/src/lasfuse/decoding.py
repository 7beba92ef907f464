"""Greedy and beam-search inference with LM weight, coverage and insertion reward.

A hypothesis' total score is always recomputed from its components::

    total = asr_logp + lm_weight * lm_logp + insertion_reward * length
            + coverage_weight * coverage

``length`` counts emitted pieces excluding EOS.  ``coverage`` is
``sum_i log(min(sum_t alpha_it, 1))`` over encoder positions, with the
attention of every step up to and including the one that emitted the
hypothesis' final token (EOS for finished hypotheses).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .fusion import ModelBundle
from .las import LAS
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, Vocabulary

NEG_INF = -np.inf


class DecodeError(RuntimeError):
    pass


@dataclass
class DecodeConfig:
    beam: int = 10
    max_len: int = 40
    lm_weight: float = 0.0
    coverage_weight: float = 0.0
    insertion_reward: float = 0.0
    mode: str = "none"

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.lm_weight < 0:
            raise ValueError("lm_weight must be >= 0")


@dataclass
class Hypothesis:
    tokens: tuple
    asr_logp: float = 0.0
    lm_logp: float = 0.0
    coverage: float = 0.0
    length: int = 0
    alive: bool = True

    def total(self, cfg: DecodeConfig) -> float:
        return total_score(self.asr_logp, self.lm_logp, self.length, self.coverage, cfg)


def total_score(asr_logp, lm_logp, length, coverage, cfg: DecodeConfig):
    score = asr_logp + cfg.lm_weight * lm_logp + cfg.insertion_reward * length
    if cfg.coverage_weight:
        score = score + cfg.coverage_weight * coverage
    return score


@dataclass
class NBestList:
    id: str
    hyps: list
    totals: list
    finished: bool = True

    @property
    def best(self) -> Hypothesis:
        return self.hyps[0]


def coverage(attention_history, mask=None) -> float:
    """``sum_i log(min(sum_t alpha_it, 1))`` for an ``[steps, K]`` attention history."""
    att = np.asarray(attention_history, dtype=np.float64)
    if att.ndim == 1:
        att = att[None]
    cum = att.sum(axis=0)
    if mask is not None:
        cum = cum[np.asarray(mask, dtype=bool)]
    with np.errstate(divide="ignore"):
        return float(np.log(np.minimum(cum, 1.0)).sum())


def _coverage_rows(cum: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.minimum(cum, 1.0)).sum(axis=1)


def _unpack(bundle) -> tuple[LAS, object]:
    if isinstance(bundle, ModelBundle):
        return bundle.model, bundle.lm
    return bundle, None


def _mask_specials(logp: np.ndarray) -> np.ndarray:
    logp[:, PAD_ID] = NEG_INF
    logp[:, BOS_ID] = NEG_INF
    return logp


def greedy_decode_batch(bundle, frames_list: Sequence[np.ndarray], max_len: int) -> list[tuple]:
    """Per-step argmax (lowest id on ties) for several utterances at once.

    Returned tuples end with EOS unless ``max_len`` was hit first.
    """
    model, _ = _unpack(bundle)
    B = len(frames_list)
    lengths = np.array([f.shape[0] for f in frames_list])
    F = frames_list[0].shape[1]
    frames = np.zeros((B, lengths.max(), F), dtype=model.dtype)
    for r, f in enumerate(frames_list):
        frames[r, : lengths[r]] = f
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with ag.no_grad():
        enc = model.encode(frames, lengths)
        state = model.initial_state(B)
        prev = np.full(B, BOS_ID, dtype=np.int64)
        for _ in range(max_len):
            logits, state, _ = model.step(prev, state, enc)
            logp = _mask_specials(ag.log_softmax_np(logits.data.astype(np.float64)))
            y = logp.argmax(axis=1)
            for r in np.nonzero(~done)[0]:
                out[r].append(int(y[r]))
            done |= y == EOS_ID
            if done.all():
                break
            prev = y
    return [tuple(o) for o in out]


def greedy_decode(bundle, frames: np.ndarray, max_len: int) -> tuple:
    return greedy_decode_batch(bundle, [frames], max_len)[0]


def beam_search(bundle, frames: np.ndarray, cfg: DecodeConfig, uid: str = "") -> NBestList:
    """Length-synchronous beam search.

    At each step every live hypothesis is extended by every piece except PAD
    and BOS; the ``beam`` best extensions by total score survive (ties: the
    higher-ranked parent, then the lower piece id).  Extensions ending in EOS
    move to the finished pool.  The search stops when nothing is live or at
    ``max_len``.  If nothing finished, the live hypotheses are returned and
    ``finished`` is False.
    """
    model, lm = _unpack(bundle)
    use_lm = cfg.lm_weight > 0
    if use_lm and lm is None:
        raise DecodeError("lm_weight > 0 needs a bundle with an external LM")
    frames = np.asarray(frames, dtype=model.dtype)
    with ag.no_grad():
        enc1 = model.encode(frames[None], [frames.shape[0]])
        K = enc1.h.shape[1]
        state = model.initial_state(1)
        lm_state = lm.initial_state(1) if use_lm else None
        toks = [()]
        asr = np.zeros(1)
        lmp = np.zeros(1)
        lens = np.zeros(1, dtype=np.int64)
        cum = np.zeros((1, K))
        finished: list[Hypothesis] = []
        encs = {1: enc1}
        for t in range(cfg.max_len):
            n = len(toks)
            if n not in encs:
                encs[n] = enc1.take(np.zeros(n, dtype=np.int64))
            prev = np.array([tk[-1] if tk else BOS_ID for tk in toks], dtype=np.int64)
            logits, new_state, alpha = model.step(prev, state, encs[n])
            logp = _mask_specials(ag.log_softmax_np(logits.data.astype(np.float64)))
            if use_lm:
                lm_out, _, new_lm_state = lm.step(prev, lm_state)
                lm_logp = lm_out.data.astype(np.float64)
            else:
                lm_logp = np.zeros_like(logp)
            cum_new = cum + alpha.data.astype(np.float64)
            cov = _coverage_rows(cum_new)
            V = logp.shape[1]
            cand_asr = asr[:, None] + logp
            cand_lm = lmp[:, None] + lm_logp
            cand_len = lens[:, None] + (np.arange(V) != EOS_ID)[None, :]
            cand_cov = np.broadcast_to(cov[:, None], logp.shape)
            scores = total_score(cand_asr, cand_lm, cand_len, cand_cov, cfg)
            flat = scores.ravel()
            valid = np.isfinite(flat)
            order = np.lexsort((np.tile(np.arange(V), n), np.repeat(np.arange(n), V), -flat))
            order = order[valid[order]][: cfg.beam]
            keep_rows, keep_tok = [], []
            for k in order:
                i, v = divmod(int(k), V)
                if v == EOS_ID:
                    finished.append(Hypothesis(toks[i] + (v,), float(cand_asr[i, v]), float(cand_lm[i, v]),
                                               float(cov[i]), int(lens[i]), alive=False))
                else:
                    keep_rows.append(i)
                    keep_tok.append(v)
            if not keep_rows:
                break
            rows = np.array(keep_rows)
            tk = np.array(keep_tok)
            toks = [toks[i] + (v,) for i, v in zip(keep_rows, keep_tok)]
            asr = cand_asr[rows, tk]
            lmp = cand_lm[rows, tk]
            lens = cand_len[rows, tk]
            cum = cum_new[rows]
            state = model.reorder_state(new_state, rows)
            if use_lm:
                lm_state = lm.reorder_state(new_lm_state, rows)
        live = []
        if not finished:
            covs = _coverage_rows(cum)
            live = [Hypothesis(toks[i], float(asr[i]), float(lmp[i]), float(covs[i]), int(lens[i]), alive=True)
                    for i in range(len(toks))]
    pool = finished if finished else live
    pool.sort(key=lambda h: (-h.total(cfg), h.tokens))
    pool = pool[: cfg.beam]
    return NBestList(uid, pool, [h.total(cfg) for h in pool], finished=bool(finished))


def sequence_score(bundle, frames: np.ndarray, tokens: Sequence[int]) -> float:
    """Teacher-forced ``log p(tokens | frames)`` via repeated single steps."""
    model, _ = _unpack(bundle)
    with ag.no_grad():
        enc = model.encode(np.asarray(frames, dtype=model.dtype)[None], [frames.shape[0]])
        state = model.initial_state(1)
        prev, total = BOS_ID, 0.0
        for y in tokens:
            logits, state, _ = model.step(np.array([prev]), state, enc)
            total += float(ag.log_softmax_np(logits.data.astype(np.float64))[0, y])
            prev = y
    return total


# ---------------------------------------------------------------------------
# N-best JSON lines


def nbest_record(nb: NBestList, vocab: Vocabulary, cfg: DecodeConfig) -> dict:
    return {
        "id": nb.id,
        "finished": nb.finished,
        "hyps": [
            {
                "text": vocab.decode(h.tokens),
                "tokens": list(h.tokens),
                "asr_logp": h.asr_logp,
                "lm_logp": h.lm_logp,
                "coverage": h.coverage,
                "length": h.length,
                "total": h.total(cfg),
            }
            for h in nb.hyps
        ],
    }


def write_nbest(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_nbest(path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            if "id" not in rec or "hyps" not in rec:
                raise ValueError(f"{path}: malformed N-best record")
            out.append(rec)
    return out
