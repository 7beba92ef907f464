"""ASR training loop shared by every integration mode."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .corpus import Utterance, collate, iterate_epoch, plan_buckets
from .decoding import greedy_decode_batch
from .evaluation import corpus_wer
from .fusion import EARLY_MODES
from .las import LAS, sequence_loss
from .params import AdamState, adam_step
from .tokenizer import PAD_ID, Vocabulary

log = logging.getLogger(__name__)

# (total epochs, last epoch at the initial rate)
EARLY_SCHEDULE = (12, 7)
LATE_SCHEDULE = (8, 4)


class DivergenceError(RuntimeError):
    pass


def schedule(epoch: int, mode: str, lr0: float = 0.001, hold: int | None = None) -> float:
    """Learning rate for a 1-based epoch: constant, then halved every epoch.

    Early-integration modes (and the baseline) hold for 7 epochs, late ones
    for 4, unless ``hold`` overrides it.
    """
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    if hold is None:
        hold = EARLY_SCHEDULE[1] if mode in EARLY_MODES else LATE_SCHEDULE[1]
    return lr0 * 0.5 ** max(0, epoch - hold)


@dataclass
class TrainConfig:
    epochs: int | None = None
    hold: int | None = None
    lr: float = 0.001
    smoothing: float = 0.1
    sampling_prob: float = 0.9
    n_buckets: int = 5
    batch_sizes: list = field(default_factory=lambda: [32, 24, 16, 12, 8])
    order: str = "shortest_first"
    max_decode_len: int = 40
    early_stop: str = "wer"           # "wer" (greedy dev WER) or "loss" (dev loss)
    eval_initial: bool = False
    lm_task_prob: float = 0.25


def total_epochs(cfg: TrainConfig, mode: str) -> int:
    if cfg.epochs is not None:
        return cfg.epochs
    return EARLY_SCHEDULE[0] if mode in EARLY_MODES else LATE_SCHEDULE[0]


def greedy_wer(model: LAS, utts: Sequence[Utterance], vocab: Vocabulary, max_len: int = 40,
               batch_size: int = 64):
    pairs = []
    for s in range(0, len(utts), batch_size):
        chunk = utts[s : s + batch_size]
        hyps = greedy_decode_batch(model, [u.frames for u in chunk], max_len)
        pairs.extend((u.text, vocab.decode(h)) for u, h in zip(chunk, hyps))
    return corpus_wer(pairs)


def dev_loss(model: LAS, utts: Sequence[Utterance], batch_size: int = 64) -> float:
    """Per-token teacher-forced cross-entropy, no smoothing or sampling."""
    tot, n = 0.0, 0.0
    with ag.no_grad():
        for s in range(0, len(utts), batch_size):
            batch = collate(utts[s : s + batch_size], PAD_ID, model.dtype)
            tot += sequence_loss(model, batch).item()
            n += float(batch.target_mask.sum())
    return tot / n


def _snapshot(model: LAS) -> dict:
    return {n: t.data.copy() for n, t in model.store.params.items()}


def _restore(model: LAS, arrays: dict) -> None:
    for n, a in arrays.items():
        model.store[n].data = a
        model.store[n].grad = None


def asr_step(model: LAS, batch, state: AdamState, cfg: TrainConfig, rng, names=None,
             zero_context: bool = False) -> float:
    model.store.zero_grad()
    loss = sequence_loss(model, batch, cfg.smoothing, cfg.sampling_prob, rng, train=True,
                         zero_context=zero_context)
    (loss * (1.0 / batch.size)).backward()
    adam_step(model.store, state, names)
    return loss.item() / batch.size


def decoder_names(model: LAS) -> list[str]:
    """Parameters an LM-task step may touch: everything but encoder and attention."""
    skip = set(model.encoder_attention_names())
    return [n for n in model.store.names() if n not in skip and model.store.trainable[n]]


def multitask_train_step(model: LAS, task: str, batch, state: AdamState, cfg: TrainConfig, rng) -> float:
    """One multitask update.  ``lm`` steps zero the context and leave encoder/attention alone."""
    if task == "asr":
        if batch.frames is None:
            raise ValueError("asr task needs a paired batch")
        return asr_step(model, batch, state, cfg, rng)
    if task == "lm":
        if batch.frames is not None:
            raise ValueError("lm task takes a text-only batch")
        return asr_step(model, batch, state, cfg, rng, names=decoder_names(model), zero_context=True)
    raise ValueError(f"unknown task {task!r}")


def sample_task(rng: np.random.Generator, lm_task_prob: float) -> str:
    return "lm" if rng.random() < lm_task_prob else "asr"


def _guard(epoch, fn, *args):
    try:
        return fn(*args)
    except FloatingPointError as exc:
        raise DivergenceError(f"training diverged in epoch {epoch}: {exc}") from exc


def train_asr(model: LAS, train_utts: Sequence[Utterance], dev_utts: Sequence[Utterance], vocab: Vocabulary,
              cfg: TrainConfig, rng: np.random.Generator, mode: str | None = None,
              text_utts: Sequence[Utterance] | None = None, progress=None) -> dict:
    """Train ``model`` in place and restore the best dev checkpoint.

    Only parameters marked trainable in ``model.store`` are updated.  With
    ``text_utts`` (multitask mode) each update is an LM step on a text batch
    with probability ``cfg.lm_task_prob``, else an ASR step.
    """
    mode = mode or model.mode
    if text_utts and not 0.0 <= cfg.lm_task_prob < 1.0:
        raise ValueError("lm_task_prob must be in [0, 1) when text batches are mixed in")
    epochs = total_epochs(cfg, mode)
    plan = plan_buckets(train_utts, cfg.n_buckets, batch_sizes=cfg.batch_sizes)
    text_plan = plan_buckets(text_utts, cfg.n_buckets, batch_sizes=cfg.batch_sizes) if text_utts else None
    state = AdamState(lr=cfg.lr)
    history = {"epochs": [], "mode": mode}

    def evaluate():
        w = greedy_wer(model, dev_utts, vocab, cfg.max_decode_len)
        return {"dev_wer": w.rate, "dev_loss": dev_loss(model, dev_utts)}

    def key(m):
        return (m["dev_wer"], m["dev_loss"]) if cfg.early_stop == "wer" else (m["dev_loss"], m["dev_wer"])

    best, best_arrays, best_epoch = None, _snapshot(model), 0
    if cfg.eval_initial:
        best = evaluate()
        history["initial"] = best
    text_iter = None
    for epoch in range(1, epochs + 1):
        state.lr = schedule(epoch, mode, cfg.lr, cfg.hold)
        t0 = time.time()
        losses, n_lm = [], 0
        for idx in iterate_epoch(plan, cfg.order, rng):
            # every update samples its task; LM updates are slotted in until
            # an ASR draw consumes the next paired batch
            while text_plan is not None and sample_task(rng, cfg.lm_task_prob) == "lm":
                tidx = next(text_iter, None) if text_iter is not None else None
                if tidx is None:
                    text_iter = iterate_epoch(text_plan, "shuffled", rng)
                    tidx = next(text_iter)
                batch = collate([text_utts[i] for i in tidx], PAD_ID, model.dtype)
                _guard(epoch, multitask_train_step, model, "lm", batch, state, cfg, rng)
                n_lm += 1
            batch = collate([train_utts[i] for i in idx], PAD_ID, model.dtype)
            losses.append(_guard(epoch, asr_step, model, batch, state, cfg, rng))
        metrics = evaluate()
        metrics.update(epoch=epoch, lr=state.lr, train_loss=float(np.mean(losses)), lm_steps=n_lm,
                       seconds=time.time() - t0)
        history["epochs"].append(metrics)
        log.info("%s epoch %d lr %.2e train %.3f dev loss %.3f dev wer %.3f (%.1fs)", mode, epoch, state.lr,
                 metrics["train_loss"], metrics["dev_loss"], metrics["dev_wer"], metrics["seconds"])
        if progress:
            progress(metrics)
        if best is None or key(metrics) < key(best):
            best, best_arrays, best_epoch = metrics, _snapshot(model), epoch
    _restore(model, best_arrays)
    history["best_epoch"] = best_epoch
    history["best"] = best
    return history
