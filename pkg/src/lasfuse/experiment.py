"""End-to-end experiment pipeline shared by the CLI and the acceptance tests.

Every random stream is derived from the root seed and a component name, so
stages can be rerun independently and still reproduce bit-for-bit.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, LmSection
from .corpus import (Grammar, SynthConfig, Utterance, dedup_cap, make_prototypes, synth_utterance,
                     text_utterance)
from .decoding import DecodeConfig, beam_search, nbest_record
from .evaluation import lm_text_scorer, oracle_wer, rescore_nbest, top1_wer, tune_rescoring_weight
from .fusion import (EARLY_MODES, FusionMode, ModelBundle, build_cold_fusion, build_deep_fusion,
                     build_lower_layer_model)
from .las import LAS, LasConfig
from .lm import LmConfig, LmTrainConfig, RnnLm, train_lm, unigram_perplexity
from .tokenizer import Vocabulary, coverage_filter, learn_bpe
from .training import TrainConfig, train_asr

log = logging.getLogger(__name__)


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one pipeline component."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class Data:
    vocab: Vocabulary
    train: list
    dev: list
    test: list
    text_train: list
    text_dev: list
    synth: SynthConfig
    dropped_text: int = 0

    def refs(self, split: str) -> dict:
        return {u.id: u.text for u in getattr(self, split)}


def synth_config(cfg: ExperimentConfig) -> SynthConfig:
    c = cfg.corpus
    return SynthConfig(frames_per_token=c.frames_per_token, feat_dim=c.feat_dim, noise=c.noise,
                       seed=cfg.seed, group_size=c.group_size, group_spread=c.group_spread)


def make_data(cfg: ExperimentConfig) -> Data:
    """Sample transcripts, learn the vocabulary on the paired training text, synthesize frames."""
    c = cfg.corpus
    synth = synth_config(cfg)
    grammar: Grammar = synth.grammar
    rng = component_rng(cfg.seed, "text")
    train_text = dedup_cap(grammar.sample_lines(c.n_train, rng), c.dedup_threshold)
    dev_text = grammar.sample_lines(c.n_dev, rng)
    test_text = grammar.sample_lines(c.n_test, rng)
    pool = grammar.sample_lines(c.n_text, rng)
    lm_dev = grammar.sample_lines(c.n_lm_dev, rng)
    vocab = learn_bpe(train_text, c.vocab_size)
    pool, dropped = coverage_filter(pool, vocab)
    lm_dev, _ = coverage_filter(lm_dev, vocab)
    dev_text, _ = coverage_filter(dev_text, vocab)
    test_text, _ = coverage_filter(test_text, vocab)
    protos = make_prototypes(len(vocab), synth)
    frng = component_rng(cfg.seed, "frames")

    def synth_all(lines, split):
        return [synth_utterance(t, vocab, protos, synth, frng, f"{split}-{i:05d}") for i, t in enumerate(lines)]

    return Data(vocab, synth_all(train_text, "train"), synth_all(dev_text, "dev"), synth_all(test_text, "test"),
                pool, lm_dev, synth, len(dropped))


# ---------------------------------------------------------------------------
# language models


def lm_config(section: LmSection, vocab_size: int) -> LmConfig:
    return LmConfig(vocab_size, section.emb_dim, section.units, section.proj_dim, section.dropout)


def train_external_lm(section: LmSection, data: Data, seed: int, name: str = "lm"):
    lm = RnnLm(lm_config(section, len(data.vocab)), rng=component_rng(seed, f"{name}.init"))
    tcfg = LmTrainConfig(section.epochs, section.lr, section.batch_size, section.patience,
                         seed=zlib.crc32(f"{seed}.{name}".encode()))
    hist = train_lm(lm, data.text_train, data.text_dev, data.vocab, tcfg)
    dev = [data.vocab.encode(l) for l in data.text_dev]
    hist["unigram_dev_ppl"] = unigram_perplexity([data.vocab.encode(l) for l in data.text_train], dev,
                                                 len(data.vocab))
    hist["vocab_size"] = len(data.vocab)
    return lm, hist


# ---------------------------------------------------------------------------
# ASR training per integration mode


def las_config(cfg: ExperimentConfig, vocab_size: int) -> LasConfig:
    m = cfg.model
    return LasConfig(cfg.corpus.feat_dim, vocab_size, m.enc_layers, m.enc_units, m.dec_units, m.emb_dim,
                     m.att_dim, m.dropout)


def train_config(cfg: ExperimentConfig, mode: str) -> TrainConfig:
    t = cfg.train
    early = mode in EARLY_MODES
    return TrainConfig(
        epochs=t.early_epochs if early else t.late_epochs,
        hold=t.early_hold if early else t.late_hold,
        lr=t.lr if early else t.late_lr,
        smoothing=t.smoothing,
        sampling_prob=t.sampling_prob,
        n_buckets=t.n_buckets,
        batch_sizes=list(t.batch_sizes),
        max_decode_len=cfg.decode.max_len,
        lm_task_prob=t.lm_task_prob,
        # fine-tuning starts from a working model: keep it as a candidate.
        # Deep fusion selects by dev loss so the retained model never has a
        # higher dev loss than its baseline-equivalent start.
        eval_initial=not early,
        early_stop="loss" if mode == "deep" else "wer",
    )


def train_mode(mode: str, cfg: ExperimentConfig, data: Data, lm: RnnLm | None = None,
               baseline: ModelBundle | None = None) -> tuple[ModelBundle, dict]:
    """Train (or assemble) the system for one integration mode."""
    lcfg = las_config(cfg, len(data.vocab))
    rng = component_rng(cfg.seed, f"asr.{mode}")
    tcfg = train_config(cfg, mode)
    fm = FusionMode(mode, lm_task_prob=cfg.train.lm_task_prob)
    if mode in ("shallow", "deep", "lower_layer") and baseline is None:
        raise ValueError(f"mode {mode!r} needs a trained baseline")
    if mode in ("shallow", "deep", "cold") and lm is None:
        raise ValueError(f"mode {mode!r} needs a trained external LM")
    if mode == "none":
        model = LAS(lcfg, rng=rng)
        hist = train_asr(model, data.train, data.dev, data.vocab, tcfg, rng, mode)
        return ModelBundle(model, fm), hist
    if mode == "shallow":
        return ModelBundle(baseline.model, fm, lm), {"mode": mode, "epochs": [], "note": "no training"}
    if mode == "deep":
        model = build_deep_fusion(baseline.model, lm, rng)
    elif mode == "cold":
        model = build_cold_fusion(lcfg, lm, rng)
    elif mode == "lower_layer":
        if lm is None:
            model = build_lower_layer_model(baseline.model, None, lm_config(cfg.lm, len(data.vocab)), rng)
        else:
            seqs = [u.tokens.ids for u in data.train]
            model = build_lower_layer_model(baseline.model, lm, lm.cfg, rng, adapter_fit_seqs=seqs)
    elif mode == "multitask":
        model = LAS(lcfg, rng=rng)
        texts = [text_utterance(l, data.vocab, f"text-{i:06d}") for i, l in enumerate(data.text_train)]
        hist = train_asr(model, data.train, data.dev, data.vocab, tcfg, rng, mode, text_utts=texts)
        return ModelBundle(model, fm), hist
    else:
        raise ValueError(f"unknown mode {mode!r}")
    hist = train_asr(model, data.train, data.dev, data.vocab, tcfg, rng, mode)
    return ModelBundle(model, fm), hist


# ---------------------------------------------------------------------------
# decoding and tuning


def decode_records(bundle: ModelBundle, utts: Sequence[Utterance], vocab: Vocabulary, dcfg: DecodeConfig) -> list[dict]:
    return [nbest_record(beam_search(bundle, u.frames, dcfg, u.id), vocab, dcfg) for u in utts]


class Tuner:
    """Dev-WER search over LM weight, insertion reward and coverage weight.

    LM weight and insertion reward interact strongly (a larger LM weight
    needs a larger reward to keep long hypotheses alive), so they are searched
    jointly over the full product grid; coverage is then swept with both held.
    Selection is by dev top-1 WER, earliest grid point on ties.  Results are
    cached so points shared between searches are decoded once.
    """

    def __init__(self, bundle: ModelBundle, utts, vocab: Vocabulary, beam: int, max_len: int, mode: str):
        self.bundle, self.utts, self.vocab = bundle, utts, vocab
        self.beam, self.max_len, self.mode = beam, max_len, mode
        self.refs = {u.id: u.text for u in utts}
        self.results: dict[tuple, float] = {}

    def score(self, lm_weight: float, insertion: float, coverage: float) -> float:
        key = (float(lm_weight), float(insertion), float(coverage))
        if key not in self.results:
            dcfg = DecodeConfig(self.beam, self.max_len, lm_weight, coverage, insertion, self.mode)
            self.results[key] = top1_wer(self.refs, decode_records(self.bundle, self.utts, self.vocab, dcfg)).rate
        return self.results[key]

    def sweep(self, knobs: dict, name: str, grid) -> dict:
        best = None
        for v in grid:
            trial = dict(knobs, **{name: v})
            rate = self.score(trial["lm_weight"], trial["insertion_reward"], trial["coverage_weight"])
            if best is None or rate < best[0]:
                best = (rate, trial)
        return best[1]

    def run(self, lm_grid, ins_grid, cov_grid) -> dict:
        knobs = {"lm_weight": 0.0, "insertion_reward": 0.0, "coverage_weight": 0.0}
        best = None
        for lam in lm_grid:
            trial = self.sweep(dict(knobs, lm_weight=lam), "insertion_reward", ins_grid)
            rate = self.score(trial["lm_weight"], trial["insertion_reward"], trial["coverage_weight"])
            if best is None or rate < best[0]:
                best = (rate, trial)
        knobs = self.sweep(best[1], "coverage_weight", cov_grid)
        return {
            **knobs,
            "dev_wer": self.score(knobs["lm_weight"], knobs["insertion_reward"], knobs["coverage_weight"]),
            "grid": [dict(zip(("lm_weight", "insertion_reward", "coverage_weight"), k), dev_wer=v)
                     for k, v in self.results.items()],
        }


def tune_decoding(bundle: ModelBundle, data: Data, cfg: ExperimentConfig, mode: str,
                  shared: Tuner | None = None) -> dict:
    """Tune decode knobs on dev.  Only shallow fusion sweeps the LM weight."""
    d = cfg.decode
    tuner = Tuner(bundle, data.dev, data.vocab, d.tune_beam, d.max_len, mode)
    if shared is not None:
        # lm_weight = 0 decodes are identical between baseline and shallow fusion
        tuner.results.update({k: v for k, v in shared.results.items() if k[0] == 0.0})
    lm_grid = d.lm_weights if mode == "shallow" else [0.0]
    out = tuner.run(lm_grid, d.insertion_rewards, d.coverage_weights)
    out["tuner"] = tuner
    return out


def decode_config(cfg: ExperimentConfig, knobs: dict, mode: str) -> DecodeConfig:
    return DecodeConfig(cfg.decode.beam, cfg.decode.max_len, knobs.get("lm_weight", 0.0),
                        knobs.get("coverage_weight", 0.0), knobs.get("insertion_reward", 0.0), mode)


def wer_summary(refs: dict, records: list) -> dict:
    return {"top1": top1_wer(refs, records).to_dict(), "oracle": oracle_wer(refs, records).to_dict()}


def rescore_records(dev_records, test_records, data: Data, second_lm: RnnLm, grid) -> dict:
    scorer = lm_text_scorer(second_lm, data.vocab)
    weight, dev_rate = tune_rescoring_weight(data.refs("dev"), dev_records, scorer, grid)
    dev_out = [rescore_nbest(r, scorer, weight) for r in dev_records]
    test_out = [rescore_nbest(r, scorer, weight) for r in test_records]
    return {"weight": weight, "dev_wer": dev_rate, "dev": dev_out, "test": test_out}


def changed_top1(before: list, after: list) -> int:
    return sum(a["hyps"][0]["tokens"] != b["hyps"][0]["tokens"] for b, a in zip(before, after))


# ---------------------------------------------------------------------------
# the whole comparison


def run_pipeline(cfg: ExperimentConfig, modes: Sequence[str] | None = None, rescore: bool = True,
                 progress=None) -> dict:
    """Train, tune, decode and score every requested mode; returns in-memory results."""
    say = progress or (lambda msg: log.info(msg))
    modes = list(modes or cfg.modes)
    if any(m != "none" for m in modes) and "none" not in modes:
        modes = ["none"] + modes
    data = make_data(cfg)
    say(f"data: {len(data.train)} train / {len(data.dev)} dev / {len(data.test)} test, "
        f"{len(data.text_train)} text lines, V={len(data.vocab)}")
    needs_lm = any(m in ("shallow", "deep", "cold", "lower_layer") for m in modes)
    lm, lm_hist = (train_external_lm(cfg.lm, data, cfg.seed, "lm") if needs_lm else (None, None))
    if lm_hist:
        say(f"lm: dev ppl {lm_hist['best_dev_ppl']:.3f} (unigram {lm_hist['unigram_dev_ppl']:.3f})")
    systems, baseline_tuner = {}, None
    baseline = None
    for mode in ["none"] + [m for m in modes if m != "none"]:
        bundle, hist = train_mode(mode, cfg, data, lm, baseline)
        if mode == "none":
            baseline = bundle
        tuned = tune_decoding(bundle, data, cfg, mode, baseline_tuner if mode == "shallow" else None)
        tuner = tuned.pop("tuner")
        if mode == "none":
            baseline_tuner = tuner
        dcfg = decode_config(cfg, tuned, mode)
        dev_rec = decode_records(bundle, data.dev, data.vocab, dcfg)
        test_rec = decode_records(bundle, data.test, data.vocab, dcfg)
        systems[mode] = {
            "bundle": bundle,
            "history": hist,
            "knobs": tuned,
            "dev_records": dev_rec,
            "test_records": test_rec,
            "dev": wer_summary(data.refs("dev"), dev_rec),
            "test": wer_summary(data.refs("test"), test_rec),
        }
        say(f"{mode}: dev WER {systems[mode]['dev']['top1']['rate']:.4f} "
            f"test WER {systems[mode]['test']['top1']['rate']:.4f} knobs "
            f"lm={tuned['lm_weight']} ins={tuned['insertion_reward']} cov={tuned['coverage_weight']}")
    results = {"config": cfg.to_dict(), "data": data, "lm": lm, "lm_history": lm_hist, "systems": systems}
    if rescore:
        second, second_hist = train_external_lm(cfg.second_lm, data, cfg.seed, "second_lm")
        results["second_lm"], results["second_lm_history"] = second, second_hist
        for mode, s in systems.items():
            r = rescore_records(s["dev_records"], s["test_records"], data, second, cfg.decode.rescore_weights)
            s["rescore"] = {
                "weight": r["weight"],
                "dev": wer_summary(data.refs("dev"), r["dev"]),
                "test": wer_summary(data.refs("test"), r["test"]),
                "dev_changed": changed_top1(s["dev_records"], r["dev"]),
                "test_changed": changed_top1(s["test_records"], r["test"]),
                "dev_records": r["dev"],
                "test_records": r["test"],
            }
            say(f"{mode}: rescored (w={r['weight']}) dev {s['rescore']['dev']['top1']['rate']:.4f} "
                f"test {s['rescore']['test']['top1']['rate']:.4f}")
    return results


def metrics_table(results: dict) -> dict:
    """JSON-ready per-system metrics (no models or records)."""
    out = {"config": results["config"], "systems": {}}
    if results.get("lm_history"):
        out["lm"] = {k: results["lm_history"][k] for k in ("best_dev_ppl", "unigram_dev_ppl", "dev_ppl")}
    for mode, s in results["systems"].items():
        row = {"dev": s["dev"], "test": s["test"],
               "knobs": {k: s["knobs"][k] for k in ("lm_weight", "insertion_reward", "coverage_weight")},
               "tuning": s["knobs"]["grid"],
               "best_epoch": s["history"].get("best_epoch")}
        if "rescore" in s:
            row["rescore"] = {k: s["rescore"][k] for k in ("weight", "dev", "test", "dev_changed", "test_changed")}
        out["systems"][mode] = row
    return out


MODE_LABELS = {
    "none": "baseline LAS",
    "shallow": "shallow fusion",
    "deep": "deep fusion",
    "cold": "cold fusion",
    "lower_layer": "LM as lower layer",
    "multitask": "multitask (zero context)",
}


def format_table(metrics: dict) -> str:
    """Plain-text WER table, one row per system; ``(x)`` is the oracle WER."""
    rows = [("system", "dev WER", "test WER", "rescored test", "knobs (lm/ins/cov)")]
    for mode, s in metrics["systems"].items():
        k = s["knobs"]
        resc = ""
        if "rescore" in s:
            r = s["rescore"]["test"]
            resc = f"{100 * r['top1']['rate']:.2f} ({100 * r['oracle']['rate']:.2f})"
        rows.append((
            MODE_LABELS.get(mode, mode),
            f"{100 * s['dev']['top1']['rate']:.2f} ({100 * s['dev']['oracle']['rate']:.2f})",
            f"{100 * s['test']['top1']['rate']:.2f} ({100 * s['test']['oracle']['rate']:.2f})",
            resc,
            f"{k['lm_weight']}/{k['insertion_reward']}/{k['coverage_weight']}",
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
