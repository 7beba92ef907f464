"""Command-line driver.

Artifacts live under ``--out``::

    config.yaml                 resolved configuration
    corpus/                     train/dev/test utterances, text pool, vocabulary
    lm/                         external LM and second-pass LM checkpoints
    asr/<mode>.ckpt             trained systems (fusion mode in the header)
    tune/<mode>.json            decode-knob sweep on dev (+ figure)
    decode/<mode>.<split>.nbest.jsonl
    rescore/<mode>.<split>.nbest.jsonl
    eval/<mode>.json            WER / oracle WER report (+ aligned text)
    compare/                    metrics.json, table.txt and figures
    manifests/                  one manifest per command run

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 decode/rescoring failure, 5 missing input artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, config_hash, dump_config, from_dict, load_config
from .corpus import read_corpus, read_text, write_corpus, write_text
from .decoding import DecodeError, read_nbest, write_nbest
from .evaluation import aligned_table, lm_text_scorer, rescore_nbest, top1_wer, tune_rescoring_weight
from .experiment import (Data, MODE_LABELS, Tuner, decode_config, decode_records, format_table, make_data,
                         synth_config, train_external_lm, train_mode, wer_summary)
from .fusion import MODES, ModelBundle, load_bundle, save_bundle
from .lm import LmConfig, RnnLm
from .params import load_checkpoint, save_checkpoint
from .tokenizer import CoverageError, Vocabulary
from .training import DivergenceError

log = logging.getLogger("lasfuse")

EXIT_CONFIG, EXIT_DIVERGED, EXIT_DECODE, EXIT_MISSING = 2, 3, 4, 5
SPLITS = ("dev", "test")


class MissingArtifact(FileNotFoundError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Context for one command: config, output root and manifest bookkeeping."""

    def __init__(self, cfg: ExperimentConfig, out: Path, command: str, mode: str | None = None):
        self.cfg, self.out, self.command, self.mode = cfg, out, command, mode
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.t0 = time.time()
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        if not p.exists():
            raise MissingArtifact(f"missing input artifact {p}; run the producing command first")
        self.inputs[str(p.relative_to(self.out))] = sha256_file(p)
        return p

    def wrote(self, p: Path) -> Path:
        self.outputs[str(p.relative_to(self.out))] = sha256_file(p)
        return p

    def write_json(self, p: Path, obj) -> Path:
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return self.wrote(p)

    def finish(self) -> Path:
        name = self.command + (f".{self.mode}" if self.mode else "")
        manifest = {
            "command": self.command,
            "mode": self.mode,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "inputs_hash": config_hash(self.inputs),
            "version": __version__,
            "seconds": round(time.time() - self.t0, 3),
        }
        p = self.path("manifests", f"{name}.json")
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


# ---------------------------------------------------------------------------
# loading helpers


def load_vocab(run: Run) -> Vocabulary:
    return Vocabulary.load(run.need("corpus", "vocab.txt"))


def load_data(run: Run) -> Data:
    vocab = load_vocab(run)
    splits = {}
    for s in ("train",) + SPLITS:
        run.need("corpus", f"{s}.jsonl")
        run.need("corpus", f"{s}.frames")
        splits[s] = read_corpus(run.out / "corpus" / s, vocab)
    text_train = read_text(run.need("corpus", "text_train.txt"))
    text_dev = read_text(run.need("corpus", "text_dev.txt"))
    return Data(vocab, splits["train"], splits["dev"], splits["test"], text_train, text_dev, synth_config(run.cfg))


def load_lm(run: Run, name: str = "lm") -> RnnLm:
    arrays, meta = load_checkpoint(run.need("lm", f"{name}.ckpt"))
    from .params import ParamStore

    store = ParamStore(next(iter(arrays.values())).dtype.newbyteorder("="))
    for n, a in arrays.items():
        store.add(n, a.shape, value=a)
    return RnnLm(LmConfig(**meta["lm"]), store)


def load_system(run: Run, mode: str) -> ModelBundle:
    return load_bundle(run.need("asr", f"{mode}.ckpt"))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(run: Run, args) -> None:
    data = make_data(run.cfg)
    for split in ("train",) + SPLITS:
        for p in write_corpus(run.path("corpus", split), getattr(data, split)):
            run.wrote(p)
    write_text(run.path("corpus", "text_train.txt"), data.text_train)
    write_text(run.path("corpus", "text_dev.txt"), data.text_dev)
    run.wrote(run.out / "corpus" / "text_train.txt")
    run.wrote(run.out / "corpus" / "text_dev.txt")
    data.vocab.save(run.path("corpus", "vocab.txt"))
    run.wrote(run.out / "corpus" / "vocab.txt")
    run.write_json(run.path("corpus", "stats.json"), {
        "train": len(data.train), "dev": len(data.dev), "test": len(data.test),
        "text_train": len(data.text_train), "text_dev": len(data.text_dev),
        "text_dropped_by_coverage": data.dropped_text, "vocab_size": len(data.vocab),
    })
    print(f"corpus: {len(data.train)} train, {len(data.dev)} dev, {len(data.test)} test, "
          f"{len(data.text_train)} text lines, V={len(data.vocab)}")


def cmd_train_lm(run: Run, args) -> None:
    data = load_data(run)
    names = ["lm", "second_lm"] if args.which == "both" else [args.which]
    for name in names:
        section = run.cfg.lm if name == "lm" else run.cfg.second_lm
        lm, hist = train_external_lm(section, data, run.cfg.seed, name)
        p = run.path("lm", f"{name}.ckpt")
        save_checkpoint(p, lm.store.arrays(), {"lm": lm.cfg.to_dict(), "config": run.cfg.to_dict()})
        run.wrote(p)
        run.write_json(run.path("lm", f"{name}.history.json"), {"config": run.cfg.to_dict(), **hist})
        print(f"{name}: dev ppl {hist['best_dev_ppl']:.4f} (unigram {hist['unigram_dev_ppl']:.4f}, "
              f"V={hist['vocab_size']})")


def cmd_train_asr(run: Run, args) -> None:
    mode = args.mode
    data = load_data(run)
    lm = load_lm(run) if mode in ("shallow", "deep", "cold", "lower_layer") else None
    baseline = load_system(run, "none") if mode in ("shallow", "deep", "lower_layer") else None
    bundle, hist = train_mode(mode, run.cfg, data, lm, baseline)
    p = run.path("asr", f"{mode}.ckpt")
    save_bundle(p, bundle, {"config_hash": run.cfg.digest()})
    run.wrote(p)
    run.write_json(run.path("asr", f"{mode}.history.json"), {"config": run.cfg.to_dict(), **hist})
    best = hist.get("best") or {}
    print(f"{mode}: best epoch {hist.get('best_epoch')} dev greedy WER {best.get('dev_wer', float('nan')):.4f}")


def _tuning(run: Run, mode: str, bundle: ModelBundle, data: Data) -> dict:
    d = run.cfg.decode
    tuner = Tuner(bundle, data.dev, data.vocab, d.tune_beam, d.max_len, mode)
    base = run.out / "tune" / "none.json"
    if mode == "shallow" and base.exists():
        prev = json.loads(base.read_text())
        if prev.get("config_hash") == run.cfg.digest():
            run.need("tune", "none.json")
            tuner.results.update({(r["lm_weight"], r["insertion_reward"], r["coverage_weight"]): r["dev_wer"]
                                  for r in prev["grid"] if r["lm_weight"] == 0})
    lm_grid = d.lm_weights if mode == "shallow" else [0.0]
    return tuner.run(lm_grid, d.insertion_rewards, d.coverage_weights)


def cmd_tune(run: Run, args) -> None:
    from .plotting import tuning_curve

    mode = args.mode
    data = load_data(run)
    bundle = load_system(run, mode)
    tuned = _tuning(run, mode, bundle, data)
    tuned.update(mode=mode, config=run.cfg.to_dict(), config_hash=run.cfg.digest())
    run.write_json(run.path("tune", f"{mode}.json"), tuned)
    knob = "lm_weight" if mode == "shallow" else "insertion_reward"
    run.wrote(tuning_curve(tuned["grid"], run.path("tune", f"{mode}.png"), knob, MODE_LABELS.get(mode, mode)))
    print(f"{mode}: lm_weight={tuned['lm_weight']} insertion_reward={tuned['insertion_reward']} "
          f"coverage_weight={tuned['coverage_weight']} dev WER {tuned['dev_wer']:.4f}")


def _knobs(run: Run, mode: str) -> dict:
    p = run.out / "tune" / f"{mode}.json"
    if not p.exists():
        log.warning("no tuning result for %s; decoding with zero knobs", mode)
        return {}
    return json.loads(run.need("tune", f"{mode}.json").read_text())


def cmd_decode(run: Run, args) -> None:
    mode = args.mode
    data = load_data(run)
    bundle = load_system(run, mode)
    dcfg = decode_config(run.cfg, _knobs(run, mode), mode)
    for split in args.splits:
        records = decode_records(bundle, getattr(data, split), data.vocab, dcfg)
        p = run.path("decode", f"{mode}.{split}.nbest.jsonl")
        write_nbest(p, records)
        run.wrote(p)
        unfinished = sum(not r["finished"] for r in records)
        rate = top1_wer(data.refs(split), records).rate
        print(f"{mode} {split}: WER {rate:.4f} ({len(records)} utterances, {unfinished} unfinished)")


def cmd_rescore(run: Run, args) -> None:
    mode = args.mode
    vocab = load_vocab(run)
    refs_dev = {u.id: u.text for u in read_corpus(run.out / "corpus" / "dev", vocab)}
    second = load_lm(run, "second_lm")
    scorer = lm_text_scorer(second, vocab)
    nbests = {s: read_nbest(run.need("decode", f"{mode}.{s}.nbest.jsonl")) for s in SPLITS}
    weight, dev_rate = tune_rescoring_weight(refs_dev, nbests["dev"], scorer, run.cfg.decode.rescore_weights)
    for s in SPLITS:
        p = run.path("rescore", f"{mode}.{s}.nbest.jsonl")
        write_nbest(p, [rescore_nbest(r, scorer, weight) for r in nbests[s]])
        run.wrote(p)
    run.write_json(run.path("rescore", f"{mode}.json"),
                   {"mode": mode, "weight": weight, "dev_wer": dev_rate, "config": run.cfg.to_dict()})
    print(f"{mode}: second-pass weight {weight} dev WER {dev_rate:.4f}")


def _evaluate(run: Run, mode: str) -> dict:
    vocab = load_vocab(run)
    report = {"mode": mode, "config": run.cfg.to_dict()}
    texts = []
    for s in SPLITS:
        refs = {u.id: u.text for u in read_corpus(run.out / "corpus" / s, vocab)}
        recs = read_nbest(run.need("decode", f"{mode}.{s}.nbest.jsonl"))
        report[s] = wer_summary(refs, recs)
        rp = run.out / "rescore" / f"{mode}.{s}.nbest.jsonl"
        if rp.exists():
            rrecs = read_nbest(run.need("rescore", f"{mode}.{s}.nbest.jsonl"))
            report.setdefault("rescore", {})[s] = wer_summary(refs, rrecs)
            report["rescore"][f"{s}_changed"] = sum(a["hyps"][0]["tokens"] != b["hyps"][0]["tokens"]
                                                    for a, b in zip(recs, rrecs))
        by_id = {r["id"]: r for r in recs}
        for uid, ref in refs.items():
            texts.append(f"{s} {uid}\n{aligned_table(ref, by_id[uid]['hyps'][0]['text'])}\n")
    knobs = _knobs(run, mode)
    report["knobs"] = {k: knobs.get(k, 0.0) for k in ("lm_weight", "insertion_reward", "coverage_weight")}
    report["tuning"] = knobs.get("grid", [])
    rj = run.out / "rescore" / f"{mode}.json"
    if rj.exists() and "rescore" in report:
        report["rescore"]["weight"] = json.loads(rj.read_text())["weight"]
    hp = run.out / "asr" / f"{mode}.history.json"
    if hp.exists():
        report["best_epoch"] = json.loads(hp.read_text()).get("best_epoch")
    run.write_json(run.path("eval", f"{mode}.json"), report)
    ap = run.path("eval", f"{mode}.align.txt")
    ap.write_text("\n".join(texts), encoding="utf-8")
    run.wrote(ap)
    return report


def cmd_evaluate(run: Run, args) -> None:
    r = _evaluate(run, args.mode)
    for s in SPLITS:
        line = f"{args.mode} {s}: WER {r[s]['top1']['rate']:.4f} (oracle {r[s]['oracle']['rate']:.4f})"
        if "rescore" in r:
            line += f" rescored {r['rescore'][s]['top1']['rate']:.4f}"
        print(line)


STAGES = ("train-asr", "tune", "decode", "rescore", "evaluate")


def _done(run: Run, command: str, mode: str | None = None) -> bool:
    p = run.out / "manifests" / (command + (f".{mode}" if mode else "") + ".json")
    if not p.exists():
        return False
    m = json.loads(p.read_text())
    return m.get("config_hash") == run.cfg.digest() and all((run.out / o).exists() for o in m["outputs"])


def _sub(run: Run, command: str, mode: str | None = None, **kw) -> None:
    if _done(run, command, mode):
        return
    sub = Run(run.cfg, run.out, command, mode)
    args = argparse.Namespace(mode=mode, splits=list(SPLITS), which="both", **kw)
    COMMANDS[command](sub, args)
    sub.finish()


def cmd_compare(run: Run, args) -> None:
    """Run every missing stage for all modes, then emit the comparison table and figures."""
    from .plotting import training_curves, wer_bars

    modes = [m for m in run.cfg.modes]
    if "none" not in modes:
        modes.insert(0, "none")
    _sub(run, "gen-corpus")
    _sub(run, "train-lm")
    for mode in ["none"] + [m for m in modes if m != "none"]:
        for stage in STAGES:
            _sub(run, stage, mode)
    metrics = {"config": run.cfg.to_dict(), "config_hash": run.cfg.digest(), "systems": {}}
    histories = {}
    for mode in ["none"] + [m for m in modes if m != "none"]:
        metrics["systems"][mode] = json.loads(run.need("eval", f"{mode}.json").read_text())
        hp = run.out / "asr" / f"{mode}.history.json"
        if hp.exists():
            histories[mode] = json.loads(hp.read_text())
    table = format_table(metrics)
    run.write_json(run.path("compare", "metrics.json"), metrics)
    tp = run.path("compare", "table.txt")
    tp.write_text(table, encoding="utf-8")
    run.wrote(tp)
    run.wrote(wer_bars(metrics, run.path("compare", "wer.png")))
    run.wrote(training_curves(histories, run.path("compare", "training.png")))
    print(table, end="")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-lm": cmd_train_lm,
    "train-asr": cmd_train_asr,
    "tune": cmd_tune,
    "decode": cmd_decode,
    "rescore": cmd_rescore,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lasfuse", description="LAS training with external language-model integration")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("train-asr", "tune", "decode", "rescore", "evaluate"):
            sp.add_argument("--mode", choices=MODES, required=True)
        if name == "decode":
            sp.add_argument("--split", dest="splits", action="append", choices=SPLITS)
        if name == "train-lm":
            sp.add_argument("--which", choices=("lm", "second_lm", "both"), default="both")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else from_dict({})
        if args.seed is not None:
            tree = cfg.to_dict()
            tree["seed"] = args.seed
            cfg = from_dict(tree)
        if getattr(args, "splits", None) is None:
            args.splits = list(SPLITS)
        run = Run(cfg, args.out, args.command, getattr(args, "mode", None))
        COMMANDS[args.command](run, args)
        run.finish()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DecodeError, CoverageError) as exc:
        print(f"decode failed: {exc}", file=sys.stderr)
        return EXIT_DECODE
    except MissingArtifact as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    return 0


if __name__ == "__main__":
    sys.exit(main())
