import copy
import json

import pytest
import yaml

from lasfuse import cli
from lasfuse.config import ConfigError, from_dict
from lasfuse.decoding import DecodeError
from lasfuse.training import EARLY_MODES, schedule

from conftest import TINY


def _write_cfg(tmp_path, tree, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(tree), encoding="utf-8")
    return p


@pytest.fixture(scope="module")
def compared(tmp_path_factory):
    """One full tiny comparison run shared by the artifact checks."""
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root, TINY)
    out = root / "run"
    assert cli.main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_compare_writes_table_and_figures(compared):
    _, out = compared
    table = (out / "compare" / "table.txt").read_text()
    for label in ("none", "shallow", "deep", "cold", "lower_layer", "multitask"):
        assert (out / "eval" / f"{label}.json").exists()
    assert len(table.strip().splitlines()) >= 7
    for fig in ("wer.png", "training.png"):
        assert (out / "compare" / fig).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (out / "tune" / "shallow.png").exists()


def test_artifacts_embed_config_and_manifests(compared):
    cfg_path, out = compared
    metrics = json.loads((out / "compare" / "metrics.json").read_text())
    assert from_dict(metrics["config"]).to_dict() == from_dict(TINY).to_dict()
    for name in ("gen-corpus", "train-lm", "train-asr.none", "tune.shallow", "decode.deep", "evaluate.cold"):
        m = json.loads((out / "manifests" / f"{name}.json").read_text())
        assert m["config_hash"] == metrics["config_hash"] and m["seed"] == TINY["seed"]
        assert m["outputs"]
    m = json.loads((out / "manifests" / "decode.none.json").read_text())
    assert "asr/none.ckpt" in m["inputs"]


def test_shallow_tuning_sweeps_lambda_grid(compared):
    _, out = compared
    tuned = json.loads((out / "tune" / "shallow.json").read_text())
    assert {r["lm_weight"] for r in tuned["grid"]} == set(TINY["decode"]["lm_weights"])
    best = min(r["dev_wer"] for r in tuned["grid"])
    assert tuned["dev_wer"] == best


def test_oracle_never_above_top1_in_reports(compared):
    _, out = compared
    for mode in ("none", "shallow", "deep", "cold", "lower_layer", "multitask"):
        r = json.loads((out / "eval" / f"{mode}.json").read_text())
        for s in ("dev", "test"):
            assert r[s]["oracle"]["rate"] <= r[s]["top1"]["rate"]


def test_identical_runs_identical_metrics(compared, tmp_path):
    cfg, out = compared
    out2 = tmp_path / "again"
    assert cli.main(["compare", "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out / "compare" / "metrics.json").read_bytes() == (out2 / "compare" / "metrics.json").read_bytes()
    assert (out / "eval" / "shallow.json").read_bytes() == (out2 / "eval" / "shallow.json").read_bytes()


def test_compare_rerun_skips_finished_stages(compared, capsys):
    cfg, out = compared
    before = (out / "manifests" / "train-asr.none.json").read_text()
    assert cli.main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "manifests" / "train-asr.none.json").read_text() == before


def test_stepwise_subcommands(tmp_path, capsys):
    cfg = str(_write_cfg(tmp_path, TINY))
    out = str(tmp_path / "run")
    args = ["--config", cfg, "--out", out]
    assert cli.main(["gen-corpus", *args]) == 0
    assert cli.main(["train-lm", *args]) == 0
    assert cli.main(["train-asr", "--mode", "none", *args]) == 0
    assert cli.main(["tune", "--mode", "none", *args]) == 0
    assert cli.main(["decode", "--mode", "none", "--split", "dev", *args]) == 0
    assert cli.main(["decode", "--mode", "none", *args]) == 0
    assert cli.main(["rescore", "--mode", "none", *args]) == 0
    assert cli.main(["evaluate", "--mode", "none", *args]) == 0
    text = capsys.readouterr().out
    assert "WER" in text and "oracle" in text
    report = json.loads((tmp_path / "run" / "eval" / "none.json").read_text())
    assert "rescore" in report and report["config"]["seed"] == TINY["seed"]


def test_missing_artifact_exit_code(tmp_path, capsys):
    assert cli.main(["train-asr", "--mode", "none", "--out", str(tmp_path)]) == cli.EXIT_MISSING
    assert "missing input artifact" in capsys.readouterr().err


@pytest.mark.parametrize("tree, path", [
    ({"train": {"lr": "fast"}}, "train.lr"),
    ({"decode": {"beem": 4}}, "decode.beem"),
    ({"modes": ["none", "warm"]}, "modes[1]"),
    ({"train": {"batch_sizes": [8, 8]}}, "train.batch_sizes"),
])
def test_config_error_names_key_path(tmp_path, capsys, tree, path):
    cfg = _write_cfg(tmp_path, tree)
    assert cli.main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert path in capsys.readouterr().err
    with pytest.raises(ConfigError) as ei:
        from_dict(tree)
    assert ei.value.path == path


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, capsys):
    tree = copy.deepcopy(TINY)
    tree["train"]["lr"] = 1e38
    cfg = str(_write_cfg(tmp_path, tree))
    args = ["--config", cfg, "--out", str(tmp_path / "run")]
    assert cli.main(["gen-corpus", *args]) == 0
    assert cli.main(["train-asr", "--mode", "none", *args]) == cli.EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_decode_failure_exit_code(tmp_path, capsys, monkeypatch):
    cfg = str(_write_cfg(tmp_path, TINY))
    args = ["--config", cfg, "--out", str(tmp_path / "run")]
    for cmd in (["gen-corpus"], ["train-asr", "--mode", "none"]):
        assert cli.main([*cmd, *args]) == 0

    def boom(*a, **k):
        raise DecodeError("no hypotheses")

    monkeypatch.setattr(cli, "decode_records", boom)
    assert cli.main(["decode", "--mode", "none", *args]) == cli.EXIT_DECODE


def test_seed_override_changes_corpus(tmp_path):
    cfg = str(_write_cfg(tmp_path, TINY))
    for seed in (1, 2):
        assert cli.main(["gen-corpus", "--config", cfg, "--seed", str(seed), "--out", str(tmp_path / str(seed))]) == 0
    a = (tmp_path / "1" / "corpus" / "train.jsonl").read_bytes()
    b = (tmp_path / "2" / "corpus" / "train.jsonl").read_bytes()
    assert a != b


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_schedule_examples():
    assert schedule(7, "none", 1.0) == 1.0
    assert schedule(8, "none", 1.0) == 0.5
    assert schedule(9, "cold", 1.0) == 0.25
    assert schedule(4, "deep", 1.0) == 1.0
    assert schedule(5, "deep", 1.0) == 0.5
    assert schedule(5, "lower_layer", 2.0) == 1.0


def test_schedule_rejects_epoch_zero():
    with pytest.raises(ValueError):
        schedule(0, "none")


@pytest.mark.parametrize("mode", ["none", "shallow", "deep", "cold", "lower_layer", "multitask"])
def test_schedule_non_increasing(mode):
    rates = [schedule(e, mode, 0.003) for e in range(1, 30)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))
    hold = 7 if mode in EARLY_MODES else 4
    assert rates[hold - 1] == 0.003 and rates[hold] == 0.0015
