import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

TINY = {
    "seed": 3,
    "corpus": {"n_train": 160, "n_dev": 30, "n_test": 30, "n_text": 800, "n_lm_dev": 80, "vocab_size": 50,
               "feat_dim": 6},
    "model": {"enc_layers": 2, "enc_units": 8, "dec_units": 12, "emb_dim": 8, "att_dim": 8},
    "lm": {"emb_dim": 8, "units": 16, "proj_dim": 8, "epochs": 1},
    "second_lm": {"emb_dim": 8, "units": 24, "proj_dim": 8, "epochs": 1},
    "train": {"early_epochs": 2, "early_hold": 1, "late_epochs": 1, "late_hold": 1},
    "decode": {"beam": 3, "tune_beam": 3, "max_len": 20, "lm_weights": [0.0, 0.2], "insertion_rewards": [0.0, 0.5],
               "coverage_weights": [0.0, 0.02], "rescore_weights": [0.0, 0.5]},
}


@pytest.fixture(scope="session")
def tiny_cfg():
    from lasfuse.config import from_dict
    return from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    from lasfuse.experiment import make_data
    return make_data(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_lm(tiny_cfg, tiny_data):
    from lasfuse.experiment import train_external_lm
    return train_external_lm(tiny_cfg.lm, tiny_data, tiny_cfg.seed)[0]


@pytest.fixture(scope="session")
def tiny_baseline(tiny_cfg, tiny_data):
    from lasfuse.experiment import train_mode
    return train_mode("none", tiny_cfg, tiny_data)


# ---------------------------------------------------------------------------
# one summary line per acceptance criterion


_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    num, title = mark.args
    entry = _CRITERIA.setdefault(num, {"title": title, "ok": True, "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num} {e['title']}: {'PASS' if e['ok'] else 'FAIL'} "
                                    f"({e['tests']} checks)")
