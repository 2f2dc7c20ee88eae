import csv

import numpy as np
import pytest

from prefpolicy.config import dumps_kv, load_kv, loads_kv
from prefpolicy.errors import ConfigError
from prefpolicy.evaluation import EvalRecord
from prefpolicy.experiment import ExperimentConfig, apply_axis, run_ablation
from prefpolicy.plotting import plot_ablation, plot_curves
from prefpolicy.report import write_ablation_csv, write_compare_csv
from prefpolicy.teachers import TeacherConfig
from prefpolicy.training import CplConfig


def tiny_experiment(**kw):
    base = dict(
        env="point_reach",
        episodes=30,
        n_pairs=120,
        teacher=TeacherConfig(epsilon=0.1),
        train=CplConfig(total_steps=16, checkpoint_every=2, hidden=(8, 8), batch_size=8, compute_dtype="float32"),
        eval_episodes=10,
        seeds=(0, 1),
    )
    return ExperimentConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def dropout_report():
    return run_ablation("dropout", [0.1, 0.25, 0.4, 0.5], tiny_experiment())


def test_dropout_sweep_has_four_cells(dropout_report):
    assert [c.value for c in dropout_report.cells] == [0.1, 0.25, 0.4, 0.5]
    for cell in dropout_report.cells:
        assert cell.status == "ok"
        assert 0.0 <= cell.metric <= 1.0 and len(cell.per_seed) == 2
        assert cell.record.success.shape == (2, 9)
    assert dropout_report.accuracy == 1.0
    assert 0.0 < dropout_report.equal_fraction < 1.0


def test_equal_pref_sweep_and_single_value():
    report = run_ablation("equal_pref", [True, False], tiny_experiment())
    assert [c.value for c in report.cells] == [True, False]
    single = run_ablation("dropout", [0.25], tiny_experiment())
    assert len(single.cells) == 1


def test_ablation_is_deterministic(dropout_report):
    again = run_ablation("dropout", [0.1, 0.25, 0.4, 0.5], tiny_experiment())
    for a, b in zip(dropout_report.cells, again.cells):
        assert np.array_equal(a.record.success, b.record.success)


def test_failed_cell_is_reported():
    cfg = tiny_experiment(train=CplConfig(total_steps=4, checkpoint_every=2, hidden=(8, 8), batch_size=8))
    report = run_ablation("dropout", [0.1], cfg)
    assert report.cells[0].status.startswith("failed")


def test_ablation_validation():
    with pytest.raises(ConfigError):
        run_ablation("lr", [1], tiny_experiment())
    with pytest.raises(ConfigError):
        run_ablation("dropout", [0.1], tiny_experiment(seeds=(0,)))
    assert apply_axis(tiny_experiment(), "equal_pref", True).train.include_equal is True


def test_ablation_csv_and_figure(dropout_report, tmp_path):
    path = write_ablation_csv(dropout_report, tmp_path / "abl.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == ["accuracy", "equal_fraction"] + ["cell"] * 4
    assert [r["value"] for r in rows[2:]] == ["0.1", "0.25", "0.4", "0.5"]
    fig = plot_ablation(dropout_report, tmp_path / "abl.svg")
    assert fig.stat().st_size > 1000
    first = fig.read_bytes()
    plot_ablation(dropout_report, tmp_path / "abl.svg")
    assert fig.read_bytes() == first


def test_compare_csv_and_curves(tmp_path):
    recs = {
        "cpl": EvalRecord("point_reach", 10, list(range(8)), np.full((2, 8), 0.6), [0, 1]),
        "bc": EvalRecord("point_reach", 10, list(range(8)), np.full((2, 8), 0.2), [0, 1]),
    }
    path = write_compare_csv(recs, tmp_path / "cmp.csv")
    with open(path) as fh:
        rows = {r["method"]: r for r in csv.DictReader(fh)}
    assert rows["cpl"]["metric"] == "0.6000" and rows["bc"]["metric"] == "0.2000"
    assert plot_curves(recs, tmp_path / "c.png").read_bytes()[:4] == b"\x89PNG"


def test_kv_config_roundtrip(tmp_path):
    values = {"env": "point_reach", "steps": 100, "lr": 3e-4, "include_equal": False, "seeds": [0, 1], "hidden": [8, 8]}
    assert loads_kv(dumps_kv(values)) == values
    text = "# comment\n\nfailure-rate = 0.5\nenv = drawer_pull\n"
    assert loads_kv(text) == {"failure_rate": 0.5, "env": "drawer_pull"}
    with pytest.raises(ConfigError):
        loads_kv("just words")
    with pytest.raises(ConfigError):
        load_kv(tmp_path / "missing.cfg")
