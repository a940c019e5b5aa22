import csv
import json

import numpy as np
import pytest

from helpers import tiny_config
from sudokusens.classifiers import build_classifier, predict_proba, train_classifier
from sudokusens.config import METHODS
from sudokusens.experiment import (
    RATIO_SWEEP,
    ablation_table,
    ablation_variants,
    make_scenario,
    prepare_data,
    run_ablation,
    run_experiment,
)
from sudokusens.metrics import accuracy
from sudokusens.training import seed_everything


@pytest.fixture(scope="module")
def data():
    return prepare_data(tiny_config())


@pytest.fixture(scope="module")
def full_report(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    return run_experiment(tiny_config(methods=list(METHODS), output_dir=str(out)), data), out


def test_every_cell_reported_without_errors(full_report):
    report, _ = full_report
    keys = {(c["method"], c["coverage"], c["seed"], c["family"]) for c in report.cells}
    assert keys == {(m, cov, 0, "shallow") for m in METHODS for cov in (100.0, 50.0)}
    assert all(c["error"] is None for c in report.cells)
    assert all(0.0 <= c["accuracy"] <= 1.0 and 0.0 <= c["macro_f1"] <= 1.0 for c in report.cells)
    assert len(report.summary_rows()) == len(METHODS) * 2


def test_scenarios(data, full_report):
    report, _ = full_report
    sc = make_scenario(data, 50.0, 0)
    assert sc.mode == "sudoku" and sc.matrix.coverage_percent == 50.0
    hidden = {(c, tuple(e)) for c, e in sc.hidden}
    assert not hidden & {data.dataset.cell_of(cond) for cond in sc.train.conditions}
    assert {data.dataset.cell_of(cond) for cond in sc.test.conditions} == hidden
    assert make_scenario(data, 100.0, 0).mode == "in_dataset"
    assert all(c["split_mode"] == ("sudoku" if c["coverage"] == 50.0 else "in_dataset") for c in report.cells)


def test_synthetic_counts(full_report):
    report, _ = full_report
    for c in report.cells:
        uses_cvae = c["method"] not in ("basic", "conventional_aug", "sudokusens_minus_interp")
        if c["coverage"] == 100.0 or not uses_cvae:
            assert c["n_synthetic"] == (0 if c["method"] != "conventional_aug" else c["n_train"] * 2 // 3)
        else:
            # ratio 1 at 50%: as many unseen cells as seen, each filled to the average seen-cell size
            assert c["n_synthetic"] == c["n_train"] - c["n_synthetic"]


def test_basic_is_plain_supervised_training(data, full_report):
    report, _ = full_report
    cfg = tiny_config()
    sc = make_scenario(data, 50.0, 0)
    streams = seed_everything(0)
    model = build_classifier(cfg.classifier, sc.train.shapes, len(data.classes), streams.int_seed("classifier_init"))
    model, _ = train_classifier(model, (sc.train.tensors, data.labels(sc.train)), (sc.val.tensors, data.labels(sc.val)),
                                cfg.classifier, streams.numpy("classifier"), streams.int_seed("classifier"))
    acc = accuracy(predict_proba(model, sc.test.tensors).argmax(1), data.labels(sc.test))
    assert report.find(method="basic", coverage=50.0)[0]["accuracy"] == acc


def test_rerun_is_identical(data, full_report):
    report, _ = full_report
    again = run_experiment(tiny_config(methods=list(METHODS)), data)
    first, second = (json.loads(r.to_json(include_predictions=True)) for r in (report, again))
    assert second["cells"] == first["cells"] and second["diagnostics"] == first["diagnostics"]
    assert again.config_hash == report.config_hash  # output_dir is excluded from the hash


def test_output_files(full_report):
    report, out = full_report
    names = {"report.json", "metrics.csv", "summary.csv", "predictions.csv", "embedding_scatter.csv", "timings.json"}
    assert names <= {p.name for p in out.iterdir()}
    assert json.loads((out / "report.json").read_text())["config_hash"] == report.config_hash
    for name in ("metrics.csv", "summary.csv", "predictions.csv", "embedding_scatter.csv"):
        rows = list(csv.DictReader((out / name).open()))
        assert rows and all(r["config_hash"] for r in rows), name
    preds = list(csv.DictReader((out / "predictions.csv").open()))
    probs = np.array([[float(r[f"p_{c}"]) for c in report.config["classes"]] for r in preds])
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-5)
    diag = report.diagnostics[0]
    assert -1 <= diag["silhouette_before"] <= 1 and -1 <= diag["silhouette_after"] <= 1


def test_failures_are_recorded_and_the_sweep_continues(data):
    # 10% of a 3x4 grid keeps one cell, which orphans attribute values
    report = run_experiment(tiny_config(coverages=[10.0, 100.0], methods=["basic"]), data)
    bad, good = report.find(coverage=10.0), report.find(coverage=100.0)
    assert len(bad) == 1 and bad[0]["stage"] == "split" and "feasible" in bad[0]["error"]
    assert good[0]["error"] is None
    assert [r["coverage"] for r in report.summary_rows()] == [100.0]


def test_families_multiply_cells(data):
    report = run_experiment(tiny_config(coverages=[100.0], methods=["basic"],
                                        families=["shallow", "transformer_like"]), data)
    assert sorted(c["family"] for c in report.cells) == ["shallow", "transformer_like"]


def test_ratio_ablation(data, tmp_path):
    variants, _ = ablation_variants("ratio")
    assert [r for _, _, r in variants] == list(RATIO_SWEEP) == [0.0, 0.1, 1.0, 2.0, 5.0]
    report = run_ablation(tiny_config(coverages=[50.0], output_dir=str(tmp_path)), "ratio", data)
    n_synth = {c["variant"]: c["n_synthetic"] for c in report.cells}
    assert n_synth["ratio=0"] == 0
    assert n_synth["ratio=0.1"] < n_synth["ratio=1"] < n_synth["ratio=2"] < n_synth["ratio=5"]
    table = ablation_table(report)
    assert [row["metric"] for row in table] == ["accuracy", "macro_f1"]
    assert set(table[0]) >= {f"ratio={r:g}" for r in RATIO_SWEEP}
    assert (tmp_path / "ablation_ratio.csv").exists()
    with pytest.raises(ValueError):
        ablation_variants("dropout")
