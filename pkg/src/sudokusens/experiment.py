"""Coverage-sweep experiments: split, interpolate, contrastive pre-training, classify, score."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import cvae as cvae_mod
from .classifiers import build_classifier, predict_proba, train_classifier
from .config import RunConfig, config_hash, to_jsonable
from .datamodel import (
    Dataset,
    SplitAssignment,
    SudokuMatrix,
    atomic_write_text,
    build_sudoku_matrix,
    choose_hidden_cells,
    load_dataset,
    make_split,
    mask_cells,
    segment_sessions,
)
from .features import (
    SpectrogramSet,
    conventional_augment,
    load_spectrograms,
    select_split,
    stft_configs_for,
    stft_dataset,
)
from .features import config_hash as stft_hash
from .metrics import accuracy, macro_f1, project_embeddings, silhouette
from .satcl import encode_features, train_satcl
from .synthgen import generate_dataset
from .training import seed_everything

log = logging.getLogger(__name__)

RATIO_SWEEP = (0.0, 0.1, 1.0, 2.0, 5.0)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    dataset: Dataset  # segmented
    specs: SpectrogramSet  # every real sample
    stft: tuple
    rejected: list = field(default_factory=list)

    @property
    def classes(self) -> tuple[str, ...]:
        return self.dataset.classes

    def labels(self, specs: SpectrogramSet) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[c] for c in specs.class_labels], dtype=np.int64)


def prepare_data(cfg: RunConfig) -> PreparedData:
    if cfg.data_dir:
        raw = load_dataset(cfg.data_dir)
        if raw.metadata.get("segmentation"):
            ds, rejected = raw, []
        else:
            ds, rejected = segment_sessions(raw, cfg.segment.window_s, cfg.segment.overlap_s)
    else:
        raw, _ = generate_dataset(cfg.generator)
        ds, rejected = segment_sessions(raw, cfg.segment.window_s, cfg.segment.overlap_s)
    stft = stft_configs_for([m.sample_rate_hz for m in ds.modalities], cfg.stft.window_s, cfg.stft.hop_s,
                            cfg.stft.representation)
    cache = Path(cfg.data_dir or "") / "stft" / stft_hash(stft) / "index.json"
    if cfg.data_dir and not rejected and raw is ds and cache.exists():
        specs, _ = load_spectrograms(cfg.data_dir, stft_hash(stft))  # written by `preprocess`
    else:
        specs = stft_dataset(ds, stft)
    return PreparedData(ds, specs, stft, rejected)


@dataclass
class Scenario:
    coverage: float
    seed: int
    matrix: SudokuMatrix
    split: SplitAssignment
    mode: str
    train: SpectrogramSet
    val: SpectrogramSet
    test: SpectrogramSet
    hidden: list

    @property
    def avg_train_per_seen_cell(self) -> float:
        cells = {(c, tuple(e)) for c, e in self.matrix.seen_cells}
        return len(self.train) / max(len(cells), 1)


def make_scenario(data: PreparedData, coverage: float, seed: int) -> Scenario:
    """Hide cells down to ``coverage`` (seeded) and split: sudoku mode below 100%, in-dataset at 100%."""
    full = build_sudoku_matrix(data.dataset)
    rng = seed_everything(seed).numpy("data")
    hidden = choose_hidden_cells(full, data.dataset, coverage, rng)
    matrix, _ = mask_cells(full, data.dataset, hidden) if hidden else (full, data.dataset)
    mode = "sudoku" if matrix.unseen_cells else "in_dataset"
    split = make_split(data.dataset, matrix, mode)
    return Scenario(coverage, seed, matrix, split, mode, select_split(data.specs, split.train),
                    select_split(data.specs, split.val), select_split(data.specs, split.test), hidden)


# ---------------------------------------------------------------------------
# stages with per-scenario caching
# ---------------------------------------------------------------------------


class _Stages:
    def __init__(self, cfg: RunConfig, data: PreparedData):
        self.cfg = cfg
        self.data = data
        self.cache: dict = {}
        self.timings: dict[str, float] = {}

    def _timed(self, name, fn):
        t0 = time.perf_counter()
        out = fn()
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0
        return out

    def cvae(self, sc: Scenario):
        key = ("cvae", sc.coverage, sc.seed)
        if key not in self.cache:
            streams = seed_everything(sc.seed)
            schema = self.data.dataset.schema
            model = cvae_mod.build_cvae(sc.train.shapes, schema, self.cfg.cvae, streams.int_seed("init"))
            self.cache[key] = self._timed("cvae", lambda: cvae_mod.train_cvae(
                model, sc.train, schema, self.cfg.cvae_optimizer, streams.numpy("training"),
                streams.torch("training"))[0])
        return self.cache[key]

    def synthetic(self, sc: Scenario, ratio: float | None):
        interp = self.cfg.interpolation if ratio is None else replace(self.cfg.interpolation, ratio=ratio, count=None)
        key = ("synth", sc.coverage, sc.seed, interp)
        if key not in self.cache:
            n = interp.per_cell(sc.avg_train_per_seen_cell)
            if not sc.matrix.unseen_cells or n == 0:
                self.cache[key] = None
            else:
                model = self.cvae(sc)
                gen = seed_everything(sc.seed).torch("sampling")
                self.cache[key] = self._timed("interpolate", lambda: cvae_mod.interpolate(
                    model, sc.matrix, self.data.dataset.schema, self.data.dataset.class_attribute, interp,
                    sc.avg_train_per_seen_cell, gen))
        return self.cache[key]

    def augmented(self, sc: Scenario, ratio: float | None) -> SpectrogramSet:
        synth = self.synthetic(sc, ratio)
        return sc.train if synth is None else SpectrogramSet.concat([sc.train, synth])

    def encoder(self, sc: Scenario, ratio: float | None, mask_mode: str, use_synth: bool = True):
        key = ("satcl", sc.coverage, sc.seed, ratio if use_synth else "none", mask_mode)
        if key not in self.cache:
            train = self.augmented(sc, ratio) if use_synth else sc.train
            cfg = replace(self.cfg.satcl, mask_mode=mask_mode)
            streams = seed_everything(sc.seed)
            self.cache[key] = self._timed("satcl", lambda: train_satcl(
                train, cfg, streams.numpy("satcl"), streams.int_seed("satcl_init"))[0])
        return self.cache[key]

    def conventional(self, sc: Scenario) -> SpectrogramSet:
        key = ("conv", sc.coverage, sc.seed)
        if key not in self.cache:
            rng = seed_everything(sc.seed).numpy("augment")
            ds = self.data.dataset
            wanted = {sid: set(idx) for sid, idx in sc.split.train.items() if idx}
            samples = []
            for sess in ds.sessions:
                keep = wanted.get(sess.session_id)
                if not keep:
                    continue
                order = sorted(sess.samples, key=lambda s: s.timestamp_index)
                for k, s in enumerate(order):
                    if k in keep:
                        samples.extend(conventional_augment(s, rng, self.cfg.conventional_copies))
            from .datamodel import Session

            by_session: dict[str, list] = {}
            for s in samples:
                by_session.setdefault(s.session_id, []).append(s)
            sessions = []
            for sid, ss in by_session.items():
                ss = [replace(s, timestamp_index=i) for i, s in enumerate(ss)]
                sessions.append(Session(sid, ss[0].class_label, ss[0].condition, tuple(ss)))
            aug = stft_dataset(ds.with_sessions(sessions), self.data.stft)
            aug.synthetic[:] = True
            self.cache[key] = SpectrogramSet.concat([sc.train, aug])
        return self.cache[key]


def _method_plan(method: str, ratio: float | None):
    """(uses interpolation, uses SA-TCL, mask mode)."""
    plans = {
        "basic": (False, False, None),
        "conventional_aug": (False, False, None),
        "sudokusens": (True, True, "learnable"),
        "sudokusens_minus_satcl": (True, False, None),
        "sudokusens_minus_interp": (False, True, "learnable"),
        "sudokusens_frozen_mask": (True, True, "frozen"),
        "sudokusens_no_mask": (True, True, "none"),
    }
    return plans[method]


def _classify(stages: _Stages, sc: Scenario, train: SpectrogramSet, encoder, family: str, seed: int):
    cfg, data = stages.cfg, stages.data

    def feats(specs):
        if encoder is None:
            return specs.tensors
        return encode_features(encoder, specs.tensors)[0]

    tr_x, va_x, te_x = feats(train), feats(sc.val), feats(sc.test)
    spec = replace(cfg.classifier, family=family)
    streams = seed_everything(seed)
    model = build_classifier(spec, [x.shape[1:] for x in tr_x], len(data.classes), streams.int_seed("classifier_init"))
    model.classes = list(data.classes)
    val = (va_x, data.labels(sc.val)) if len(sc.val) else None
    model, history = stages._timed("classifier", lambda: train_classifier(
        model, (tr_x, data.labels(train)), val, spec, streams.numpy("classifier"), streams.int_seed("classifier")))
    proba = predict_proba(model, te_x)
    return model, history, proba


def run_cell(stages: _Stages, sc: Scenario, method: str, family: str, ratio: float | None = None) -> dict:
    use_interp, use_satcl, mask_mode = _method_plan(method, ratio)
    if method == "conventional_aug":
        train = stages.conventional(sc)
    elif use_interp:
        train = stages.augmented(sc, ratio)
    else:
        train = sc.train
    encoder = stages.encoder(sc, ratio, mask_mode, use_synth=use_interp) if use_satcl else None
    _, history, proba = _classify(stages, sc, train, encoder, family, sc.seed)
    truth = stages.data.labels(sc.test)
    pred = proba.argmax(1)
    return {
        "accuracy": accuracy(pred, truth),
        "macro_f1": macro_f1(pred, truth),
        "n_train": len(train),
        "n_synthetic": int(train.synthetic.sum()),
        "n_test": len(truth),
        "best_epoch": history["best_epoch"],
        "predictions": {"session_ids": sc.test.session_ids.tolist(), "timestamps": sc.test.timestamps.tolist(),
                        "truth": truth.tolist(), "proba": proba.round(6).tolist()},
    }


def embedding_diagnostic(specs: SpectrogramSet, encoder, seed: int = 0, max_sessions: int = 20) -> dict:
    """Session silhouette of raw flattened spectrograms (PCA-50) vs. normalized SA-TCL embeddings."""
    sessions = sorted(set(specs.session_ids.tolist()))
    if len(sessions) > max_sessions:
        rng = np.random.default_rng(seed)
        sessions = sorted(rng.choice(sessions, size=max_sessions, replace=False).tolist())
    rows = np.flatnonzero(np.isin(specs.session_ids, sessions))
    sub = specs.subset(rows)
    raw = np.concatenate(
        [((t - t.mean()) / (t.std() or 1.0)).reshape(len(t), -1) for t in sub.tensors], axis=1)
    raw_pts, _ = project_embeddings(raw, target_dim=min(50, raw.shape[1]), pca_dim=50)
    _, h = encode_features(encoder, sub.tensors)
    h = h / np.linalg.norm(h, axis=1, keepdims=True)
    after_pts, _ = project_embeddings(h, target_dim=min(50, h.shape[1]), pca_dim=50)
    labels = sub.session_ids
    scatter_before, _ = project_embeddings(raw_pts, 2)
    scatter_after, _ = project_embeddings(after_pts, 2)
    return {
        "silhouette_before": silhouette(raw_pts, labels),
        "silhouette_after": silhouette(after_pts, labels),
        "n_sessions": len(sessions),
        "n_points": len(rows),
        "scatter": {"session_ids": labels.tolist(), "before": scatter_before.round(6).tolist(),
                    "after": scatter_after.round(6).tolist()},
    }


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    cells: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def find(self, **keys) -> list[dict]:
        return [c for c in self.cells if all(c.get(k) == v for k, v in keys.items())]

    def mean(self, metric: str, **keys) -> float:
        vals = [c[metric] for c in self.find(**keys) if c.get("error") is None]
        if not vals:
            raise KeyError(f"no successful cells for {keys}")
        return float(np.mean(vals))

    def metric_rows(self) -> list[dict]:
        rows = []
        for c in self.cells:
            for metric in ("accuracy", "macro_f1"):
                rows.append({k: c.get(k) for k in ("method", "variant", "coverage", "seed", "family")}
                            | {"metric": metric, "value": c.get(metric), "error": c.get("error") or "",
                               "config_hash": c["config_hash"]})
        for d in self.diagnostics:
            for metric in ("silhouette_before", "silhouette_after"):
                rows.append({"method": d["method"], "variant": d.get("variant", ""), "coverage": d["coverage"],
                             "seed": d["seed"], "family": "", "metric": metric, "value": d.get(metric),
                             "error": d.get("error") or "", "config_hash": d["config_hash"]})
        return rows

    def summary_rows(self) -> list[dict]:
        groups: dict = {}
        for c in self.cells:
            if c.get("error") is None:
                groups.setdefault((c["method"], c["variant"], c["coverage"], c["family"]), []).append(c)
        rows = []
        for (method, variant, cov, fam), cs in sorted(groups.items(), key=lambda kv: (str(kv[0]))):
            acc = [c["accuracy"] for c in cs]
            f1 = [c["macro_f1"] for c in cs]
            rows.append({"method": method, "variant": variant, "coverage": cov, "family": fam, "n_seeds": len(cs),
                         "accuracy_mean": float(np.mean(acc)), "accuracy_std": float(np.std(acc)),
                         "macro_f1_mean": float(np.mean(f1)), "macro_f1_std": float(np.std(f1)),
                         "config_hash": self.config_hash})
        return rows

    def to_json(self, include_predictions: bool = False) -> str:
        cells = [c if include_predictions else {k: v for k, v in c.items() if k != "predictions"} for c in self.cells]
        diags = [{k: v for k, v in d.items() if k != "scatter"} for d in self.diagnostics]
        return json.dumps({"config_hash": self.config_hash, "config": self.config, "cells": cells,
                           "diagnostics": diags}, indent=1, sort_keys=True)

    def write(self, directory) -> None:
        """report.json, metrics.csv, summary.csv, predictions.csv, embedding_scatter.csv, timings.json."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        atomic_write_text(d / "report.json", self.to_json())
        atomic_write_text(d / "metrics.csv", _csv(self.metric_rows()))
        atomic_write_text(d / "summary.csv", _csv(self.summary_rows()))
        atomic_write_text(d / "predictions.csv", _csv(self.prediction_rows()))
        scatter = []
        for diag in self.diagnostics:
            sc = diag.get("scatter")
            if not sc:
                continue
            for stage in ("before", "after"):
                for sid, (x, y) in zip(sc["session_ids"], sc[stage]):
                    scatter.append({"coverage": diag["coverage"], "seed": diag["seed"], "stage": stage,
                                    "session_id": sid, "x": x, "y": y, "config_hash": diag["config_hash"]})
        atomic_write_text(d / "embedding_scatter.csv", _csv(scatter))
        atomic_write_text(d / "timings.json", json.dumps(self.timings, indent=1, sort_keys=True))

    def prediction_rows(self) -> list[dict]:
        rows = []
        classes = self.config.get("classes", [])
        for c in self.cells:
            p = c.get("predictions")
            if not p:
                continue
            for sid, ts, t, pr in zip(p["session_ids"], p["timestamps"], p["truth"], p["proba"]):
                row = {"method": c["method"], "variant": c["variant"], "coverage": c["coverage"], "seed": c["seed"],
                       "family": c["family"], "sample_id": f"{sid}:{ts}",
                       "true": classes[t] if classes else t,
                       "predicted": classes[int(np.argmax(pr))] if classes else int(np.argmax(pr))}
                for k, v in enumerate(pr):
                    row[f"p_{classes[k] if classes else k}"] = v
                row["config_hash"] = c["config_hash"]
                rows.append(row)
        return rows


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _cell_hash(global_hash: str, **keys) -> str:
    return config_hash({"run": global_hash, **{k: str(v) for k, v in keys.items()}}, exclude=())


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def run_experiment(cfg: RunConfig, data: PreparedData | None = None,
                   variants: list[tuple[str, str, float | None]] | None = None,
                   progress: Callable[[str], None] | None = None) -> ExperimentReport:
    """Run every (method, coverage, seed, family) cell.

    ``variants`` lists (method, variant label, interpolation ratio or None) and
    defaults to the configured methods at the configured ratio. Stage failures are
    recorded on the cell and the sweep continues.
    """
    t_start = time.perf_counter()
    data = data or prepare_data(cfg)
    variants = variants or [(m, "default", None) for m in cfg.methods]
    ghash = config_hash(cfg)
    report = ExperimentReport(to_jsonable(cfg) | {"classes": list(data.classes)}, ghash)
    report.config["rejected_sessions"] = data.rejected
    stages = _Stages(cfg, data)
    for coverage in cfg.coverages:
        for seed in cfg.seeds:
            try:
                sc = make_scenario(data, coverage, seed)
            except Exception as err:  # noqa: BLE001 - recorded on every cell of the scenario
                log.exception("scenario %s/%s failed", coverage, seed)
                for method, variant, _ in variants:
                    for family in cfg.classifier_families:
                        report.cells.append({"method": method, "variant": variant, "coverage": coverage,
                                             "seed": seed, "family": family, "stage": "split",
                                             "error": f"{type(err).__name__}: {err}",
                                             "config_hash": _cell_hash(ghash, m=method, v=variant, c=coverage,
                                                                       s=seed, f=family)})
                continue
            for method, variant, ratio in variants:
                for family in cfg.classifier_families:
                    cell = {"method": method, "variant": variant, "coverage": coverage, "seed": seed,
                            "family": family, "hidden_cells": [[c, list(e)] for c, e in sc.hidden],
                            "split_mode": sc.mode, "error": None,
                            "config_hash": _cell_hash(ghash, m=method, v=variant, c=coverage, s=seed, f=family)}
                    if progress:
                        progress(f"coverage={coverage} seed={seed} {method}/{variant} {family}")
                    try:
                        cell.update(run_cell(stages, sc, method, family, ratio))
                    except Exception as err:  # noqa: BLE001
                        log.exception("cell failed")
                        cell["error"] = f"{type(err).__name__}: {err}"
                    report.cells.append(cell)
            if cfg.diagnostics and any(_method_plan(m, r)[1] for m, _, r in variants):
                method, variant, ratio = next((m, v, r) for m, v, r in variants if _method_plan(m, r)[1])
                use_interp, _, mask_mode = _method_plan(method, ratio)
                diag = {"method": method, "variant": variant, "coverage": coverage, "seed": seed,
                        "config_hash": _cell_hash(ghash, m=method, v=variant, c=coverage, s=seed, d="diag")}
                try:
                    enc = stages.encoder(sc, ratio, mask_mode, use_synth=use_interp)
                    real = SpectrogramSet.concat([sc.train, sc.val])
                    diag.update(embedding_diagnostic(real, enc, seed))
                except Exception as err:  # noqa: BLE001
                    diag["error"] = f"{type(err).__name__}: {err}"
                report.diagnostics.append(diag)
            # free per-scenario models
            stages.cache = {k: v for k, v in stages.cache.items() if k[1:3] != (coverage, seed)}
    report.timings = dict(stages.timings, total=time.perf_counter() - t_start)
    if cfg.output_dir:
        report.write(cfg.output_dir)
    return report


def ablation_variants(axis: str) -> tuple[list[tuple[str, str, float | None]], dict]:
    """Variant lists mirroring the interpolation-ratio, SA-TCL and frequency-mask ablations."""
    if axis == "ratio":
        return [("sudokusens", f"ratio={r:g}", r) for r in RATIO_SWEEP], {}
    if axis == "satcl":
        return [("sudokusens_minus_satcl", "without_satcl", None), ("sudokusens", "with_satcl", None)], {}
    if axis == "mask":
        return [("sudokusens_no_mask", "without_mask", None), ("sudokusens_frozen_mask", "frozen_mask", None),
                ("sudokusens", "learnable_mask", None)], {}
    raise ValueError(f"unknown ablation axis {axis!r}")


def ablation_table(report: ExperimentReport) -> list[dict]:
    """Rows shaped like the ablation tables: family x metric, one column per variant."""
    variants = list(dict.fromkeys(c["variant"] for c in report.cells))
    rows = []
    for cov in dict.fromkeys(c["coverage"] for c in report.cells):
        for fam in dict.fromkeys(c["family"] for c in report.cells):
            for metric in ("accuracy", "macro_f1"):
                row = {"coverage": cov, "family": fam, "metric": metric}
                for v in variants:
                    try:
                        row[v] = report.mean(metric, coverage=cov, family=fam, variant=v)
                    except KeyError:
                        row[v] = None
                row["config_hash"] = report.config_hash
                rows.append(row)
    return rows


def run_ablation(cfg: RunConfig, axis: str, data: PreparedData | None = None, progress=None) -> ExperimentReport:
    variants, _ = ablation_variants(axis)
    report = run_experiment(replace(cfg, output_dir=None), data, variants, progress)
    if cfg.output_dir:
        report.write(cfg.output_dir)
        atomic_write_text(Path(cfg.output_dir) / f"ablation_{axis}.csv", _csv(ablation_table(report)))
    return report
