"""`sudokusens` command line: one subcommand per pipeline stage plus full sweeps.

Stage commands work on a scenario, meaning a (coverage, seed) pair. The pair
fixes which Sudoku cells are hidden and how sessions split. Checkpoints record
that provenance, so later stages rebuild the same scenario from the header.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import cvae as cvae_mod
from .checkpoint import load_checkpoint, load_state_into, save_module
from .classifiers import build_classifier, classifier_from_header, classifier_header, predict_proba, train_classifier
from .config import ConfigError, RunConfig, config_hash, from_dict, load_config, to_jsonable
from .datamodel import atomic_write_text, read_manifest, save_dataset, segment_sessions
from .experiment import (
    PreparedData,
    Scenario,
    _csv,
    make_scenario,
    prepare_data,
    run_ablation,
    run_experiment,
)
from .features import SpectrogramSet, load_spectrograms, save_spectrograms
from .metrics import accuracy, macro_f1
from .satcl import encode_features, encoder_from_header, encoder_header, parameter_digest, train_satcl
from .synthgen import generate_dataset
from .training import seed_everything

log = logging.getLogger("sudokusens")

AUGMENTED_FILE = "augmented.json"


class StageError(RuntimeError):
    """A pipeline stage could not complete; maps to exit code 3."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), _parse_overrides(getattr(args, "set", None)))


def _scenario_args(args, cfg: RunConfig) -> tuple[float, int]:
    coverage = args.coverage if args.coverage is not None else cfg.coverages[-1]
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    return float(coverage), int(seed)


def _is_augmented(directory) -> bool:
    return (Path(directory) / AUGMENTED_FILE).exists()


def _prepared(cfg: RunConfig, data_dir) -> PreparedData:
    if not (Path(data_dir) / "manifest.json").exists():
        raise StageError(f"{data_dir} holds no dataset manifest")
    return prepare_data(replace(cfg, data_dir=str(data_dir)))


def _provenance(cfg: RunConfig, data_dir, sc: Scenario) -> dict:
    return {"config_hash": config_hash(cfg), "config": to_jsonable(cfg), "data_dir": str(Path(data_dir).resolve()),
            "coverage": sc.coverage, "seed": sc.seed, "hidden_cells": [[c, list(e)] for c, e in sc.hidden],
            "matrix": sc.matrix.to_json()}


def _training_set(cfg: RunConfig, data_dir, coverage, seed):
    """(PreparedData, Scenario, training SpectrogramSet, source data dir) for a plain or augmented dir."""
    if _is_augmented(data_dir):
        info = json.loads((Path(data_dir) / AUGMENTED_FILE).read_text(encoding="utf-8"))
        data = _prepared(cfg, info["source_data"])
        sc = make_scenario(data, info["coverage"], info["seed"])
        train, _ = load_spectrograms(data_dir)
        return data, sc, train, info["source_data"]
    data = _prepared(cfg, data_dir)
    sc = make_scenario(data, coverage, seed)
    return data, sc, sc.train, data_dir


def _load_encoder(path):
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "satcl_encoder":
        raise StageError(f"{path} is a {header.get('kind')!r} checkpoint, not an encoder")
    enc = load_state_into(encoder_from_header(header), tensors)
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc, header


def _features(encoder, specs: SpectrogramSet):
    return specs.tensors if encoder is None else encode_features(encoder, specs.tensors)[0]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    raw, factors = generate_dataset(cfg.generator)
    ds, rejected = segment_sessions(raw, cfg.segment.window_s, cfg.segment.overlap_s)
    ds = replace(ds, metadata=dict(ds.metadata, rejected_sessions=rejected))
    save_dataset(ds, args.out, config_hash(cfg))
    print(f"wrote {len(ds.sessions)} sessions ({ds.n_samples} samples) to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    if args.window_s is not None or args.hop_s is not None:
        stft = replace(cfg.stft, window_s=args.window_s or cfg.stft.window_s, hop_s=args.hop_s or cfg.stft.hop_s)
        cfg = replace(cfg, stft=stft)
    data = _prepared(cfg, args.data)
    out = args.out or args.data
    if not read_manifest(args.data).get("metadata", {}).get("segmentation") and Path(out) == Path(args.data):
        raise StageError("dataset is not segmented; pass --out to write a segmented copy")
    if Path(out) != Path(args.data):
        save_dataset(data.dataset, out, config_hash(cfg))
    root = save_spectrograms(out, data.specs, data.stft, [m.name for m in data.dataset.modalities],
                             {"config_hash": config_hash(cfg)})
    print(f"wrote spectrogram cache {root} shapes={data.specs.shapes}")
    return 0


def cmd_train_cvae(args) -> int:
    cfg = _config(args)
    data = _prepared(cfg, args.data)
    sc = make_scenario(data, *_scenario_args(args, cfg))
    streams = seed_everything(sc.seed)
    schema = data.dataset.schema
    model = cvae_mod.build_cvae(sc.train.shapes, schema, cfg.cvae, streams.int_seed("init"))
    model, curve = cvae_mod.train_cvae(model, sc.train, schema, cfg.cvae_optimizer, streams.numpy("training"),
                                       streams.torch("training"))
    header = cvae_mod.cvae_header(model) | _provenance(cfg, args.data, sc) | {"loss_curve": curve}
    save_module(args.out, "cvae", model, header)
    print(f"cvae trained on {len(sc.train)} samples; final loss {curve[-1]['total']:.4f}; wrote {args.out}")
    return 0


def cmd_interpolate(args) -> int:
    header, tensors = load_checkpoint(args.cvae)
    if header.get("kind") != "cvae":
        raise StageError(f"{args.cvae} is not a CVAE checkpoint")
    cfg = _restore(header["config"])
    model = load_state_into(cvae_mod.cvae_from_header(header), tensors)
    data = _prepared(cfg, header["data_dir"])
    sc = make_scenario(data, header["coverage"], header["seed"])
    interp = replace(cfg.interpolation, ratio=args.ratio, count=None) if args.ratio is not None else cfg.interpolation
    synth = cvae_mod.interpolate(model, sc.matrix, data.dataset.schema, data.dataset.class_attribute, interp,
                                 sc.avg_train_per_seen_cell, seed_everything(sc.seed).torch("sampling"))
    aug = sc.train if synth is None else SpectrogramSet.concat([sc.train, synth])
    names = [m.name for m in data.dataset.modalities]
    ghash = config_hash(cfg)
    save_spectrograms(args.out, aug, data.stft, names, {"config_hash": ghash})
    info = {"source_data": header["data_dir"], "coverage": sc.coverage, "seed": sc.seed,
            "ratio": interp.ratio, "count": interp.count, "per_cell": interp.per_cell(sc.avg_train_per_seen_cell),
            "n_real": len(sc.train), "n_synthetic": 0 if synth is None else len(synth),
            "cvae_checkpoint": str(Path(args.cvae).resolve()), "config_hash": ghash}
    atomic_write_text(Path(args.out) / AUGMENTED_FILE, json.dumps(info, indent=1, sort_keys=True))
    print(f"wrote {info['n_real']} real + {info['n_synthetic']} synthetic samples to {args.out}")
    return 0


def _restore(config: dict) -> RunConfig:
    return from_dict(RunConfig, config)


def cmd_train_satcl(args) -> int:
    cfg = _config(args)
    if args.freeze_mask:
        cfg = replace(cfg, satcl=replace(cfg.satcl, mask_mode="frozen"))
    data, sc, train, source = _training_set(cfg, args.data, *_scenario_args(args, cfg))
    streams = seed_everything(sc.seed)
    enc, curve = train_satcl(train, cfg.satcl, streams.numpy("satcl"), streams.int_seed("satcl_init"))
    header = encoder_header(enc) | _provenance(cfg, source, sc) | {
        "trained_on": str(Path(args.data).resolve()), "loss_curve": curve, "parameter_digest": parameter_digest(enc)}
    save_module(args.out, "satcl_encoder", enc, header)
    print(f"SA-TCL encoder trained on {len(train)} samples ({cfg.satcl.mask_mode} mask); wrote {args.out}")
    return 0


def cmd_train_classifier(args) -> int:
    cfg = _config(args)
    data, sc, train, source = _training_set(cfg, args.data, *_scenario_args(args, cfg))
    encoder, enc_header = _load_encoder(args.encoder) if args.encoder else (None, None)
    spec = replace(cfg.classifier, family=args.family or cfg.classifier.family)
    streams = seed_everything(sc.seed)
    tr = _features(encoder, train)
    model = build_classifier(spec, [x.shape[1:] for x in tr], len(data.classes), streams.int_seed("classifier_init"))
    model.classes = list(data.classes)
    val = (_features(encoder, sc.val), data.labels(sc.val)) if len(sc.val) else None
    model, history = train_classifier(model, (tr, data.labels(train)), val, spec, streams.numpy("classifier"),
                                      streams.int_seed("classifier"))
    header = classifier_header(model) | _provenance(cfg, source, sc) | {
        "trained_on": str(Path(args.data).resolve()), "history": history,
        "encoder": None if encoder is None else {"config_hash": enc_header["config_hash"],
                                                 "parameter_digest": enc_header["parameter_digest"]}}
    save_module(args.out, "classifier", model, header)
    print(f"{spec.family} classifier: best epoch {history.get('best_epoch')}; wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    header, tensors = load_checkpoint(args.classifier)
    if header.get("kind") != "classifier":
        raise StageError(f"{args.classifier} is not a classifier checkpoint")
    encoder, enc_header = _load_encoder(args.encoder) if args.encoder else (None, None)
    wanted = header.get("encoder")
    given = None if enc_header is None else {"config_hash": enc_header["config_hash"],
                                             "parameter_digest": enc_header["parameter_digest"]}
    if wanted != given and not args.force:
        raise StageError(f"encoder mismatch: classifier was trained with {wanted}, got {given} (use --force)")
    model = load_state_into(classifier_from_header(header), tensors)
    cfg = _restore(header["config"])
    data = _prepared(cfg, args.data or header["data_dir"])
    sc = make_scenario(data, header["coverage"], header["seed"])
    if args.split != sc.mode:
        raise StageError(f"scenario at {sc.coverage:g}% coverage uses the {sc.mode!r} split, not {args.split!r}")
    proba = predict_proba(model, _features(encoder, sc.test))
    truth = data.labels(sc.test)
    pred = proba.argmax(1)
    result = {"accuracy": accuracy(pred, truth), "macro_f1": macro_f1(pred, truth), "n_test": len(truth),
              "split": sc.mode, "coverage": sc.coverage, "seed": sc.seed, "config_hash": header["config_hash"]}
    print(json.dumps(result, sort_keys=True))
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / "evaluation.json", json.dumps(result, indent=1, sort_keys=True))
        rows = []
        classes = list(data.classes)
        for sid, ts, t, p in zip(sc.test.session_ids, sc.test.timestamps, truth, proba):
            row = {"sample_id": f"{sid}:{ts}", "true": classes[t], "predicted": classes[int(np.argmax(p))]}
            row.update({f"p_{c}": float(v) for c, v in zip(classes, p)})
            rows.append(row | {"config_hash": header["config_hash"]})
        atomic_write_text(out / "predictions.csv", _csv(rows))
    return 0


def _sweep_output(cfg: RunConfig, args) -> RunConfig:
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if not cfg.output_dir:
        raise ConfigError("output_dir: required (set it in the config or pass --out)")
    return cfg


def cmd_experiment(args) -> int:
    cfg = _sweep_output(_config(args), args)
    report = run_experiment(cfg, progress=None if args.quiet else lambda m: print(m, file=sys.stderr))
    for row in report.summary_rows():
        print(f"{row['method']:<24} {row['variant']:<14} cov={row['coverage']:>5g} {row['family']:<16} "
              f"acc={row['accuracy_mean']:.4f}±{row['accuracy_std']:.4f} f1={row['macro_f1_mean']:.4f}")
    failed = [c for c in report.cells if c.get("error")]
    if failed:
        print(f"{len(failed)} cells failed; see {cfg.output_dir}/report.json", file=sys.stderr)
        return 3
    return 0


def cmd_ablate(args) -> int:
    cfg = _sweep_output(_config(args), args)
    report = run_ablation(cfg, args.axis, progress=None if args.quiet else lambda m: print(m, file=sys.stderr))
    print((Path(cfg.output_dir) / f"ablation_{args.axis}.csv").read_text(encoding="utf-8"), end="")
    return 3 if any(c.get("error") for c in report.cells) else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sudokusens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True, scenario=False):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="YAML or JSON run configuration")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config field, e.g. satcl.epochs=5 (repeatable)")
        if scenario:
            p.add_argument("--coverage", type=float, help="coverage percent (default: last configured)")
            p.add_argument("--seed", type=int, help="scenario seed (default: first configured)")
        p.set_defaults(func=fn)
        return p

    p = add("synth-data", cmd_synth_data, "generate and segment the synthetic benchmark")
    p.add_argument("--out", required=True)

    p = add("preprocess", cmd_preprocess, "compute the spectrogram cache for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write a segmented copy plus cache here instead of in place")
    p.add_argument("--window-s", type=float, help="STFT window length in seconds")
    p.add_argument("--hop-s", type=float, help="STFT hop in seconds")

    p = add("train-cvae", cmd_train_cvae, "train the conditional VAE on a scenario's seen cells", scenario=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("interpolate", cmd_interpolate, "synthesize unseen cells and write an augmented set", config=False)
    p.add_argument("--cvae", required=True)
    p.add_argument("--ratio", type=float, help="synthetic per unseen cell / real per seen cell")
    p.add_argument("--out", required=True)

    p = add("train-satcl", cmd_train_satcl, "session-aware contrastive pre-training", scenario=True)
    p.add_argument("--data", required=True, help="dataset dir or augmented dir")
    p.add_argument("--out", required=True)
    p.add_argument("--freeze-mask", action="store_true", help="keep the frequency mask at its initialization")

    p = add("train-classifier", cmd_train_classifier, "train a downstream classifier", scenario=True)
    p.add_argument("--data", required=True, help="dataset dir or augmented dir")
    p.add_argument("--encoder", help="frozen SA-TCL encoder checkpoint")
    p.add_argument("--family", choices=("shallow", "deepsense_like", "transformer_like"))
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "score a classifier on the scenario's test split", config=False)
    p.add_argument("--classifier", required=True)
    p.add_argument("--encoder")
    p.add_argument("--data", help="dataset dir (default: the one recorded in the checkpoint)")
    p.add_argument("--split", choices=("sudoku", "in_dataset"), default="sudoku")
    p.add_argument("--force", action="store_true", help="ignore encoder/classifier provenance mismatch")
    p.add_argument("--out", help="directory for evaluation.json and predictions.csv")

    for name, fn, text in (("experiment", cmd_experiment, "full method x coverage x seed sweep"),
                           ("ablate", cmd_ablate, "ratio, SA-TCL or frequency-mask ablation")):
        p = add(name, fn, text)
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--quiet", action="store_true")
        if name == "ablate":
            p.add_argument("--axis", required=True, choices=("ratio", "satcl", "mask"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (StageError, FileNotFoundError, ValueError, RuntimeError, KeyError) as err:
        print(f"{args.command} failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
