"""STFT preprocessing into (feature, time, frequency) tensors, the batched
spectrogram container used by every model, and the conventional-augmentation
baseline transforms.

DFT convention: forward, unnormalized, one-sided,
``X[k] = sum_n w[n] x[n] exp(-2j pi k n / N)`` for ``k = 0 .. N // 2``, with a
periodic Hann window ``w[n] = 0.5 - 0.5 cos(2 pi n / N)``.  Parseval therefore
reads ``|X[0]|^2 + 2 sum_{0<k<N/2} |X[k]|^2 + |X[N/2]|^2 = N sum (w x)^2`` for
even ``N``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import Dataset, Sample, atomic_write_bytes, atomic_write_text, read_manifest

REPRESENTATIONS = ("magnitude", "log_magnitude")


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 256
    hop_length: int = 128
    window: str = "hann"
    representation: str = "log_magnitude"

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_length:
            raise ValueError("need 0 < hop_length <= window_length")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1

    def n_frames(self, length: int) -> int:
        return 1 + (length - self.window_length) // self.hop_length


def stft_configs_for(rates: Sequence[float], window_s: float = 0.25, hop_s: float = 0.125,
                     representation: str = "log_magnitude") -> tuple[StftConfig, ...]:
    """Per-modality configs with a common frame duration, so time axes line up."""
    return tuple(
        StftConfig(int(round(window_s * r)), int(round(hop_s * r)), "hann", representation) for r in rates
    )


def config_hash(cfgs: Sequence[StftConfig]) -> str:
    blob = json.dumps([asdict(c) for c in cfgs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def window_function(cfg: StftConfig) -> np.ndarray:
    n = cfg.window_length
    if cfg.window == "rect":
        return np.ones(n)
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def complex_stft(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex one-sided STFT of a 1-D signal, shape (time, frequency)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D signal")
    if len(x) < cfg.window_length:
        raise ValueError(f"signal of length {len(x)} shorter than window {cfg.window_length}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_length)[:: cfg.hop_length]
    return np.fft.rfft(frames * window_function(cfg), axis=-1)


def _represent(z: np.ndarray, representation: str) -> np.ndarray:
    mag = np.abs(z)
    if representation == "log_magnitude":
        return np.log1p(mag)
    return mag


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """One sample's per-modality (f, t, fr) tensors plus axis metadata."""

    tensors: tuple[np.ndarray, ...]
    frame_seconds: tuple[float, ...]
    bin_hz: tuple[float, ...]

    @property
    def shapes(self) -> tuple[tuple[int, int, int], ...]:
        return tuple(t.shape for t in self.tensors)


def _configs(cfg: StftConfig | Sequence[StftConfig], n: int) -> tuple[StftConfig, ...]:
    if isinstance(cfg, StftConfig):
        return (cfg,) * n
    cfg = tuple(cfg)
    if len(cfg) != n:
        raise ValueError(f"{len(cfg)} STFT configs for {n} modalities")
    return cfg


def compute_stft(sample: Sample, cfg: StftConfig | Sequence[StftConfig]) -> Spectrogram:
    cfgs = _configs(cfg, len(sample.signals))
    tensors = tuple(
        _represent(complex_stft(x, c), c.representation)[None].astype(np.float32)
        for x, c in zip(sample.signals, cfgs)
    )
    return Spectrogram(
        tensors,
        tuple(c.hop_length / r for c, r in zip(cfgs, sample.sample_rates)),
        tuple(r / c.window_length for c, r in zip(cfgs, sample.sample_rates)),
    )


# ---------------------------------------------------------------------------
# batched container
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SpectrogramSet:
    """Stacked spectrograms for N samples with their labels and session structure."""

    tensors: list[np.ndarray]  # per modality (N, f, t, fr), float32
    class_labels: np.ndarray  # (N,) str
    conditions: list[tuple[str, ...]]
    session_ids: np.ndarray  # (N,) str
    timestamps: np.ndarray  # (N,) int
    synthetic: np.ndarray = field(default=None)  # (N,) bool

    def __post_init__(self):
        n = len(self.class_labels)
        self.class_labels = np.asarray(self.class_labels, dtype=object)
        self.session_ids = np.asarray(self.session_ids, dtype=object)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.synthetic is None:
            self.synthetic = np.zeros(n, dtype=bool)
        self.synthetic = np.asarray(self.synthetic, dtype=bool)
        self.conditions = [tuple(c) for c in self.conditions]
        for t in self.tensors:
            if t.shape[0] != n:
                raise ValueError("tensor batch size differs from label count")
        if not (len(self.conditions) == len(self.session_ids) == len(self.timestamps) == n):
            raise ValueError("inconsistent SpectrogramSet lengths")

    def __len__(self) -> int:
        return len(self.class_labels)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(t.shape[1:]) for t in self.tensors]

    def subset(self, idx) -> "SpectrogramSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SpectrogramSet(
            [t[idx] for t in self.tensors],
            self.class_labels[idx],
            [self.conditions[i] for i in idx],
            self.session_ids[idx],
            self.timestamps[idx],
            self.synthetic[idx],
        )

    def session_index(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for i, s in enumerate(self.session_ids):
            out.setdefault(s, []).append(i)
        return {k: np.array(v) for k, v in out.items()}

    @staticmethod
    def concat(parts: Sequence["SpectrogramSet"]) -> "SpectrogramSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return SpectrogramSet(
            [np.concatenate([p.tensors[m] for p in parts]) for m in range(len(parts[0].tensors))],
            np.concatenate([p.class_labels for p in parts]),
            [c for p in parts for c in p.conditions],
            np.concatenate([p.session_ids for p in parts]),
            np.concatenate([p.timestamps for p in parts]),
            np.concatenate([p.synthetic for p in parts]),
        )


def stft_dataset(dataset: Dataset, cfg: StftConfig | Sequence[StftConfig]) -> SpectrogramSet:
    cfgs = _configs(cfg, len(dataset.modalities))
    per_mod: list[list[np.ndarray]] = [[] for _ in cfgs]
    labels, conds, sids, stamps = [], [], [], []
    for sess in dataset.sessions:
        for s in sess.samples:
            spec = compute_stft(s, cfgs)
            for m, t in enumerate(spec.tensors):
                per_mod[m].append(t)
            labels.append(s.class_label)
            conds.append(s.condition)
            sids.append(s.session_id)
            stamps.append(s.timestamp_index)
    return SpectrogramSet([np.stack(p) for p in per_mod], np.array(labels, dtype=object), conds,
                          np.array(sids, dtype=object), np.array(stamps))


def select_split(specs: SpectrogramSet, part: dict[str, tuple[int, ...]]) -> SpectrogramSet:
    """Rows of ``specs`` whose (session, position-in-session) is in a split partition."""
    keep = []
    for sid, rows in specs.session_index().items():
        order = rows[np.argsort(specs.timestamps[rows], kind="stable")]
        wanted = part.get(sid, ())
        keep.extend(order[list(wanted)])
    return specs.subset(np.sort(np.array(keep, dtype=np.int64)))


# ---------------------------------------------------------------------------
# spectrogram cache: <dataset>/stft/<hash>/
# ---------------------------------------------------------------------------


def save_spectrograms(directory: str | os.PathLike, specs: SpectrogramSet, cfgs: Sequence[StftConfig],
                      modality_names: Sequence[str], extra: dict | None = None) -> Path:
    """Write the cache subtree; returns its directory."""
    key = config_hash(cfgs)
    root = Path(directory) / "stft" / key
    files = []
    for name, t in zip(modality_names, specs.tensors):
        rel = f"{name}.f32"
        atomic_write_bytes(root / rel, np.ascontiguousarray(t, dtype="<f4").tobytes())
        files.append({"modality": name, "file": rel, "shape": list(t.shape), "dtype": "<f4"})
    index = {
        "stft": [asdict(c) for c in cfgs],
        "hash": key,
        "files": files,
        "class_labels": [str(x) for x in specs.class_labels],
        "conditions": [list(c) for c in specs.conditions],
        "session_ids": [str(x) for x in specs.session_ids],
        "timestamps": [int(x) for x in specs.timestamps],
        "synthetic": [bool(x) for x in specs.synthetic],
        **(extra or {}),
    }
    atomic_write_text(root / "index.json", json.dumps(index))
    return root


def load_spectrograms(directory: str | os.PathLike, key: str | None = None) -> tuple[SpectrogramSet, list[StftConfig]]:
    base = Path(directory) / "stft"
    if key is None:
        keys = sorted(p.name for p in base.iterdir() if (p / "index.json").exists()) if base.exists() else []
        if len(keys) != 1:
            raise FileNotFoundError(f"expected exactly one spectrogram cache under {base}, found {keys}")
        key = keys[0]
    root = base / key
    with open(root / "index.json", encoding="utf-8") as fh:
        index = json.load(fh)
    tensors = [np.fromfile(root / f["file"], dtype="<f4").reshape(f["shape"]) for f in index["files"]]
    specs = SpectrogramSet(tensors, np.array(index["class_labels"], dtype=object), index["conditions"],
                           np.array(index["session_ids"], dtype=object), np.array(index["timestamps"]),
                           np.array(index["synthetic"]))
    return specs, [StftConfig(**c) for c in index["stft"]]


def load_or_compute(directory: str | os.PathLike, cfgs: Sequence[StftConfig]) -> SpectrogramSet:
    """Cached spectrograms for a dataset directory, computing them on a miss."""
    from .datamodel import load_dataset

    key = config_hash(cfgs)
    if (Path(directory) / "stft" / key / "index.json").exists():
        return load_spectrograms(directory, key)[0]
    ds = load_dataset(directory)
    specs = stft_dataset(ds, cfgs)
    save_spectrograms(directory, specs, cfgs, [m.name for m in ds.modalities])
    return specs


def dataset_modality_names(directory: str | os.PathLike) -> list[str]:
    return [m["name"] for m in read_manifest(directory)["modalities"]]


# ---------------------------------------------------------------------------
# conventional augmentation baseline
# ---------------------------------------------------------------------------


def jitter(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return np.array(x, dtype=np.float32)
    return (x + rng.normal(0.0, sigma, size=x.shape)).astype(np.float32)


def scale(x: np.ndarray, factor: float) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) * factor).astype(np.float32)


def band_zero(x: np.ndarray, start: int, width: int) -> np.ndarray:
    """Zero a contiguous block of rfft bins and transform back."""
    if width <= 0:
        return np.array(x, dtype=np.float32)
    spec = np.fft.rfft(np.asarray(x, dtype=np.float64))
    spec[start : start + width] = 0
    return np.fft.irfft(spec, n=len(x)).astype(np.float32)


def conventional_augment(
    sample: Sample,
    rng: np.random.Generator,
    n_augmented: int = 10,
    jitter_ratio: float = 0.05,
    scale_range: tuple[float, float] = (0.8, 1.2),
    max_band_fraction: float = 0.2,
) -> list[Sample]:
    """One random time-domain op (jitter or scaling) then one random band zeroing, per copy."""
    out = []
    for _ in range(n_augmented):
        time_op = rng.integers(2)
        factor = rng.uniform(*scale_range)
        signals = []
        for x in sample.signals:
            if time_op == 0:
                y = jitter(x, jitter_ratio * float(np.std(x)), rng)
            else:
                y = scale(x, factor)
            n_bins = len(x) // 2 + 1
            width = int(rng.integers(1, max(1, int(max_band_fraction * n_bins)) + 1))
            start = int(rng.integers(0, n_bins - width + 1))
            signals.append(band_zero(y, start, width))
        out.append(
            Sample(tuple(signals), sample.sample_rates, sample.class_label, sample.condition,
                   sample.session_id, sample.timestamp_index)
        )
    return out
