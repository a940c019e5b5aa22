"""Sessioned, condition-labeled multimodal datasets and the Sudoku-matrix split logic.

A condition is a tuple of attribute values in schema order. The class label is
itself one of the schema attributes; the Sudoku matrix factors it out as rows and
uses the remaining attributes (the "environment") as columns.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import tempfile
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ConditionVector = tuple[str, ...]
Cell = tuple[str, tuple[str, ...]]

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class SchemaError(ValueError):
    pass


class OrphanedAttributeError(ValueError):
    """Hiding cells would leave an attribute value with no seen cell."""


class IsolatedCellError(ValueError):
    """An unseen cell has no seen rectangle to interpolate from."""


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        attrs = tuple((str(n), tuple(str(v) for v in vals)) for n, vals in self.attributes)
        object.__setattr__(self, "attributes", attrs)
        names = [n for n, _ in attrs]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in {names}")
        for name, values in attrs:
            if not values:
                raise SchemaError(f"attribute {name!r} has no values")
            if len(set(values)) != len(values):
                raise SchemaError(f"attribute {name!r} has duplicate values")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.attributes)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown attribute {name!r}") from None

    def values(self, name: str) -> tuple[str, ...]:
        return self.attributes[self.index(name)][1]

    def validate(self, condition: Sequence[str]) -> ConditionVector:
        condition = tuple(condition)
        if len(condition) != len(self.attributes):
            raise SchemaError(
                f"condition {condition} has {len(condition)} values, schema has {len(self.attributes)}"
            )
        for (name, values), v in zip(self.attributes, condition):
            if v not in values:
                raise SchemaError(f"value {v!r} is not a member of attribute {name!r}")
        return condition

    def to_json(self) -> list:
        return [{"name": n, "values": list(v)} for n, v in self.attributes]

    @classmethod
    def from_json(cls, obj: list) -> "AttributeSchema":
        return cls(tuple((a["name"], tuple(a["values"])) for a in obj))


@dataclass(frozen=True)
class Modality:
    name: str
    sample_rate_hz: float


@dataclass(frozen=True, eq=False)
class Sample:
    signals: tuple[np.ndarray, ...]
    sample_rates: tuple[float, ...]
    class_label: str
    condition: ConditionVector
    session_id: str
    timestamp_index: int = 0

    def __post_init__(self):
        sigs = []
        for s in self.signals:
            a = np.asarray(s, dtype=np.float32)
            if a.ndim != 1 or a.size == 0:
                raise ValueError("modality signals must be non-empty 1-D arrays")
            a = a.copy() if a.flags.writeable else a
            a.flags.writeable = False
            sigs.append(a)
        object.__setattr__(self, "signals", tuple(sigs))
        object.__setattr__(self, "condition", tuple(self.condition))


@dataclass(frozen=True)
class Session:
    session_id: str
    class_label: str
    condition: ConditionVector
    samples: tuple[Sample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "condition", tuple(self.condition))
        if not self.samples:
            raise ValueError(f"session {self.session_id!r} has no samples")
        stamps = [s.timestamp_index for s in self.samples]
        if stamps != sorted(stamps):
            raise ValueError(f"session {self.session_id!r} samples not ordered by timestamp")
        for s in self.samples:
            if (s.session_id, s.class_label, s.condition) != (
                self.session_id,
                self.class_label,
                self.condition,
            ):
                raise ValueError(f"sample metadata disagrees with session {self.session_id!r}")


@dataclass(frozen=True)
class Dataset:
    schema: AttributeSchema
    modalities: tuple[Modality, ...]
    sessions: tuple[Session, ...]
    class_attribute: str
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "sessions", tuple(self.sessions))
        ci = self.schema.index(self.class_attribute)
        ids = [s.session_id for s in self.sessions]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate session ids")
        for s in self.sessions:
            self.schema.validate(s.condition)
            if s.condition[ci] != s.class_label:
                raise SchemaError(
                    f"session {s.session_id!r}: class label {s.class_label!r} differs from "
                    f"condition value {s.condition[ci]!r}"
                )

    @property
    def classes(self) -> tuple[str, ...]:
        return self.schema.values(self.class_attribute)

    @property
    def environment_attributes(self) -> tuple[str, ...]:
        return tuple(n for n in self.schema.names if n != self.class_attribute)

    def cell_of(self, condition: Sequence[str]) -> Cell:
        ci = self.schema.index(self.class_attribute)
        env = tuple(v for i, v in enumerate(condition) if i != ci)
        return condition[ci], env

    def condition_of(self, cell: Cell) -> ConditionVector:
        cls, env = cell
        ci = self.schema.index(self.class_attribute)
        env = list(env)
        env.insert(ci, cls)
        return tuple(env)

    def sessions_in(self, cell: Cell) -> list[Session]:
        return [s for s in self.sessions if self.cell_of(s.condition) == cell]

    @property
    def n_samples(self) -> int:
        return sum(len(s.samples) for s in self.sessions)

    def with_sessions(self, sessions: Iterable[Session]) -> "Dataset":
        return replace(self, sessions=tuple(sessions))


@dataclass(frozen=True)
class SudokuMatrix:
    classes: tuple[str, ...]
    environments: tuple[tuple[str, ...], ...]
    seen: np.ndarray  # bool (n_classes, n_environments)

    def __post_init__(self):
        seen = np.array(self.seen, dtype=bool)
        if seen.shape != (len(self.classes), len(self.environments)):
            raise ValueError("cell grid shape does not match classes x environments")
        seen.flags.writeable = False
        object.__setattr__(self, "seen", seen)

    @property
    def coverage_percent(self) -> float:
        return 100.0 * float(self.seen.sum()) / self.seen.size

    def cells(self, seen: bool | None = None) -> list[Cell]:
        out = []
        for i, c in enumerate(self.classes):
            for j, e in enumerate(self.environments):
                if seen is None or bool(self.seen[i, j]) == seen:
                    out.append((c, e))
        return out

    @property
    def seen_cells(self) -> list[Cell]:
        return self.cells(True)

    @property
    def unseen_cells(self) -> list[Cell]:
        return self.cells(False)

    def position(self, cell: Cell) -> tuple[int, int]:
        cls, env = cell
        return self.classes.index(cls), self.environments.index(tuple(env))

    def is_seen(self, cell: Cell) -> bool:
        i, j = self.position(cell)
        return bool(self.seen[i, j])

    def has_rectangle(self, cell: Cell) -> bool:
        """True when some (row, column) pair closes a rectangle with three seen corners."""
        i, j = self.position(cell)
        s = self.seen
        return bool(np.any(s[i, :][None, :] & s[:, j][:, None] & s))

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "environments": [list(e) for e in self.environments],
            "seen": self.seen.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SudokuMatrix":
        return cls(
            tuple(obj["classes"]),
            tuple(tuple(e) for e in obj["environments"]),
            np.array(obj["seen"], dtype=bool),
        )


@dataclass(frozen=True)
class SplitAssignment:
    """Per-session sample positions for each partition."""

    train: dict[str, tuple[int, ...]]
    val: dict[str, tuple[int, ...]]
    test: dict[str, tuple[int, ...]]

    def sizes(self) -> tuple[int, int, int]:
        return tuple(sum(len(v) for v in part.values()) for part in (self.train, self.val, self.test))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def segment_sessions(dataset: Dataset, window_s: float, overlap_s: float) -> tuple[Dataset, list[dict]]:
    """Cut every session into fixed windows.

    Each raw session's samples are concatenated per modality before windowing.
    Sessions shorter than one window are dropped and reported in the returned
    warning records.
    """
    if not window_s > overlap_s >= 0:
        raise ValueError("need window_s > overlap_s >= 0")
    hop_s = window_s - overlap_s
    rates = [m.sample_rate_hz for m in dataset.modalities]
    win = [_exact_count(window_s * r, "window") for r in rates]
    hop = [_exact_count(hop_s * r, "hop") for r in rates]
    out, rejected = [], []
    for sess in dataset.sessions:
        raw = [np.concatenate([s.signals[m] for s in sess.samples]) for m in range(len(rates))]
        counts = [1 + (len(x) - w) // h if len(x) >= w else 0 for x, w, h in zip(raw, win, hop)]
        n = min(counts)
        if n == 0:
            rec = {
                "session_id": sess.session_id,
                "reason": "shorter than one window",
                "length_s": min(len(x) / r for x, r in zip(raw, rates)),
            }
            log.warning("rejecting session %s: shorter than one %.3g s window", sess.session_id, window_s)
            rejected.append(rec)
            continue
        samples = tuple(
            Sample(
                signals=tuple(x[k * h : k * h + w] for x, w, h in zip(raw, win, hop)),
                sample_rates=tuple(rates),
                class_label=sess.class_label,
                condition=sess.condition,
                session_id=sess.session_id,
                timestamp_index=k,
            )
            for k in range(n)
        )
        out.append(replace(sess, samples=samples))
    meta = dict(dataset.metadata)
    meta["segmentation"] = {"window_s": window_s, "overlap_s": overlap_s}
    return replace(dataset, sessions=tuple(out), metadata=meta), rejected


def _exact_count(x: float, what: str) -> int:
    n = int(round(x))
    if n < 1 or abs(n - x) > 1e-6 * max(1.0, x):
        raise ValueError(f"{what} of {x} samples is not a positive whole number")
    return n


def build_sudoku_matrix(dataset: Dataset) -> SudokuMatrix:
    """Classes x environment combinations; cells with at least one session are seen."""
    if not dataset.sessions:
        raise ValueError("dataset is empty")
    envs = tuple(itertools.product(*(dataset.schema.values(a) for a in dataset.environment_attributes)))
    classes = dataset.classes
    seen = np.zeros((len(classes), len(envs)), dtype=bool)
    for s in dataset.sessions:
        cls, env = dataset.cell_of(s.condition)
        seen[classes.index(cls), envs.index(env)] = True
    return SudokuMatrix(classes, envs, seen)


def orphaned_values(matrix: SudokuMatrix, env_attributes: Sequence[str], class_attribute: str) -> list[str]:
    """Attribute values that appear in no seen cell."""
    orphans = []
    for i, c in enumerate(matrix.classes):
        if not matrix.seen[i].any():
            orphans.append(f"{class_attribute}={c}")
    for a, name in enumerate(env_attributes):
        values = sorted({e[a] for e in matrix.environments})
        for v in values:
            cols = [j for j, e in enumerate(matrix.environments) if e[a] == v]
            if not matrix.seen[:, cols].any():
                orphans.append(f"{name}={v}")
    return orphans


def mask_cells(
    matrix: SudokuMatrix,
    dataset: Dataset,
    cells_to_hide: Iterable[Cell],
    allow_isolated: bool = False,
) -> tuple[SudokuMatrix, Dataset]:
    """Mark seen cells unseen and drop their sessions.

    Raises OrphanedAttributeError if an attribute value would vanish from every
    seen cell. Unless ``allow_isolated``, also raises IsolatedCellError when an
    unseen cell has no seen rectangle (three seen corners) to transfer from.
    """
    seen = matrix.seen.copy()
    hide = [(c, tuple(e)) for c, e in cells_to_hide]
    for cell in hide:
        i, j = matrix.position(cell)
        if not seen[i, j]:
            raise ValueError(f"cell {cell} is not currently seen")
        seen[i, j] = False
    new = SudokuMatrix(matrix.classes, matrix.environments, seen)
    orphans = orphaned_values(new, dataset.environment_attributes, dataset.class_attribute)
    if orphans:
        raise OrphanedAttributeError(f"attribute value orphaned: {', '.join(orphans)}")
    if not allow_isolated:
        isolated = [c for c in new.unseen_cells if not new.has_rectangle(c)]
        if isolated:
            raise IsolatedCellError(
                f"no row or column overlap with seen cells for {isolated}; pass allow_isolated=True"
            )
    hidden = set(hide)
    kept = [s for s in dataset.sessions if dataset.cell_of(s.condition) not in hidden]
    return new, dataset.with_sessions(kept)


def choose_hidden_cells(
    matrix: SudokuMatrix,
    dataset: Dataset,
    coverage_percent: float,
    rng: np.random.Generator,
    max_tries: int = 10000,
) -> list[Cell]:
    """Pick seen cells to hide so coverage reaches the target.

    Patterns are drawn at random until one keeps every attribute value and gives
    every unseen cell a seen rectangle.
    """
    n_cells = matrix.seen.size
    n_seen_target = int(round(n_cells * coverage_percent / 100.0))
    candidates = matrix.seen_cells
    n_hide = len(candidates) - n_seen_target
    if n_hide < 0:
        raise ValueError(f"coverage {coverage_percent}% exceeds current coverage {matrix.coverage_percent:.1f}%")
    if n_hide == 0:
        return []
    for _ in range(max_tries):
        pick = rng.choice(len(candidates), size=n_hide, replace=False)
        hide = [candidates[k] for k in sorted(pick)]
        try:
            mask_cells(matrix, dataset, hide)
        except (OrphanedAttributeError, IsolatedCellError):
            continue
        return hide
    raise ValueError(f"no feasible hiding pattern found for {coverage_percent}% coverage")


def make_split(dataset: Dataset, matrix: SudokuMatrix, mode: str = "sudoku") -> SplitAssignment:
    """Contiguous per-session partitions.

    in_dataset: 80/10/10 train/val/test inside every session.
    sudoku: seen sessions split 80/20 train/val, unseen sessions go wholly to test.
    Val and test sizes are floored; the remainder goes to train.
    """
    if mode not in ("in_dataset", "sudoku"):
        raise ValueError(f"unknown split mode {mode!r}")
    for cell in matrix.seen_cells:
        if not dataset.sessions_in(cell):
            raise ValueError(f"seen cell {cell} has no sessions in the dataset")
    if mode == "sudoku" and not matrix.unseen_cells:
        raise ValueError("sudoku split needs at least one unseen cell")
    train, val, test = {}, {}, {}
    for sess in dataset.sessions:
        n = len(sess.samples)
        seen = matrix.is_seen(dataset.cell_of(sess.condition))
        if mode == "in_dataset":
            n_val = n_test = int(math.floor(0.1 * n))
        elif seen:
            n_val, n_test = int(math.floor(0.2 * n)), 0
        else:
            n_val, n_test = 0, n
        n_train = n - n_val - n_test
        train[sess.session_id] = tuple(range(0, n_train))
        val[sess.session_id] = tuple(range(n_train, n_train + n_val))
        test[sess.session_id] = tuple(range(n_train + n_val, n))
    return SplitAssignment(train, val, test)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _session_file(session_id: str, modality: str) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in session_id)
    return f"sessions/{safe}__{modality}.f32"


def save_dataset(dataset: Dataset, directory: str | os.PathLike, config_hash: str | None = None) -> None:
    """Write ``manifest.json`` plus one little-endian float32 file per session and modality.

    Each file holds a (n_samples, window) row-major matrix; sessions whose samples
    differ in length are stored one sample per row only if lengths agree.
    """
    directory = Path(directory)
    table = []
    for sess in dataset.sessions:
        files = []
        for m, mod in enumerate(dataset.modalities):
            lengths = {len(s.signals[m]) for s in sess.samples}
            if len(lengths) != 1:
                raise ValueError(f"session {sess.session_id!r} has ragged samples for {mod.name}")
            arr = np.stack([s.signals[m] for s in sess.samples]).astype("<f4")
            rel = _session_file(sess.session_id, mod.name)
            atomic_write_bytes(directory / rel, arr.tobytes(order="C"))
            files.append({"modality": mod.name, "file": rel, "shape": list(arr.shape), "dtype": "<f4"})
        table.append(
            {
                "id": sess.session_id,
                "class": sess.class_label,
                "condition": dict(zip(dataset.schema.names, sess.condition)),
                "timestamps": [s.timestamp_index for s in sess.samples],
                "files": files,
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "schema": dataset.schema.to_json(),
        "class_attribute": dataset.class_attribute,
        "modalities": [{"name": m.name, "sample_rate_hz": m.sample_rate_hz} for m in dataset.modalities],
        "metadata": dataset.metadata,
        "config_hash": config_hash,
        "sessions": table,
    }
    atomic_write_text(directory / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True))


def read_manifest(directory: str | os.PathLike) -> dict:
    with open(Path(directory) / MANIFEST, encoding="utf-8") as fh:
        return json.load(fh)


def load_dataset(directory: str | os.PathLike) -> Dataset:
    directory = Path(directory)
    man = read_manifest(directory)
    schema = AttributeSchema.from_json(man["schema"])
    mods = tuple(Modality(m["name"], float(m["sample_rate_hz"])) for m in man["modalities"])
    rates = tuple(m.sample_rate_hz for m in mods)
    sessions = []
    for row in man["sessions"]:
        if not row.get("files"):
            continue  # spectrogram-only (synthetic) session
        cond = tuple(row["condition"][n] for n in schema.names)
        mats = []
        for spec in row["files"]:
            raw = np.fromfile(directory / spec["file"], dtype="<f4")
            mats.append(raw.reshape(spec["shape"]))
        stamps = row.get("timestamps") or list(range(mats[0].shape[0]))
        samples = tuple(
            Sample(
                signals=tuple(m[k] for m in mats),
                sample_rates=rates,
                class_label=row["class"],
                condition=cond,
                session_id=row["id"],
                timestamp_index=int(stamps[k]),
            )
            for k in range(mats[0].shape[0])
        )
        sessions.append(Session(row["id"], row["class"], cond, samples))
    return Dataset(schema, mods, tuple(sessions), man["class_attribute"], man.get("metadata", {}))
