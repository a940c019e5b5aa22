"""Small hand-built datasets for unit tests."""

from __future__ import annotations

import itertools

import numpy as np

from sudokusens.datamodel import AttributeSchema, Dataset, Modality, Sample, Session


def grid_dataset(n_classes=3, n_env=3, cells=None, samples_per_session=10, sessions_per_cell=1,
                 length=16, rates=(64.0,), seed=0) -> Dataset:
    """Classes c0.. x environments e0.. with sessions in ``cells`` (default: every cell).

    ``length`` counts points of the first modality; the others scale with their rates.
    """
    schema = AttributeSchema((("target", tuple(f"c{i}" for i in range(n_classes))),
                              ("env", tuple(f"e{j}" for j in range(n_env)))))
    rng = np.random.default_rng(seed)
    if cells is None:
        cells = list(itertools.product(range(n_classes), range(n_env)))
    sessions = []
    for i, j in cells:
        for r in range(sessions_per_cell):
            sid = f"c{i}_e{j}_r{r}"
            cond = (f"c{i}", f"e{j}")
            samples = tuple(
                Sample(tuple(rng.normal(size=int(length * rate / rates[0])).astype(np.float32) for rate in rates),
                       rates, f"c{i}", cond, sid, k)
                for k in range(samples_per_session)
            )
            sessions.append(Session(sid, f"c{i}", cond, samples))
    mods = tuple(Modality(f"m{k}", r) for k, r in enumerate(rates))
    return Dataset(schema, mods, tuple(sessions), "target")


def raw_session_dataset(lengths_s, rate=1024.0) -> Dataset:
    """One unsegmented session per entry of ``lengths_s``, all in one cell."""
    schema = AttributeSchema((("target", ("a",)), ("env", ("x",))))
    sessions = []
    for k, secs in enumerate(lengths_s):
        n = int(round(secs * rate))
        x = np.arange(n, dtype=np.float32)  # sample value = absolute sample index
        sid = f"s{k}"
        sessions.append(Session(sid, "a", ("a", "x"), (Sample((x,), (rate,), "a", ("a", "x"), sid, 0),)))
    return Dataset(schema, (Modality("m", rate),), tuple(sessions), "target")


# A run small enough for end-to-end tests: 3x4 grid, 12 s sessions, a few epochs per stage.
TINY_CONFIG = {
    "generator": {"n_classes": 3, "attribute_values": [4], "sessions_per_cell": 2, "session_length_s": 12.0},
    "cvae": {"latent_dim": 4, "conv_channels": [4, 4], "cond_width": 8, "hidden": 32},
    "cvae_optimizer": {"epochs": 2, "batch_size": 32},
    "interpolation": {"pseudo_session_size": 4},
    "satcl": {"batch_sessions": 4, "epochs": 2, "steps_per_epoch": 3, "embedding_dim": 8, "conv_channels": [4],
              "projection_hidden": 16},
    "classifier": {"hidden": 16, "epochs": 3, "patience": 2},
    "coverages": [100.0, 50.0],
    "seeds": [0],
    "conventional_copies": 2,
}


def tiny_config(**overrides):
    import copy

    from sudokusens.config import RunConfig, from_dict

    data = copy.deepcopy(TINY_CONFIG)
    data.update(overrides)
    return from_dict(RunConfig, data)
