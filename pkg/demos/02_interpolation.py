"""Train the conditional VAE on the seen half of the grid and synthesize the hidden half.

The synthetic mean spectrogram of a hidden cell should sit closer to that cell's real
data than the real data of any seen cell does. Run: python3 demos/02_interpolation.py
"""

import numpy as np

from sudokusens.config import RunConfig
from sudokusens.cvae import build_cvae, interpolate, train_cvae
from sudokusens.experiment import make_scenario, prepare_data
from sudokusens.training import seed_everything

cfg = RunConfig()
data = prepare_data(cfg)
sc = make_scenario(data, 50.0, seed=0)
streams = seed_everything(0)
schema = data.dataset.schema

model = build_cvae(sc.train.shapes, schema, cfg.cvae, streams.int_seed("init"))
model, curve = train_cvae(model, sc.train, schema, cfg.cvae_optimizer, streams.numpy("training"),
                          streams.torch("training"))
print(f"ELBO loss {curve[0]['total']:.2f} -> {curve[-1]['total']:.2f} over {len(curve)} epochs")

synth = interpolate(model, sc.matrix, schema, data.dataset.class_attribute, cfg.interpolation,
                    sc.avg_train_per_seen_cell, streams.torch("sampling"))
print(f"{len(synth)} synthetic samples for {len(sc.matrix.unseen_cells)} hidden cells\n")


def cell_mean(specs, cell):
    rows = [k for k, c in enumerate(specs.conditions) if data.dataset.cell_of(c) == cell]
    return np.concatenate([t[rows].mean(axis=0).ravel() for t in specs.tensors])


seen = [(c, tuple(e)) for c, e in sc.matrix.seen_cells]
for cls, env in sc.matrix.unseen_cells:
    cell = (cls, tuple(env))
    real = cell_mean(data.specs, cell)
    d_synth = np.linalg.norm(cell_mean(synth, cell) - real)
    d_seen = min(np.linalg.norm(cell_mean(sc.train, s) - real) for s in seen)
    print(f"{cls:>7} {'/'.join(env):<6} synthetic {d_synth:6.2f}   nearest seen cell {d_seen:6.2f}")
