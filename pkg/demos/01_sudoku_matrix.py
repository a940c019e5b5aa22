"""Build the synthetic benchmark, hide half of its cells and look at the resulting split.

Run: python3 demos/01_sudoku_matrix.py
"""

import numpy as np

from sudokusens.datamodel import build_sudoku_matrix, choose_hidden_cells, make_split, mask_cells, segment_sessions
from sudokusens.synthgen import GeneratorConfig, generate_dataset


def show(matrix):
    width = max(len(c) for c in matrix.classes)
    labels = ["/".join(e) for e in matrix.environments]
    print(" " * width, " ".join(labels))
    for i, cls in enumerate(matrix.classes):
        marks = [("X" if matrix.seen[i, j] else ".").center(len(lab)) for j, lab in enumerate(labels)]
        print(cls.ljust(width), " ".join(marks))


raw, _ = generate_dataset(GeneratorConfig())
ds, rejected = segment_sessions(raw, window_s=2.0, overlap_s=1.0)
print(f"{len(ds.sessions)} sessions, {ds.n_samples} two-second samples, {len(rejected)} rejected")

full = build_sudoku_matrix(ds)
print(f"\nfull matrix, coverage {full.coverage_percent:.0f}%")
show(full)

# A random hiding pattern is accepted only if every attribute value stays observed
# and every hidden cell can borrow from a seen row and column.
hidden = choose_hidden_cells(full, ds, 50.0, np.random.default_rng(0))
half, _ = mask_cells(full, ds, hidden)
print(f"\nafter hiding {len(hidden)} cells, coverage {half.coverage_percent:.0f}%")
show(half)

split = make_split(ds, half, "sudoku")
print("\nsamples per split:", split.sizes())
print("test sessions come only from hidden cells:",
      sorted({ds.cell_of(s.condition) for s in ds.sessions if split.test.get(s.session_id)}) == sorted(hidden))
