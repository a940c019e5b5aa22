"""A one-seed coverage sweep: plain supervised training against the full pipeline.

At 100% coverage both methods see every cell. At 50% the test set holds only hidden
cells, which is where interpolation plus contrastive pre-training should pay off.
Takes a few minutes on a laptop CPU. Run: python3 demos/03_coverage_sweep.py [out_dir]
"""

import sys

from sudokusens.config import RunConfig
from sudokusens.experiment import run_experiment

out = sys.argv[1] if len(sys.argv) > 1 else None
cfg = RunConfig(methods=("basic", "sudokusens"), coverages=(100.0, 50.0), seeds=(0,), output_dir=out)
report = run_experiment(cfg, progress=lambda msg: print("..", msg, file=sys.stderr))

print(f"{'method':<12} {'coverage':>8} {'accuracy':>9} {'macro F1':>9}")
for row in report.summary_rows():
    print(f"{row['method']:<12} {row['coverage']:>7g}% {row['accuracy_mean']:>9.3f} {row['macro_f1_mean']:>9.3f}")
for d in report.diagnostics:
    print(f"session silhouette at {d['coverage']:g}%: raw {d['silhouette_before']:+.2f}, "
          f"contrastive {d['silhouette_after']:+.2f}")
if out:
    print(f"CSV and JSON outputs in {out}")
