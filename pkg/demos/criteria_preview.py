"""A few-minute version of the criteria comparison, written to a CSV.

Trains the small profile through the CLI, then sweeps the three criteria on
the 10-image suite for 15 steps with one seed.
"""

import sys
import tempfile
from pathlib import Path

from asense import cli
from asense.data import read_csv

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
cli.main(["train-vae", "--profile", "small", "--out", str(out / "vae")])
cli.main(["train-partial", "--profile", "small", "--checkpoint", str(out / "vae" / "vae.ckpt"),
          "--out", str(out / "partial")])
cli.main(["compare-criteria", "--checkpoint", str(out / "partial" / "bundle.ckpt"), "--steps", "15",
          "--seeds", "1", "--candidate-counts", "20", "--out", str(out / "crit")])

rows = read_csv(out / "crit" / "compare_criteria.csv")
for crit in ("qp", "mi", "ho"):
    s = [float(r["mean_ssim"]) for r in rows if r["criterion"] == crit]
    print(f"{crit}: ssim at steps 1/5/15 = {s[0]:.3f} / {s[4]:.3f} / {s[-1]:.3f}")
