"""Masked-autoencoder pretraining curve of the thermal encoder, written as CSV (step, loss)."""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from rgbtfuse.config import apply_overrides, load_config
from rgbtfuse.pipeline import init_model, pretrain_vision


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=Path("configs/acceptance.cfg"))
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", type=Path, default=Path("runs/mae_curve.csv"))
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.steps:
        cfg = apply_overrides(cfg, [f"mae_steps={args.steps}"])
    hist = pretrain_vision(init_model(cfg), cfg)["thermal"]

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, f"{v:.6f}") for i, v in enumerate(hist, 1))
    tail = float(np.mean(hist[-10:]))
    print(f"step 1 {hist[0]:.4f}, last-10 mean {tail:.4f} ({tail / hist[0]:.1%} of start)", file=sys.stderr)


if __name__ == "__main__":
    main()
