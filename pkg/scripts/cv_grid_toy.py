"""Full 10 x 10 lambda grid with 5-fold CV on a 500-sample toy set; reports wall time.

    python scripts/cv_grid_toy.py [--epochs 3] [--width 50]
"""

import argparse
import time

import numpy as np

from cskn.data import Dataset
from cskn.features import DenseSpec, InitSchedule, NetworkArchitecture, Variant
from cskn.training import PAPER_GRID, TrainConfig, cross_validate


def toy(n=500, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    y = np.arange(n) % 4
    return Dataset(centers[y] + 0.5 * rng.normal(size=(n, 2)), y)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--width", type=int, default=50)
    args = ap.parse_args()
    ds = toy()
    arch = NetworkArchitecture((2,), (DenseSpec(args.width),), Variant.DSKN, 4)
    grid = [(a, b) for a in PAPER_GRID for b in PAPER_GRID]
    cfg = TrainConfig(learning_rate=0.5, adam_learning_rate=0.01, epochs=args.epochs, seed=0)
    t0 = time.perf_counter()
    res = cross_validate(ds, arch, InitSchedule((1.0,), 0), cfg, grid=grid, folds=5)
    secs = time.perf_counter() - t0
    fits = sum(len(c.fold_scores) for c in res.cells)
    best = max(res.cells, key=lambda c: (c.mean, c.lambda1, c.lambda2))
    print(f"{fits} fits in {secs:.1f}s ({secs / fits * 1000:.0f} ms per fit)")
    print(f"best lambda1={res.best[0]:g} lambda2={res.best[1]:g} mean accuracy {best.mean:.4f}")


if __name__ == "__main__":
    main()
