"""MNIST-1K variant comparison at desk scale.

Trains each requested variant on a class-balanced 1000-image subset for several
seeds and evaluates on the full 10k test set.

    python scripts/mnist_1k.py --data data/mnist --variants CSKN,CRFF,CDSK --seeds 5
"""

import argparse
import json
from dataclasses import replace

import numpy as np

from cskn.experiments import Mnist1KSetup, load_mnist, run_mnist_1k


def main():
    base = Mnist1KSetup()
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="data/mnist")
    ap.add_argument("--variants", default="CSKN,CRFF,CDSK")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--seed-offset", type=int, default=0, help="first seed")
    ap.add_argument("--channels", type=int, default=base.channels)
    ap.add_argument("--sigmas", default=",".join(str(s) for s in base.sigmas))
    ap.add_argument("--epochs", type=int, default=base.epochs)
    ap.add_argument("--lr", type=float, default=base.learning_rate)
    ap.add_argument("--adam-lr", type=float, default=base.adam_learning_rate)
    ap.add_argument("--lambda1", type=float, default=base.lambda1)
    ap.add_argument("--lambda2", type=float, default=base.lambda2)
    args = ap.parse_args()
    setup = replace(base, channels=args.channels, sigmas=tuple(float(s) for s in args.sigmas.split(",")),
                    epochs=args.epochs, learning_rate=args.lr, adam_learning_rate=args.adam_lr,
                    lambda1=args.lambda1, lambda2=args.lambda2)
    full_train, test = load_mnist(args.data)
    summary = {}
    for v in args.variants.split(","):
        accs = []
        for seed in range(args.seed_offset, args.seed_offset + args.seeds):
            run = run_mnist_1k(v, seed, full_train, test, setup)
            accs.append(100 * run.test_accuracy)
            print(f"{v} seed {seed}: {accs[-1]:.2f}% ({run.seconds:.0f}s)", flush=True)
        summary[v] = (float(np.mean(accs)), float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0)
        print(f"{v}: {summary[v][0]:.2f} +- {summary[v][1]:.2f}", flush=True)
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
