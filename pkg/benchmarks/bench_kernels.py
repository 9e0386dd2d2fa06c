"""Compiled kernels vs the NumPy fallback on problem sizes seen in training.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from setkd import _fallback
from setkd.oracle import random_cost

try:
    from setkd import _core
except ImportError:
    _core = None


def _boxes(rng, *shape):
    return np.concatenate([rng.uniform(0.2, 0.8, shape + (2,)), rng.uniform(0.05, 0.4, shape + (2,))], axis=-1)


def cases(rng):
    cost10 = random_cost(rng, 10)
    while cost10.shape != (10, 10):
        cost10 = random_cost(rng, 10)
    probs = rng.dirichlet(np.ones(4), 10)
    boxes, tb = _boxes(rng, 10), _boxes(rng, 4)
    tc = rng.integers(0, 3, 4)
    assign = np.array([0, -1, 1, -1, -1, 2, -1, 3, -1, -1])
    soft = np.eye(4)[tc]
    scores = rng.normal(size=(8, 10, 256))
    qbox = _boxes(rng, 8, 10)
    ys, xs = np.meshgrid((np.arange(16) + 0.5) / 16, (np.arange(16) + 0.5) / 16, indexing="ij")
    cx, cy = xs.ravel(), ys.ravel()
    return {
        "solve 10x10": lambda m: m.solve(cost10),
        "box_cost_matrix 10x4": lambda m: m.box_cost_matrix(boxes, tb, 5.0, 2.0),
        "padded_cost 10 preds, 4 targets": lambda m: m.padded_cost(probs, boxes, tc, tb, 1.0, 5.0, 2.0, False),
        "set_loss 10 preds": lambda m: m.set_loss(probs, boxes, assign, soft, tb, 1.0, 5.0, 2.0, True, True),
        "attention 8x10x256": lambda m: m.attention(scores, qbox, cx, cy, 0.25, 2.0),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _core is None:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'compiled us':>12s} {'fallback us':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        times = {}
        for label, mod in (("core", _core), ("fallback", _fallback)):
            if mod is None:
                continue
            t = timeit.Timer(lambda: fn(mod))
            n, _ = t.autorange()
            times[label] = min(t.repeat(args.repeat, n)) / n * 1e6
        core = times.get("core", float("nan"))
        print(f"{name:34s} {core:12.1f} {times['fallback']:12.1f} {times['fallback'] / core:8.1f}x")


if __name__ == "__main__":
    main()
