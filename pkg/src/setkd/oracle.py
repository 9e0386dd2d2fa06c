"""Hungarian solver against exhaustive enumeration on random matrices."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .assignment import brute_force_assignment, hungarian


@dataclass
class OracleReport:
    trials: int
    max_size: int
    mismatches: list = field(default_factory=list)  # (trial, cost, solver result, oracle result)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.mismatches


def random_cost(rng: np.random.Generator, max_size: int) -> np.ndarray:
    """Continuous costs half the time, small integers (many ties) otherwise."""
    r, c = (int(v) for v in rng.integers(1, max_size + 1, 2))
    if rng.random() < 0.5:
        return rng.normal(size=(r, c)) * 10 ** rng.uniform(-2, 2)
    return rng.integers(-3, 4, (r, c)).astype(np.float64)


def run_oracle_check(trials: int = 1000, max_size: int = 7, seed: int = 0, solver=None) -> OracleReport:
    """Exact agreement on total cost and on the tie-broken assignment."""
    rng = np.random.default_rng(seed)
    rep = OracleReport(trials, max_size)
    t0 = time.perf_counter()
    for t in range(trials):
        cost = random_cost(rng, max_size)
        got = hungarian(cost, solver=solver)
        ref = brute_force_assignment(cost)
        if got.total_cost != ref.total_cost or not np.array_equal(got.assign, ref.assign):
            rep.mismatches.append((t, cost, got, ref))
    rep.seconds = time.perf_counter() - t0
    return rep
