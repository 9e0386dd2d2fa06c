"""Optimal bipartite assignment over rectangular cost matrices.

Among all minimum-cost assignments the lexicographically smallest
assignment vector is returned, with ``BACKGROUND`` ordered after every real
column. Solver and brute-force oracle share that rule, so their outputs can
be compared exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._fallback import BACKGROUND, tie_tolerance

__all__ = [
    "BACKGROUND",
    "AssignmentResult",
    "InvalidCostError",
    "hungarian",
    "brute_force_assignment",
]

BRUTE_FORCE_LIMIT = 8


class InvalidCostError(ValueError):
    pass


@dataclass(frozen=True)
class AssignmentResult:
    assign: np.ndarray  # length R; column index or BACKGROUND
    total_cost: float

    @property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of the assigned entries, in row order."""
        rows = np.flatnonzero(self.assign != BACKGROUND)
        return rows, self.assign[rows]


def _check_shape(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] < 1 or cost.shape[1] < 1:
        raise InvalidCostError(f"cost must be a non-empty 2-D matrix, got shape {cost.shape}")
    return cost


def _check(cost) -> np.ndarray:
    cost = _check_shape(cost)
    if not np.all(np.isfinite(cost)):
        raise InvalidCostError("cost matrix contains NaN or infinite entries")
    return cost


def _total(cost: np.ndarray, assign) -> float:
    # Sequential sum in row order, the same arithmetic as the kernel.
    total = 0.0
    for i, j in enumerate(np.asarray(assign).tolist()):
        if j != BACKGROUND:
            total += float(cost[i, j])
    return total


def hungarian(cost, *, solver=None) -> AssignmentResult:
    """Kuhn-Munkres assignment of rows to columns.

    ``solver`` overrides the kernel (used to inject faulty solvers in tests).
    """
    if solver is not None:
        cost = _check(cost)
        assign = np.asarray(solver(cost), dtype=np.int64)
        return AssignmentResult(assign, _total(cost, assign))
    cost = _check_shape(cost)
    try:
        assign, total = _kernels.solve(cost)
    except ValueError as exc:
        raise InvalidCostError(str(exc)) from None
    return AssignmentResult(assign, total)


def _injective_maps(n_rows: int, n_cols: int) -> np.ndarray:
    """Every maximal injective row -> column map, one per row of the result,
    in lexicographic order with BACKGROUND sorting after every column."""
    if n_rows <= n_cols:
        maps = list(itertools.permutations(range(n_cols), n_rows))
    else:
        # n_cols stands in for BACKGROUND so that it sorts last
        pool = list(range(n_cols)) + [n_cols] * (n_rows - n_cols)
        maps = sorted(set(itertools.permutations(pool)))
    out = np.array(maps, dtype=np.int64).reshape(len(maps), n_rows)
    out[out == n_cols] = BACKGROUND
    return out


def brute_force_assignment(cost) -> AssignmentResult:
    """Exhaustive-enumeration optimum under the same tie-break rule."""
    cost = _check(cost)
    if min(cost.shape) > BRUTE_FORCE_LIMIT:
        raise InvalidCostError(f"brute force limited to min(R, C) <= {BRUTE_FORCE_LIMIT}")
    maps = _injective_maps(*cost.shape)
    # row-order accumulation, elementwise identical to _total
    totals = np.zeros(len(maps))
    for i in range(cost.shape[0]):
        col = maps[:, i]
        totals = totals + np.where(col == BACKGROUND, 0.0, cost[i, np.maximum(col, 0)])
    best = totals.min()
    first = int(np.flatnonzero(totals <= best + tie_tolerance(cost))[0])
    return AssignmentResult(maps[first].copy(), _total(cost, maps[first]))
