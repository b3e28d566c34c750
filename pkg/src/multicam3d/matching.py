"""Linear assignment: an O(n^2 m) shortest-augmenting-path solver plus a
deterministic lexicographic tie-break, and the pairwise matching cost used
for set prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


def _solve_lap(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assign every row of an n x m (n <= m) matrix to a distinct column with
    minimum total cost. Returns (col_for_row, row_potentials, col_potentials).
    Handles arbitrary finite costs.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)   # p[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            upd = free & (cur < minv[1:])
            if upd.any():
                minv[1:][upd] = cur[upd]
                way[1:][upd] = j0
            free_idx = np.nonzero(free)[0]
            rel = int(np.argmin(minv[1:][free]))
            j1 = int(free_idx[rel]) + 1
            delta = minv[j1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = int(way[j0])
            p[j0] = p[j1]
            j0 = j1
    col_for_row = np.zeros(n, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            col_for_row[p[j] - 1] = j - 1
    return col_for_row, u[1:], v[1:]


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    col, _, _ = _solve_lap(cost)
    return float(cost[np.arange(cost.shape[0]), col].sum())


def lexicographic_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost row-to-column assignment (n <= m); among all optima,
    rows in ascending order each take the smallest possible column.

    Candidate columns per row come from complementary slackness against the
    optimal dual potentials, so the refinement solves subproblems only when
    the optimum is degenerate.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0:
        return np.zeros(0, dtype=int)
    base_col, u, v = _solve_lap(cost)
    rows = np.arange(n)
    base = float(cost[rows, base_col].sum())
    tol = 1e-9 * (1.0 + float(np.abs(cost).max()))
    remaining = list(range(m))
    total_fixed = 0.0
    result = np.zeros(n, dtype=int)
    for i in range(n):
        reduced = cost[i, :] - u[i] - v
        cands = sorted(j for j in remaining if reduced[j] <= tol)
        chosen = None
        if len(cands) == 1:
            chosen = cands[0]
        else:
            rows_left = np.arange(i + 1, n)
            for j in cands:
                cols_left = [cc for cc in remaining if cc != j]
                sub = cost[np.ix_(rows_left, cols_left)]
                if total_fixed + cost[i, j] + _optimal_cost(sub) <= base + tol:
                    chosen = j
                    break
        if chosen is None:
            # numeric fallback: complete from a fresh subproblem solve
            sub_rows = np.arange(i, n)
            sub_cols = np.array(remaining)
            sub_col, _, _ = _solve_lap(cost[np.ix_(sub_rows, sub_cols)])
            chosen = int(sub_cols[sub_col[0]])
        result[i] = chosen
        remaining.remove(chosen)
        total_fixed += float(cost[i, chosen])
    return result


@dataclass(frozen=True)
class Assignment:
    """Optimal row-to-column assignment and its total cost."""

    col_for_row: tuple[int, ...]
    total_cost: float


def hungarian(cost) -> Assignment:
    """Optimal assignment for a square cost matrix.

    Deterministic tie-break: among optimal assignments, the one whose column
    sequence (row 0 first) is lexicographically smallest.
    """
    arr = np.asarray(cost, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise DomainError(f"hungarian expects a nonempty square matrix, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DomainError("hungarian requires finite costs (found NaN or Inf)")
    col = lexicographic_assignment(arr)
    total = float(arr[np.arange(arr.shape[0]), col].sum())
    return Assignment(tuple(int(c) for c in col), total)


NO_OBJECT = None  # sentinel class for padded ground-truth slots


def match_cost(box_target: np.ndarray | None, class_id: int | None,
               box_pred: np.ndarray, class_probs: np.ndarray) -> float:
    """Pairwise matching cost between one target and one prediction.

    Real targets cost -p(class) plus the L1 distance between the 10-dim
    regression vectors; padded (no-object) targets cost 0 regardless of the
    prediction.
    """
    if class_id is None:
        return 0.0
    return float(-class_probs[class_id]
                 + np.abs(np.asarray(box_target) - np.asarray(box_pred)).sum())
