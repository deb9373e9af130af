"""Aligning and merging slot sets from independent heads at inference.

One head is picked as the reference; every other head's slots are matched
to it one-to-one on a similarity matrix (cosine, maximized) or a distance
matrix (euclidean, minimized), either optimally or greedily, and the
aligned sets are averaged. ``fuse`` works on detached values; a variant
keeps the operations on the tape so training losses can reach every head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import SlotSet
from .errors import ContractError

METRICS = ("cosine", "euclidean")
MATCHERS = ("hungarian", "greedy")

# Relative tolerance for classifying an edge as tight (zero reduced cost)
# when extracting the lexicographically smallest optimal assignment.
_TIE_TOL = 1e-9


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (K, K): [a, b] relates slot a to reference slot b
    metric: str


@dataclass
class Assignment:
    mapping: list[int]  # mapping[a] = reference slot index for slot a
    total_score: float


def similarity(a: SlotSet, b: SlotSet, metric: str = "cosine") -> SimilarityMatrix:
    """Pairwise slot similarity (cosine) or distance (euclidean)."""
    if metric not in METRICS:
        raise ContractError(f"unknown metric {metric!r}")
    va, vb = a.values, b.values
    if va.shape != vb.shape:
        raise ContractError(
            f"slot sets differ in shape: {va.shape} vs {vb.shape}")
    if metric == "cosine":
        na = np.linalg.norm(va, axis=1)
        nb = np.linalg.norm(vb, axis=1)
        denom = np.outer(na, nb)
        dots = va @ vb.T
        # zero-norm slots define no direction: similarity pinned to 0
        values = np.divide(dots, denom, out=np.zeros_like(dots),
                           where=denom > 0)
    else:
        diff = va[:, None, :] - vb[None, :, :]
        values = np.linalg.norm(diff, axis=2)
    return SimilarityMatrix(values, metric)


def _matrix_values(matrix) -> np.ndarray:
    values = matrix.values if isinstance(matrix, SimilarityMatrix) else np.asarray(matrix)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ContractError(f"assignment needs a square matrix, got {values.shape}")
    return values


# ---------------------------------------------------------------------------
# Optimal assignment: shortest-augmenting-path Hungarian, O(K^3)
# ---------------------------------------------------------------------------

def _solve_min(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Min-cost perfect matching; returns (row_to_col, u, v) with dual
    potentials satisfying cost[i,j] >= u[i] + v[j], tight on chosen edges."""
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n + 1)
    col_row = np.full(n + 1, -1, dtype=int)  # col -> matched row, n = dummy
    for i in range(n):
        col_row[n] = i
        j0 = n
        minv = np.full(n + 1, np.inf)
        way = np.full(n + 1, -1, dtype=int)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            delta = np.inf
            j1 = -1
            row_cost = cost[i0]
            base = u[i0]
            for j in range(n):
                if used[j]:
                    continue
                cur = row_cost[j] - base - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[col_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_row[j0] == -1:
                break
        while j0 != n:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=int)
    for j in range(n):
        row_to_col[col_row[j]] = j
    return row_to_col, u, v[:n]


def _kuhn_feasible(adj: list[list[int]], rows: list[int],
                   cols_avail: set[int]) -> bool:
    """Can every row in ``rows`` be matched into ``cols_avail``?"""
    match_col: dict[int, int] = {}

    def try_row(r: int, seen: set[int]) -> bool:
        for c in adj[r]:
            if c in cols_avail and c not in seen:
                seen.add(c)
                if c not in match_col or try_row(match_col[c], seen):
                    match_col[c] = r
                    return True
        return False

    return all(try_row(r, set()) for r in rows)


def _lexicographic_optimal(cost: np.ndarray, row_to_col: np.ndarray,
                           u: np.ndarray, v: np.ndarray) -> list[int]:
    """Among all optimal assignments, pick the lexicographically smallest
    mapping. Optimal assignments are exactly the perfect matchings over
    tight edges of the dual solution (complementary slackness)."""
    n = cost.shape[0]
    scale = max(1.0, float(np.abs(cost).max()))
    tight = np.abs(cost - u[:, None] - v[None, :]) <= _TIE_TOL * scale
    adj = [[int(j) for j in np.flatnonzero(tight[i])] for i in range(n)]
    used: set[int] = set()
    mapping: list[int] = []
    for i in range(n):
        chosen = -1
        for j in adj[i]:
            if j in used:
                continue
            remaining = set(range(n)) - used - {j}
            if _kuhn_feasible(adj, list(range(i + 1, n)), remaining):
                chosen = j
                break
        if chosen < 0:
            return [int(c) for c in row_to_col]  # numeric edge case: keep solver's
        mapping.append(chosen)
        used.add(chosen)
    return mapping


def hungarian(matrix, objective: str = "maximize") -> Assignment:
    """Exact optimal one-to-one assignment with deterministic tie-breaking
    (lexicographically smallest mapping among the optima)."""
    values = _matrix_values(matrix)
    if objective not in ("maximize", "minimize"):
        raise ContractError(f"unknown objective {objective!r}")
    cost = -values if objective == "maximize" else values
    row_to_col, u, v = _solve_min(cost)
    mapping = _lexicographic_optimal(cost, row_to_col, u, v)
    total = float(np.sum(values[np.arange(values.shape[0]), mapping]))
    return Assignment(mapping, total)


def greedy_match(matrix, objective: str = "maximize") -> Assignment:
    """Reference slots in index order each grab the best unassigned slot."""
    values = _matrix_values(matrix)
    if objective not in ("maximize", "minimize"):
        raise ContractError(f"unknown objective {objective!r}")
    n = values.shape[0]
    mapping = [-1] * n
    free_rows = list(range(n))
    for ref in range(n):
        column = values[free_rows, ref]
        pos = int(np.argmax(column) if objective == "maximize" else np.argmin(column))
        row = free_rows.pop(pos)
        mapping[row] = ref
    total = float(np.sum(values[np.arange(n), mapping]))
    return Assignment(mapping, total)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def _default_objective(metric: str) -> str:
    # cosine is a similarity (maximize); euclidean a distance (minimize)
    return "maximize" if metric == "cosine" else "minimize"


def align_assignment(head: SlotSet, reference: SlotSet, metric: str,
                     matcher: str) -> Assignment:
    if matcher not in MATCHERS:
        raise ContractError(f"unknown matcher {matcher!r}")
    sim = similarity(head, reference, metric)
    solve = hungarian if matcher == "hungarian" else greedy_match
    return solve(sim, _default_objective(metric))


def _fuse_tensors(slot_tensors: list[Tensor], head_indices: list[int],
                  reference: int, metric: str, matcher: str) -> Tensor:
    h = len(slot_tensors)
    ref_t = slot_tensors[reference]
    shape = ref_t.data.shape
    for t in slot_tensors:
        if t.data.shape != shape:
            raise ContractError(
                f"heads disagree on slot shape: {t.data.shape} vs {shape}")
    acc = ref_t
    ref_set = SlotSet(ref_t, head_indices[reference])
    for j in range(h):
        if j == reference:
            continue
        assignment = align_assignment(SlotSet(slot_tensors[j], head_indices[j]),
                                      ref_set, metric, matcher)
        inverse = np.argsort(np.asarray(assignment.mapping))
        acc = ad.add(acc, ad.permute_rows(slot_tensors[j], inverse))
    return ad.mul(acc, 1.0 / h)


def fuse(heads: list[SlotSet], reference: int, metric: str = "cosine",
         matcher: str = "hungarian") -> SlotSet:
    """Align every head to the reference and average; detached from any tape."""
    if not heads:
        raise ContractError("fuse needs at least one head")
    if not 0 <= reference < len(heads):
        raise ContractError(
            f"reference {reference} out of range for {len(heads)} heads")
    tensors = [Tensor(hs.values.copy()) for hs in heads]
    fused = _fuse_tensors(tensors, [hs.head_index for hs in heads],
                          reference, metric, matcher)
    return SlotSet(fused, heads[reference].head_index)


def fuse_for_training(heads: list[SlotSet], reference: int,
                      metric: str = "cosine",
                      matcher: str = "hungarian") -> SlotSet:
    """Same arithmetic as fuse, but kept on the tape so a loss on the fused
    slots backpropagates into every head's parameters."""
    if not heads:
        raise ContractError("fuse needs at least one head")
    if not 0 <= reference < len(heads):
        raise ContractError(
            f"reference {reference} out of range for {len(heads)} heads")
    fused = _fuse_tensors([hs.slots for hs in heads],
                          [hs.head_index for hs in heads],
                          reference, metric, matcher)
    return SlotSet(fused, heads[reference].head_index)
