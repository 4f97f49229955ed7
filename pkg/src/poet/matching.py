"""Bipartite matching between target and prediction slots.

The pairwise cost couples the (raw) predicted probability of the target class
with the pose discrepancy; non-object targets cost zero against everything, so
the padded problem stays square and any human-optimal matching extends to a
full optimal one. The solver is an O(n^3) shortest-augmenting-path
implementation with potentials, scanning columns in ascending index order so
ties resolve deterministically toward smaller prediction indices. A factorial
brute-force solver doubles as its testing oracle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .loss import LossWeights, pose_loss
from .pose import PredictionSet, PredictionSlot, PoseVector, TargetSet

BRUTE_FORCE_MAX = 8
_TIE_EPS = 1e-9  # far below any sensible cost grid, far above float-sum noise


class SizeMismatch(ValueError):
    pass


class NonFiniteEntry(ValueError):
    pass


class TooLarge(ValueError):
    pass


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray

    def __init__(self, entries):
        arr = np.asarray(entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise SizeMismatch(f"cost matrix must be square, got shape {arr.shape}")
        object.__setattr__(self, "entries", arr)

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class Assignment:
    perm: tuple[int, ...]  # perm[i] = prediction index matched to target i
    total_cost: float


def match_cost(target: PoseVector, pred: PredictionSlot, weights: LossWeights) -> float:
    """Pairwise matching cost; zero for non-object targets."""
    if not target.is_human:
        return 0.0
    value, _ = pose_loss(target, pred.pose, weights)
    return -pred.class_probs[0] + value


def build_cost_matrix(targets: TargetSet, preds: PredictionSet, weights: LossWeights) -> CostMatrix:
    """All pairwise costs; plain floats, never recorded on a tape."""
    if len(targets) != len(preds):
        raise SizeMismatch(f"targets have {len(targets)} slots, predictions {len(preds)}")
    n = len(targets)
    entries = np.zeros((n, n))
    for i, target in enumerate(targets):
        if not target.is_human:
            continue  # indicator terms vanish; row stays zero
        for j, pred in enumerate(preds):
            entries[i, j] = match_cost(target, pred, weights)
    return CostMatrix(entries)


def _perm_total(entries: np.ndarray, perm) -> float:
    idx = np.arange(entries.shape[0])
    return float(entries[idx, list(perm)].sum())


def hungarian_assign(cost: CostMatrix | np.ndarray) -> Assignment:
    """Minimum-cost perfect matching via shortest augmenting paths with potentials.

    When several permutations share the optimal cost, the lexicographically
    smallest one is returned (detected through the zero-reduced-cost edges of
    the final potentials), matching the brute-force oracle's tie rule.
    """
    entries = cost.entries if isinstance(cost, CostMatrix) else CostMatrix(cost).entries
    if not np.all(np.isfinite(entries)):
        raise NonFiniteEntry("cost matrix contains non-finite entries")
    n = entries.shape[0]

    # 1-based columns; row p[j] is assigned to column j, p[0] tracks the row being inserted
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            cur = entries[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            if np.any(better):
                improved = cols[better]
                minv[improved] = cur[better]
                way[improved] = j0
            j1 = cols[np.argmin(minv[cols])]  # argmin takes the first minimum: smallest index wins ties
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    perm = np.empty(n, dtype=np.intp)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    perm = tuple(int(x) for x in perm)

    # every co-optimal assignment lives on edges whose reduced cost is ~0; if
    # any edge beyond the n solution edges qualifies, re-pick canonically
    reduced = entries - u[1:][:, None] - v[1:][None, :]
    zero_edges = reduced <= _TIE_EPS
    if int(zero_edges.sum()) > n:
        canonical = _lex_smallest_matching(zero_edges)
        if canonical is not None:
            perm = canonical
    return Assignment(perm, _perm_total(entries, perm))


def _rows_matchable(edges: np.ndarray, start: int, col_used: np.ndarray) -> bool:
    """Can rows start..n-1 be perfectly matched into the unused columns?"""
    n = edges.shape[0]
    owner = np.full(n, -1, dtype=np.intp)  # column -> row

    def augment(i: int, seen: np.ndarray) -> bool:
        for j in range(n):
            if col_used[j] or seen[j] or not edges[i, j]:
                continue
            seen[j] = True
            if owner[j] < 0 or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    for i in range(start, n):
        if not augment(i, np.zeros(n, dtype=bool)):
            return False
    return True


def _lex_smallest_matching(edges: np.ndarray) -> tuple[int, ...] | None:
    """Lexicographically smallest perfect matching on a boolean edge matrix."""
    n = edges.shape[0]
    col_used = np.zeros(n, dtype=bool)
    perm = []
    for i in range(n):
        for j in range(n):
            if col_used[j] or not edges[i, j]:
                continue
            col_used[j] = True
            if _rows_matchable(edges, i + 1, col_used):
                perm.append(j)
                break
            col_used[j] = False
        else:
            return None
    return tuple(perm)


_PERM_CACHE: dict[int, np.ndarray] = {}


def _all_perms(n: int) -> np.ndarray:
    """All permutations of range(n) in lexicographic order, shape (n!, n)."""
    if n not in _PERM_CACHE:
        _PERM_CACHE[n] = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    return _PERM_CACHE[n]


def brute_force_assign(cost: CostMatrix | np.ndarray) -> Assignment:
    """Exhaustive oracle: factorial search, ties to the lexicographically smallest permutation.

    Totals within a tiny tolerance of the minimum count as ties so that equal
    costs on a decimal grid (whose float representations differ by a few ulps
    once summed) are recognized as such; the first hit in lexicographic order
    wins.
    """
    entries = cost.entries if isinstance(cost, CostMatrix) else CostMatrix(cost).entries
    n = entries.shape[0]
    if n > BRUTE_FORCE_MAX:
        raise TooLarge(f"brute force limited to n <= {BRUTE_FORCE_MAX}, got {n}")
    if not np.all(np.isfinite(entries)):
        raise NonFiniteEntry("cost matrix contains non-finite entries")
    perms = _all_perms(n)
    totals = entries[np.arange(n)[None, :], perms].sum(axis=1)
    best = int(np.argmax(totals <= totals.min() + _TIE_EPS))
    best_perm = tuple(int(j) for j in perms[best])
    return Assignment(best_perm, _perm_total(entries, best_perm))
