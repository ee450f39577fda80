"""Exact optimal transport between two uniform point clouds of equal size.

With uniform weights ``1/n`` on both sides the optimal coupling is a
permutation scaled by ``1/n``, so the transport problem reduces to a linear
assignment problem.  :func:`solve_assignment` is a shortest-augmenting-path
(Hungarian / Jonker-Volgenant family) solver running in O(n^3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidCost, ShapeError

# pairwise differences are materialized below this many floats
_EXACT_COST_LIMIT = 4_000_000


def _points(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"point cloud must be 2-D, got shape {arr.shape}")
    return arr


def cost_matrix(src, dst) -> np.ndarray:
    """Squared Euclidean distances ``C[i, j] = ||src[i] - dst[j]||^2``."""
    x, y = _points(src), _points(dst)
    if x.shape != y.shape:
        raise ShapeError(f"point clouds differ in shape: {x.shape} vs {y.shape}")
    n, d = x.shape
    if n * n * d <= _EXACT_COST_LIMIT:
        diff = x[:, None, :] - y[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    c = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * (x @ y.T)
    return np.maximum(c, 0.0)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Optimal coupling stored as an assignment; each point carries mass 1/n."""

    assignment: np.ndarray
    cost: float

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def mass_per_point(self) -> float:
        return 1.0 / self.n

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        m[np.arange(self.n), self.assignment] = self.mass_per_point
        return m


@dataclass(frozen=True, eq=False)
class Permutation:
    """Row permutation; source row ``i`` lands on target row ``perm[i]``."""

    perm: np.ndarray

    def __post_init__(self):
        perm = np.array(self.perm, dtype=np.int64)
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(len(perm))):
            raise ShapeError("perm is not a bijection on [n]")
        perm.setflags(write=False)
        object.__setattr__(self, "perm", perm)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    @property
    def n(self) -> int:
        return len(self.perm)

    def matrix(self) -> np.ndarray:
        t = np.zeros((self.n, self.n), dtype=np.int64)
        t[self.perm, np.arange(self.n)] = 1
        return t

    def apply(self, w) -> np.ndarray:
        """Return ``T @ w`` without forming T."""
        w = np.asarray(w)
        out = np.empty_like(w)
        out[self.perm] = w
        return out

    def order(self) -> np.ndarray:
        """Source row index feeding each target row (the inverse permutation)."""
        return np.argsort(self.perm)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(self.n)))


def solve_assignment(c) -> TransportPlan:
    """Minimum-cost perfect matching of a square cost matrix.

    Among the frontier columns of equal reduced cost the lowest index is
    augmented first, which makes the result deterministic under ties.

    Raises
    ------
    InvalidCost
        If ``c`` is not square or contains non-finite entries.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InvalidCost(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidCost("cost matrix contains non-finite entries")
    n = c.shape[0]
    if n == 0:
        return TransportPlan(np.zeros(0, dtype=np.int64), 0.0)

    # 1-based columns; column 0 is the virtual source of each augmentation
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            frontier = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(frontier)) + 1
            delta = frontier[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    assignment = np.empty(n, dtype=np.int64)
    assignment[owner[1:] - 1] = np.arange(n)
    cost = float(c[np.arange(n), assignment].sum())
    return TransportPlan(assignment, cost)


def plan_to_permutation(t: TransportPlan) -> Permutation:
    return Permutation(t.assignment)


def align(src, dst) -> tuple[Permutation, float]:
    """Optimal row permutation taking ``src`` onto ``dst`` and its total cost."""
    plan = solve_assignment(cost_matrix(src, dst))
    return plan_to_permutation(plan), plan.cost


def w2_squared(src, dst) -> float:
    """Squared 2-Wasserstein distance between the uniform row distributions."""
    plan = solve_assignment(cost_matrix(src, dst))
    return plan.cost / plan.n
