"""Free-support Wasserstein barycenter of expert design matrices.

Alternating minimization of ``(1/N) sum_k ||T_k W_k - W_omega||_F^2``:

* with ``W_omega`` fixed, each ``T_k`` is the optimal assignment of the rows
  of ``W_k`` onto the rows of ``W_omega``;
* with the ``T_k`` fixed, ``W_omega`` is the mean of the aligned matrices.

The returned permutations are always optimal for the returned center, so the
Frobenius objective coincides with the mean transport cost at that point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, ShapeError
from .ot import Permutation, align, cost_matrix, solve_assignment

log = logging.getLogger(__name__)

INITS = ("mean", "first", "expert", "random")


@dataclass(frozen=True)
class BarycenterConfig:
    """``init`` is one of ``mean``, ``first``, ``expert`` (uses ``init_index``)
    or ``random`` (expert drawn with ``seed``).  ``restarts=True`` runs from the
    mean and from every expert and keeps the best fixed point.
    """

    max_iters: int = 100
    rel_tol: float = 1e-8
    init: str = "mean"
    init_index: int = 0
    seed: int = 0
    restarts: bool = False
    refine: bool = True  # leave-one-out re-alignment sweeps at each fixed point

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")

    def to_dict(self) -> dict:
        return {
            "max_iters": self.max_iters,
            "rel_tol": self.rel_tol,
            "init": self.init,
            "init_index": self.init_index,
            "seed": self.seed,
            "restarts": self.restarts,
            "refine": self.refine,
        }


@dataclass(frozen=True, eq=False)
class BarycenterResult:
    w_omega: np.ndarray
    perms: tuple
    wb_loss: float
    iterations: int
    converged: bool
    history: tuple = field(default=())


def _stack(ws) -> np.ndarray:
    if len(ws) == 0:
        raise EmptyInput("need at least one design matrix")
    mats = [np.asarray(w, dtype=np.float64) for w in ws]
    shape = mats[0].shape
    for m in mats:
        if m.ndim != 2 or m.shape != shape:
            raise ShapeError(f"design matrices must share one 2-D shape, got {m.shape} vs {shape}")
    return np.stack(mats)


def anchored_mean(stack) -> np.ndarray:
    """Mean over axis 0 as ``x_0 + mean(x_k - x_0)``; exact when all inputs are equal."""
    stack = np.asarray(stack, dtype=np.float64)
    return stack[0] + (stack - stack[0]).mean(axis=0)


def frobenius_objective(ws, w_omega, perms) -> float:
    """``(1/N) sum_k ||T_k W_k - W_omega||_F^2``."""
    stack = _stack(ws)
    center = np.asarray(w_omega, dtype=np.float64)
    if center.shape != stack.shape[1:]:
        raise ShapeError(f"center shape {center.shape} != {stack.shape[1:]}")
    if len(perms) != len(stack):
        raise ShapeError(f"{len(perms)} permutations for {len(stack)} matrices")
    total = 0.0
    for w, t in zip(stack, perms):
        d = t.apply(w) - center
        total += float(np.sum(d * d))
    return total / len(stack)


def _initial_center(stack, cfg: BarycenterConfig, init: str, index: int) -> np.ndarray:
    if init == "mean":
        return anchored_mean(stack)
    if init == "first":
        return stack[0].copy()
    if init == "random":
        index = int(np.random.default_rng(cfg.seed).integers(len(stack)))
    if not 0 <= index < len(stack):
        raise ValueError(f"init_index {index} outside [0, {len(stack)})")
    return stack[index].copy()


def _align_all(stack, center):
    perms, costs = [], []
    for w in stack:
        t, c = align(w, center)
        perms.append(t)
        costs.append(c)
    return perms, costs


def _loo_sweep(stack, perms):
    """Re-align each expert to the mean of the others; exact block update of T_k."""
    n = len(stack)
    aligned = np.stack([t.apply(w) for t, w in zip(perms, stack)])
    total = aligned.sum(axis=0)
    changed = False
    for k in range(n):
        rest = (total - aligned[k]) / (n - 1)
        t, _ = align(stack[k], rest)
        before = float(np.sum((aligned[k] - rest) ** 2))
        new_row = t.apply(stack[k])
        if float(np.sum((new_row - rest) ** 2)) < before * (1.0 - 1e-12) - 1e-300:
            total = total - aligned[k] + new_row
            aligned[k] = new_row
            perms[k] = t
            changed = True
    return perms, changed


def _run(stack, center, cfg: BarycenterConfig) -> BarycenterResult:
    n = len(stack)
    perms, costs = _align_all(stack, center)
    loss = sum(costs) / n
    history = [loss]
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        # fixed summation order over experts keeps the mean reproducible
        aligned = np.stack([t.apply(w) for t, w in zip(perms, stack)])
        center = anchored_mean(aligned)
        new_perms, costs = _align_all(stack, center)
        new_loss = sum(costs) / n
        history.append(new_loss)
        stable = all(np.array_equal(a.perm, b.perm) for a, b in zip(perms, new_perms))
        perms = new_perms
        small = loss - new_loss <= cfg.rel_tol * loss
        loss = new_loss
        if stable or new_loss == 0.0 or small:
            if cfg.refine and new_loss > 0.0:
                perms, changed = _loo_sweep(stack, list(perms))
                if changed:
                    continue
            converged = True
            break
    # final half-step: re-center, then re-align so perms are optimal for the center
    aligned = np.stack([t.apply(w) for t, w in zip(perms, stack)])
    center = anchored_mean(aligned)
    perms, _ = _align_all(stack, center)
    return BarycenterResult(
        w_omega=center,
        perms=tuple(perms),
        wb_loss=frobenius_objective(stack, center, perms),
        iterations=it,
        converged=converged,
        history=tuple(history),
    )


def compute_barycenter(ws, cfg: BarycenterConfig | None = None) -> BarycenterResult:
    """Barycenter expert ``W_omega`` and the permutations aligning each ``W_k`` to it."""
    cfg = cfg or BarycenterConfig()
    stack = _stack(ws)
    if len(stack) == 1:
        return BarycenterResult(
            w_omega=stack[0].copy(),
            perms=(Permutation.identity(stack.shape[1]),),
            wb_loss=0.0,
            iterations=1,
            converged=True,
            history=(0.0,),
        )
    if not cfg.restarts:
        return _run(stack, _initial_center(stack, cfg, cfg.init, cfg.init_index), cfg)

    starts = [("mean", 0)] + [("expert", k) for k in range(len(stack))]
    best = None
    for init, index in starts:
        res = _run(stack, _initial_center(stack, cfg, init, index), cfg)
        log.debug("restart %s[%d]: loss %.6g", init, index, res.wb_loss)
        if best is None or res.wb_loss < best.wb_loss:
            best = res
    return best


def verify_proposition(ws, result: BarycenterResult) -> dict:
    """Compare the Frobenius objective at ``result`` with the mean transport cost.

    The transport cost is the unnormalized one, ``n * W_2^2``, i.e. the cost of
    the rescaled permutation ``n * OT``; the two must agree at any fixed point.
    """
    stack = _stack(ws)
    frob = frobenius_objective(stack, result.w_omega, result.perms)
    costs = [solve_assignment(cost_matrix(w, result.w_omega)).cost for w in stack]
    wb = sum(costs) / len(stack)
    gap = abs(frob - wb)
    return {
        "frob_value": frob,
        "wb_value": wb,
        "gap": gap,
        "ok": gap <= 1e-9 * (1.0 + frob),
    }
