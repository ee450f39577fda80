"""Residual extraction, residual/baseline codecs, and expert restoration.

The ResMoE pipeline keeps one shared barycenter expert ``W_omega`` and, for
every expert, a compressed residual of ``T_k W_k - W_omega``.  Restoration adds
the decoded residual back onto the center.  Restored experts are neuron-
permuted versions of the originals, which leaves their outputs unchanged.

Baselines live here too so every method produces the same
:class:`CompressedLayer` and can be restored, evaluated and serialized alike.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .barycenter import BarycenterConfig, BarycenterResult, anchored_mean, compute_barycenter
from .errors import IndexOverflow, RankError, ShapeError
from .experts import (
    ExpertWeights,
    Kind,
    MoELayer,
    active_experts,
    expert_forward,
    pack_design,
    route,
    unpack_design,
)
from .ot import Permutation, align

log = logging.getLogger(__name__)

INDEX_WIDTHS = (16, 32, 64)
SPARSE_FORMATS = ("coo", "csr")
_UINT = {16: np.uint16, 32: np.uint32, 64: np.uint64}


class Method(str, enum.Enum):
    RESMOE_UP = "resmoe-up"
    RESMOE_SVD = "resmoe-svd"
    UP_CONCAT = "up-concat"
    UP_SEP = "up-sep"
    SP = "sp"
    SVD = "svd"
    AVG_UP = "avg-up"
    GROUP_MERGE = "group-merge"

    @property
    def has_center(self) -> bool:
        return self in (Method.RESMOE_UP, Method.RESMOE_SVD, Method.AVG_UP)


def keep_count(s: float, size: int) -> int:
    """``ceil(s * size)``, robust to binary round-off in ``s``."""
    if not 0 < s <= 1:
        raise ValueError(f"keep ratio must lie in (0, 1], got {s}")
    return min(size, math.ceil(round(s * size, 9)))


# -- sparse residuals ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SparseResidual:
    """Magnitude-pruned matrix.

    COO keeps ``rows`` and ``cols`` at ``index_width`` bits; CSR keeps 32-bit
    ``indptr`` plus ``cols`` at ``index_width`` bits (``rows`` is None).
    """

    shape: tuple
    format: str
    index_width: int
    values: np.ndarray
    cols: np.ndarray
    rows: np.ndarray | None = None
    indptr: np.ndarray | None = None
    keep_ratio: float = 1.0

    @property
    def nnz(self) -> int:
        return len(self.values)

    def row_indices(self) -> np.ndarray:
        if self.format == "coo":
            return self.rows.astype(np.int64)
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr.astype(np.int64)))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_indices(), self.cols.astype(np.int64)] = self.values
        return out


def check_index_width(shape, fmt: str, index_width: int, nnz: int = 0):
    """Raise IndexOverflow if some coordinate of ``shape`` cannot be stored."""
    if index_width not in INDEX_WIDTHS:
        raise ValueError(f"index width must be one of {INDEX_WIDTHS}")
    if fmt not in SPARSE_FORMATS:
        raise ValueError(f"sparse format must be one of {SPARSE_FORMATS}")
    limit = 2**index_width - 1
    rows, cols = shape
    if cols - 1 > limit:
        raise IndexOverflow(f"{cols} columns do not fit {index_width}-bit indices")
    if fmt == "coo" and rows - 1 > limit:
        raise IndexOverflow(f"{rows} rows do not fit {index_width}-bit indices")
    if fmt == "csr" and nnz > 2**32 - 1:
        raise IndexOverflow(f"{nnz} stored entries overflow 32-bit row pointers")


def _encode(shape, flat_keep, values, fmt, index_width, s) -> SparseResidual:
    rows, cols = np.divmod(flat_keep, shape[1])
    dtype = _UINT[index_width]
    if fmt == "coo":
        return SparseResidual(
            tuple(shape), fmt, index_width, values, cols.astype(dtype), rows=rows.astype(dtype),
            keep_ratio=s,
        )
    indptr = np.zeros(shape[0] + 1, dtype=np.uint32)
    np.cumsum(np.bincount(rows, minlength=shape[0]), out=indptr[1:])
    return SparseResidual(
        tuple(shape), fmt, index_width, values, cols.astype(dtype), indptr=indptr, keep_ratio=s
    )


def prune_magnitude(m, keep_ratio: float, format: str = "coo", index_width: int = 32) -> SparseResidual:
    """Keep the ``ceil(s * size)`` largest-magnitude entries; ties by (row, col)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("prune_magnitude expects a matrix")
    n_keep = keep_count(keep_ratio, m.size)
    check_index_width(m.shape, format, index_width, n_keep)
    flat = m.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")[:n_keep]
    keep = np.sort(order)
    return _encode(m.shape, keep, flat[keep].copy(), format, index_width, keep_ratio)


def prune_concat(ms, keep_ratio: float, format: str = "coo", index_width: int = 32) -> list:
    """Magnitude pruning with one threshold shared across all matrices."""
    ms = [np.asarray(m, dtype=np.float64) for m in ms]
    for m in ms:
        check_index_width(m.shape, format, index_width)
    flat = np.concatenate([m.ravel() for m in ms])
    n_keep = keep_count(keep_ratio, flat.size)
    chosen = np.zeros(flat.size, dtype=bool)
    chosen[np.argsort(-np.abs(flat), kind="stable")[:n_keep]] = True
    out, start = [], 0
    for m in ms:
        local = np.flatnonzero(chosen[start : start + m.size])
        out.append(_encode(m.shape, local, m.ravel()[local].copy(), format, index_width, keep_ratio))
        start += m.size
    return out


@dataclass(frozen=True, eq=False)
class KeptRows:
    """Structured-pruning artifact: the surviving design-matrix rows only."""

    shape: tuple
    rows: np.ndarray
    data: np.ndarray

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows] = self.data
        return out


def structured_keep(d, keep_ratio: float) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    n_keep = keep_count(keep_ratio, d.shape[0])
    norms = np.abs(d).sum(axis=1)
    return np.sort(np.argsort(-norms, kind="stable")[:n_keep])


def prune_structured(d, keep_ratio: float) -> np.ndarray:
    """Zero all but the ``ceil(s * p_I)`` rows with largest L1 norm.

    A design-matrix row is one neuron, so this removes whole sub-MLPs.
    """
    d = np.asarray(d, dtype=np.float64)
    out = np.zeros_like(d)
    keep = structured_keep(d, keep_ratio)
    out[keep] = d[keep]
    return out


# -- low-rank residuals -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LowRankResidual:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    @property
    def rank(self) -> int:
        return len(self.s)

    @property
    def n_params(self) -> int:
        return self.rank * (self.shape[0] + self.shape[1] + 1)

    def to_dense(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def svd_rank_for_budget(kind, p: int, p_inner: int, keep_ratio: float) -> int:
    """Rank whose factors hold about ``s`` of an expert's weight parameters.

    Solves ``k * (p_I + c p) = s * c p p_I`` with ``c = 2`` (two-layer) or
    ``c = 3`` (gated), floored, at least 1.
    """
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep ratio must lie in (0, 1], got {keep_ratio}")
    c = 2 if Kind(kind) is Kind.TWO_LAYER else 3
    s = Fraction(str(keep_ratio))
    k = s * p_inner * c * p / (p_inner + c * p)
    return max(1, math.floor(k))


def svd_truncate(m, k: int) -> LowRankResidual:
    m = np.asarray(m, dtype=np.float64)
    if not 1 <= k <= min(m.shape):
        raise RankError(f"rank {k} outside [1, {min(m.shape)}] for shape {m.shape}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return LowRankResidual(u[:, :k].copy(), s[:k].copy(), vt[:k].T.copy())


# -- residuals ---------------------------------------------------------------


def compute_residuals(ws, bary: BarycenterResult) -> list:
    """``Delta_k = T_k W_k - W_omega`` for each expert."""
    if len(ws) != len(bary.perms):
        raise ShapeError(f"{len(ws)} matrices but {len(bary.perms)} permutations")
    out = []
    for w, t in zip(ws, bary.perms):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != bary.w_omega.shape:
            raise ShapeError(f"design matrix {w.shape} vs center {bary.w_omega.shape}")
        out.append(t.apply(w) - bary.w_omega)
    return out


# -- compressed layer ---------------------------------------------------------


@dataclass(frozen=True)
class CompressConfig:
    """``svd_rank`` overrides the budget rank; ``"full"`` means lossless rank."""

    bary: BarycenterConfig = field(default_factory=BarycenterConfig)
    sparse_format: str = "coo"
    index_width: int = 32
    svd_rank: int | str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.sparse_format not in SPARSE_FORMATS:
            raise ValueError(f"sparse_format must be one of {SPARSE_FORMATS}")
        if self.index_width not in INDEX_WIDTHS:
            raise ValueError(f"index_width must be one of {INDEX_WIDTHS}")


@dataclass(frozen=True, eq=False)
class CompressedLayer:
    method: Method
    kind: Kind
    p: int
    p_inner: int
    activation: str
    top_k: int
    keep_ratio: float
    center: np.ndarray | None
    residuals: tuple
    b2s: np.ndarray
    gate: np.ndarray
    perms: tuple
    groups: np.ndarray | None = None
    svd_rank: int | None = None
    sparse_format: str = "coo"
    index_width: int = 32
    bary_config: dict | None = None
    bary_stats: dict | None = None
    residual_norms: tuple | None = None

    @property
    def n_experts(self) -> int:
        return len(self.b2s)


def _low_rank_k(kind, p, p_inner, rows, cols, s, cfg: CompressConfig) -> int:
    if cfg.svd_rank == "full":
        return min(rows, cols)
    if cfg.svd_rank is not None:
        return int(cfg.svd_rank)
    return min(svd_rank_for_budget(kind, p, p_inner, s), rows, cols)


def _group_merge(ws, ratio, cfg: BarycenterConfig):
    """Greedy agglomeration on aligned Frobenius distance down to ceil(N*ratio) groups."""
    n = len(ws)
    target = max(1, keep_count(ratio, n))
    groups = [[k] for k in range(n)]
    centers = [ws[k] for k in range(n)]
    dist = {}

    def gap(i, j):
        key = (tuple(groups[i]), tuple(groups[j]))
        if key not in dist:
            dist[key] = align(centers[i], centers[j])[1]
        return dist[key]

    while len(groups) > target:
        best = None
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                d = gap(i, j)
                if best is None or d < best[0]:
                    best = (d, i, j)
        _, i, j = best
        members = sorted(groups[i] + groups[j])
        merged = compute_barycenter([ws[k] for k in members], cfg)
        groups[i], centers[i] = members, merged.w_omega
        del groups[j], centers[j]

    assignment = np.zeros(n, dtype=np.int64)
    perms = [None] * n
    reps = []
    for g, members in enumerate(groups):
        res = compute_barycenter([ws[k] for k in members], cfg)
        reps.append(res.w_omega)
        for k, t in zip(members, res.perms):
            assignment[k] = g
            perms[k] = t
    return reps, assignment, perms


def compress_layer(
    layer: MoELayer,
    method,
    keep_ratio: float,
    cfg: CompressConfig | None = None,
    bary: BarycenterResult | None = None,
) -> CompressedLayer:
    """Compress every expert of ``layer`` with ``method`` at keep ratio ``s``.

    For ``group-merge`` the keep ratio is the fraction of experts kept.  A
    precomputed barycenter may be passed to reuse it across a sweep.
    """
    method = Method(method)
    cfg = cfg or CompressConfig()
    keep_count(keep_ratio, 1)  # validates the ratio
    ws = [pack_design(e).data for e in layer.experts]
    rows, cols = ws[0].shape
    n = len(ws)
    ident = tuple(Permutation.identity(rows) for _ in range(n))
    b2s = np.stack([e.b2 for e in layer.experts])
    center = None
    perms = ident
    groups = None
    svd_rank = None
    bary_stats = None
    norms = None
    fmt, width = cfg.sparse_format, cfg.index_width

    if method in (Method.RESMOE_UP, Method.RESMOE_SVD):
        if bary is None:
            bary = compute_barycenter(ws, cfg.bary)
        center, perms = bary.w_omega, bary.perms
        bary_stats = {
            "wb_loss": bary.wb_loss,
            "iterations": bary.iterations,
            "converged": bary.converged,
        }
        deltas = compute_residuals(ws, bary)
        norms = tuple(float(np.linalg.norm(d)) for d in deltas)
        if method is Method.RESMOE_UP:
            residuals = tuple(prune_magnitude(d, keep_ratio, fmt, width) for d in deltas)
        else:
            svd_rank = _low_rank_k(layer.kind, layer.p, layer.p_inner, rows, cols, keep_ratio, cfg)
            residuals = tuple(svd_truncate(d, svd_rank) for d in deltas)
    elif method is Method.AVG_UP:
        center = anchored_mean(ws)
        deltas = [w - center for w in ws]
        norms = tuple(float(np.linalg.norm(d)) for d in deltas)
        residuals = tuple(prune_magnitude(d, keep_ratio, fmt, width) for d in deltas)
    elif method is Method.UP_SEP:
        residuals = tuple(prune_magnitude(w, keep_ratio, fmt, width) for w in ws)
    elif method is Method.UP_CONCAT:
        residuals = tuple(prune_concat(ws, keep_ratio, fmt, width))
    elif method is Method.SP:
        residuals = []
        for w in ws:
            keep = structured_keep(w, keep_ratio)
            residuals.append(KeptRows((rows, cols), keep, w[keep].copy()))
        residuals = tuple(residuals)
    elif method is Method.SVD:
        svd_rank = _low_rank_k(layer.kind, layer.p, layer.p_inner, rows, cols, keep_ratio, cfg)
        residuals = tuple(svd_truncate(w, svd_rank) for w in ws)
    else:
        reps, groups, merge_perms = _group_merge(ws, keep_ratio, cfg.bary)
        residuals = tuple(reps)
        perms = tuple(merge_perms)

    return CompressedLayer(
        method=method,
        kind=layer.kind,
        p=layer.p,
        p_inner=layer.p_inner,
        activation=layer.activation.value,
        top_k=layer.top_k,
        keep_ratio=float(keep_ratio),
        center=center,
        residuals=residuals,
        b2s=b2s,
        gate=np.array(layer.gate),
        perms=tuple(perms),
        groups=groups,
        svd_rank=svd_rank,
        sparse_format=fmt,
        index_width=width,
        bary_config=cfg.bary.to_dict() if method.has_center or method is Method.GROUP_MERGE else None,
        bary_stats=bary_stats,
        residual_norms=norms,
    )


def decode(artifact) -> np.ndarray:
    if isinstance(artifact, np.ndarray):
        return artifact
    return artifact.to_dense()


def restore_design(c: CompressedLayer, k: int) -> np.ndarray:
    """Design matrix of restored expert ``k`` (an approximation of ``T_k W_k``)."""
    if not 0 <= k < c.n_experts:
        raise IndexError(f"expert index {k} outside [0, {c.n_experts})")
    if c.method is Method.GROUP_MERGE:
        return np.asarray(c.residuals[c.groups[k]])
    d = decode(c.residuals[k])
    return d + c.center if c.center is not None else d


def restore_expert(c: CompressedLayer, k: int) -> ExpertWeights:
    return unpack_design(restore_design(c, k), c.kind, c.p, c.b2s[k], c.activation)


def compressed_forward(c: CompressedLayer, x) -> np.ndarray:
    """Route ``x``, restore only the activated experts and mix their outputs."""
    scores = route(c.gate, c.top_k, x)
    y = np.zeros(c.p)
    for k in active_experts(scores):
        y += scores[k] * expert_forward(restore_expert(c, k), x)
    return y


def restored_layer(c: CompressedLayer) -> MoELayer:
    """Materialize every restored expert as a dense :class:`MoELayer`."""
    return MoELayer(tuple(restore_expert(c, k) for k in range(c.n_experts)), c.gate, c.top_k)
