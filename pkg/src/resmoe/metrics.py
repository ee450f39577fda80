"""Approximation error, memory and FLOPs accounting, and report emission.

Byte counts follow an explicit :class:`MemoryModel`; FLOPs follow a
:class:`FlopsModel` counting matrix-vector multiply-accumulates per token.
The analytic helpers (:func:`table9_rows`, :func:`method_flops`) work from
layer geometry alone, so full-size layers never need to be materialized.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction

import numpy as np

from .codec import (
    CompressedLayer,
    KeptRows,
    LowRankResidual,
    Method,
    SparseResidual,
    check_index_width,
    compressed_forward,
    keep_count,
    restore_design,
    svd_rank_for_budget,
)
from .errors import IoError, ShapeError
from .experts import Kind, MoELayer, layer_forward, pack_design, weight_columns
from .synth import random_inputs

MB = 2**20


# -- approximation error --------------------------------------------------------


@dataclass
class ApproxError:
    layer_id: int
    method: str
    epsilon_raw: float
    epsilon_normalized: float


def approx_error(original: MoELayer, compressed: CompressedLayer, perms=None, layer_id: int = 0) -> ApproxError:
    """Mean squared Frobenius gap between aligned originals and restored experts.

    ``perms`` defaults to the permutations stored on ``compressed``; methods
    without alignment store identities.  All design-matrix blocks are included.
    """
    perms = compressed.perms if perms is None else perms
    n = original.n_experts
    if n != compressed.n_experts or len(perms) != n:
        raise ShapeError("expert count differs between original and compressed layer")
    total = 0.0
    for k, e in enumerate(original.experts):
        w = pack_design(e).data
        w_hat = restore_design(compressed, k)
        if w.shape != w_hat.shape:
            raise ShapeError(f"expert {k}: design shape {w.shape} vs restored {w_hat.shape}")
        d = perms[k].apply(w) - w_hat
        total += float(np.sum(d * d))
    eps = total / n
    return ApproxError(layer_id, compressed.method.value, eps, eps / original.p_inner)


def output_error(original: MoELayer, compressed: CompressedLayer, inputs) -> float:
    """Mean L2 distance between original and compressed layer outputs."""
    errs = [
        np.linalg.norm(compressed_forward(compressed, x) - layer_forward(original, x)) for x in inputs
    ]
    return float(np.mean(errs)) if errs else 0.0


# -- memory -------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryModel:
    """Storage assumptions for byte counting.

    ``dense`` counts every residual as a dense matrix (pruned entries stored
    as zeros).  ``include_row_pointers=False`` drops the CSR ``indptr`` array,
    matching per-entry accounting.
    """

    value_bytes: int = 4
    include_center: bool = True
    include_row_pointers: bool = True
    dense: bool = False

    def describe(self) -> str:
        parts = [f"{8 * self.value_bytes}-bit values"]
        if self.dense:
            parts.append("residuals stored dense")
        parts.append("center included" if self.include_center else "center excluded")
        if not self.include_row_pointers:
            parts.append("CSR row pointers excluded")
        return ", ".join(parts)


def dense_bytes(rows: int, cols: int, value_bytes: int = 4) -> int:
    return rows * cols * value_bytes


def coo_bytes(nnz: int, index_width: int, value_bytes: int = 4) -> int:
    return nnz * (value_bytes + 2 * index_width // 8)


def csr_bytes(nnz: int, rows: int, index_width: int, value_bytes: int = 4, row_pointers: bool = True) -> int:
    return nnz * (value_bytes + index_width // 8) + ((rows + 1) * 4 if row_pointers else 0)


def lowrank_bytes(rows: int, cols: int, k: int, value_bytes: int = 4) -> int:
    return k * (rows + cols + 1) * value_bytes


def artifact_bytes(a, model: MemoryModel) -> int:
    vb = model.value_bytes
    if isinstance(a, np.ndarray):
        return dense_bytes(*a.shape, vb)
    if model.dense:
        return dense_bytes(*a.shape, vb)
    if isinstance(a, SparseResidual):
        check_index_width(a.shape, a.format, a.index_width, a.nnz)
        if a.format == "coo":
            return coo_bytes(a.nnz, a.index_width, vb)
        return csr_bytes(a.nnz, a.shape[0], a.index_width, vb, model.include_row_pointers)
    if isinstance(a, LowRankResidual):
        return lowrank_bytes(a.shape[0], a.shape[1], a.rank, vb)
    if isinstance(a, KeptRows):
        # surviving neurons are stored compactly; their order is irrelevant
        return dense_bytes(*a.data.shape, vb)
    raise TypeError(f"unknown artifact {type(a).__name__}")


@dataclass
class MemoryReport:
    bytes: int
    breakdown: dict

    @property
    def mb(self) -> float:
        return self.bytes / MB


def memory_report(obj, model: MemoryModel | None = None) -> MemoryReport:
    """Exact byte count of an MoE layer's experts or of a compressed layer."""
    model = model or MemoryModel()
    vb = model.value_bytes
    if isinstance(obj, MoELayer):
        total = 0
        for e in obj.experts:
            arrays = [e.w1, e.b1, e.w2, e.b2] + ([e.w3, e.b3] if e.kind is Kind.GATED else [])
            total += sum(a.size for a in arrays) * vb
        return MemoryReport(total, {"experts": total})
    c = obj
    parts = {"residuals": sum(artifact_bytes(a, model) for a in c.residuals), "b2": c.b2s.size * vb}
    if c.center is not None and model.include_center:
        parts["center"] = dense_bytes(*c.center.shape, vb)
    return MemoryReport(sum(parts.values()), parts)


# -- FLOPs --------------------------------------------------------------------------


@dataclass(frozen=True)
class FlopsModel:
    """Per-token, per-layer matrix-vector cost; biases are not counted.

    Low-rank factors cost ``k * (rows + cols)`` MACs.  For a shared center
    the first-layer products (``W1 x`` and, when gated, ``W3 x``) are computed
    once per token; the second-layer product runs per activated expert.
    """

    flops_per_mac: int = 2
    top_k: int | None = None


def method_flops(
    method,
    kind,
    p: int,
    p_inner: int,
    top_k: int,
    keep_ratio: float = 1.0,
    svd_rank: int | None = None,
    nnz_per_expert: float | None = None,
    kept_rows: float | None = None,
    flops_per_mac: int = 2,
) -> float:
    """FLOPs of one token through one layer compressed with ``method``."""
    method = Method(method) if method is not None else None
    c = 2 if Kind(kind) is Kind.TWO_LAYER else 3
    weight_params = c * p * p_inner
    dense = weight_params * top_k
    if method is None or method in (Method.RESMOE_UP, Method.AVG_UP, Method.GROUP_MERGE):
        macs = dense
    elif method in (Method.UP_SEP, Method.UP_CONCAT):
        nnz = nnz_per_expert if nnz_per_expert is not None else keep_count(keep_ratio, weight_params)
        macs = nnz * top_k
    elif method is Method.SP:
        rows = kept_rows if kept_rows is not None else keep_count(keep_ratio, p_inner)
        macs = rows * c * p * top_k
    else:
        k = svd_rank if svd_rank is not None else svd_rank_for_budget(kind, p, p_inner, keep_ratio)
        low_rank = k * (p_inner + c * p)
        if method is Method.SVD:
            macs = low_rank * top_k
        else:
            shared = (c - 1) * p * p_inner
            macs = shared + top_k * (p * p_inner + low_rank)
    return flops_per_mac * macs


def flops_report(obj, model: FlopsModel | None = None) -> float:
    model = model or FlopsModel()
    top_k = model.top_k if model.top_k is not None else obj.top_k
    if isinstance(obj, MoELayer):
        return method_flops(None, obj.kind, obj.p, obj.p_inner, top_k, flops_per_mac=model.flops_per_mac)
    c = obj
    extra = {}
    if c.method in (Method.UP_SEP, Method.UP_CONCAT):
        mask = weight_columns(c.kind, c.p)
        counts = [int(mask[r.cols.astype(np.int64)].sum()) for r in c.residuals]
        extra["nnz_per_expert"] = float(np.mean(counts))
    elif c.method is Method.SP:
        extra["kept_rows"] = float(np.mean([len(r.rows) for r in c.residuals]))
    return method_flops(
        c.method, c.kind, c.p, c.p_inner, top_k, c.keep_ratio, svd_rank=c.svd_rank,
        flops_per_mac=model.flops_per_mac, **extra,
    )


# -- geometry tables ---------------------------------------------------------------


@dataclass(frozen=True)
class Geometry:
    name: str
    n_experts: int
    p: int
    p_inner: int
    kind: Kind
    top_k: int
    up_format: str
    up_index_width: int


GEOMETRIES = {
    "switch": Geometry("switch", 8, 768, 3072, Kind.TWO_LAYER, 1, "coo", 16),
    "mixtral": Geometry("mixtral", 8, 4096, 14336, Kind.GATED, 2, "csr", 16),
    "deepseek": Geometry("deepseek", 64, 2048, 1408, Kind.GATED, 6, "coo", 16),
}


@dataclass
class TableRow:
    geometry: str
    method: str
    bytes: int
    MB: float
    memory_model: str


def _nominal_lowrank_params(g: Geometry, s: float) -> int:
    c = 2 if g.kind is Kind.TWO_LAYER else 3
    k = Fraction(str(s)) * g.p_inner * c * g.p / (g.p_inner + c * g.p)
    return math.ceil(k * (g.p_inner + c * g.p))


def table9_rows(geometry: str, keep_ratio: float = 0.25) -> list:
    """Memory of one MoE layer per method, from geometry alone (bias-free experts)."""
    g = GEOMETRIES[geometry]
    s = keep_ratio
    c = 2 if g.kind is Kind.TWO_LAYER else 3
    rows, cols = g.p_inner, c * g.p
    expert = dense_bytes(rows, cols)
    nnz = keep_count(s, rows * cols)
    fmt, width = g.up_format, g.up_index_width
    check_index_width((rows, cols), fmt, width, nnz)
    if fmt == "coo":
        up = coo_bytes(nnz, width)
        up_desc = f"COO, 2x{width}-bit indices + 32-bit values"
    else:
        up = csr_bytes(nnz, rows, width, row_pointers=False)
        up_desc = f"CSR, {width}-bit column indices + 32-bit values, row pointers excluded"
    k_real = Fraction(str(s)) * rows * cols / (rows + cols)
    svd = dense_bytes(_nominal_lowrank_params(g, s), 1)
    svd_desc = f"rank budget k=s*p_I*{c}p/(p_I+{c}p)={float(k_real):.2f}, k*(p_I+{c}p) params, 32-bit"
    sp_rows = keep_count(s, rows)
    groups = keep_count(s, g.n_experts)
    n = g.n_experts
    entries = [
        ("Full", n * expert, f"dense, {n} experts x {rows}x{cols} 32-bit"),
        ("UP", n * up, up_desc),
        ("SP", n * dense_bytes(sp_rows, cols), f"dense, {sp_rows} of {rows} neurons kept"),
        ("SVD", n * svd, svd_desc),
        ("GroupMerge", groups * expert, f"dense, {n} experts merged into {groups}"),
        ("ResMoE (UP)", n * up + expert, up_desc + " + dense center"),
        ("ResMoE (SVD)", n * svd + expert, svd_desc + " + dense center"),
    ]
    return [TableRow(geometry, m, b, b / MB, d) for m, b, d in entries]


def table9_flops(geometry: str, keep_ratio: float = 0.25) -> dict:
    """Per-token FLOPs of one layer for each method at a reference geometry."""
    g = GEOMETRIES[geometry]
    args = (g.kind, g.p, g.p_inner, g.top_k, keep_ratio)
    out = {"Full": method_flops(None, *args)}
    for m in Method:
        out[m.value] = method_flops(m, *args)
    return out


# -- reports ------------------------------------------------------------------------


@dataclass
class ReportRow:
    layer_id: int
    method: str
    keep_ratio: float
    epsilon_raw: float
    epsilon_norm: float
    bytes: int
    MB: float
    flops: float
    output_l2_error: float


REPORT_COLUMNS = tuple(f.name for f in fields(ReportRow))


def evaluate_layer(
    original: MoELayer,
    compressed: CompressedLayer,
    layer_id: int = 0,
    n_inputs: int = 50,
    seed: int = 0,
    memory: MemoryModel | None = None,
    flops: FlopsModel | None = None,
) -> ReportRow:
    err = approx_error(original, compressed, layer_id=layer_id)
    mem = memory_report(compressed, memory)
    xs = random_inputs(n_inputs, original.p, seed)
    return ReportRow(
        layer_id=layer_id,
        method=compressed.method.value,
        keep_ratio=compressed.keep_ratio,
        epsilon_raw=err.epsilon_raw,
        epsilon_norm=err.epsilon_normalized,
        bytes=mem.bytes,
        MB=mem.mb,
        flops=flops_report(compressed, flops),
        output_l2_error=output_error(original, compressed, xs),
    )


def _as_dict(row) -> dict:
    return asdict(row) if not isinstance(row, dict) else dict(row)


def emit_report(rows, format: str, path, columns=REPORT_COLUMNS) -> None:
    """Write rows as CSV or JSON with a fixed column order."""
    format = format.lower()
    if format not in ("csv", "json"):
        raise ValueError(f"report format must be csv or json, got {format!r}")
    records = [{c: _as_dict(r)[c] for c in columns} for r in rows]
    try:
        with open(path, "w", newline="") as fh:
            if format == "csv":
                writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
                writer.writeheader()
                writer.writerows(records)
            else:
                json.dump(records, fh, indent=2)
                fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc


def format_for(path) -> str:
    return "json" if str(path).lower().endswith(".json") else "csv"
