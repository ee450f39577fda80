"""Single-file binary containers for dense models (.rmt) and compressed layers (.rmz).

Both share one framing::

    offset 0   4 bytes   magic, b"RMT1" or b"RMZ1"
    offset 4   4 bytes   header length H, unsigned little-endian
    offset 8   H bytes   UTF-8 JSON header (fixed key order, no timestamps)
    offset 8+H           payload: raw little-endian blobs, C order, back to back

Every tensor entry in the header records ``shape``, ``offset`` (relative to the
payload start) and ``byte_len``.  Floats are stored as float32; compute stays
float64 after loading.  In .rmz files the element type of each blob follows
from its role and from the manifest (sparse index blobs use the declared
``index_width``), so the manifest alone determines how to decode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .codec import CompressedLayer, KeptRows, LowRankResidual, Method, SparseResidual
from .errors import BadMagic, IoError, JsonError, TruncatedFile, VersionError
from .experts import Kind, MoELayer, unpack_design
from .ot import Permutation
from .synth import PRNG_ID

MODEL_MAGIC = b"RMT1"
COMPRESSED_MAGIC = b"RMZ1"
FORMAT_VERSION = 1

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")
_UINT = {16: np.dtype("<u2"), 32: np.dtype("<u4"), 64: np.dtype("<u8")}


def _dumps(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode("utf-8")


class _Writer:
    def __init__(self):
        self.chunks = []
        self.offset = 0

    def add(self, array, dtype, table: dict, name: str, with_dtype=False):
        a = np.ascontiguousarray(np.asarray(array).astype(dtype, copy=False))
        raw = a.tobytes()
        entry = {}
        if with_dtype:
            entry["dtype"] = "f32"
        entry.update({"shape": list(a.shape), "offset": self.offset, "byte_len": len(raw)})
        table[name] = entry
        self.chunks.append(raw)
        self.offset += len(raw)

    def payload(self) -> bytes:
        return b"".join(self.chunks)


def _frame(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = _dumps(header)
    return magic + struct.pack("<I", len(head)) + head + payload


def _unframe(data: bytes, magic: bytes):
    if len(data) < 8:
        raise TruncatedFile("file shorter than the 8-byte preamble")
    if data[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {data[:4]!r}")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise TruncatedFile("header extends past end of file")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise JsonError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise JsonError("header must be a JSON object")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    return header, memoryview(data)[8 + hlen :]


def _read(payload, table: dict, name: str, dtype) -> np.ndarray:
    try:
        entry = table[name]
        shape = tuple(int(s) for s in entry["shape"])
        offset, byte_len = int(entry["offset"]), int(entry["byte_len"])
    except (KeyError, TypeError, ValueError) as exc:
        raise JsonError(f"tensor table entry {name!r} malformed or missing ({exc})") from None
    dtype = np.dtype(dtype)
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if byte_len != expected:
        raise TruncatedFile(f"{name}: byte_len {byte_len} but shape {list(shape)} needs {expected}")
    if offset < 0 or offset + byte_len > len(payload):
        raise TruncatedFile(f"{name}: payload ends before tensor data ({offset + byte_len} > {len(payload)})")
    a = np.frombuffer(payload[offset : offset + byte_len], dtype=dtype).reshape(shape)
    return a.astype(np.float64) if dtype.kind == "f" else a.astype(dtype.newbyteorder("="))


def _write_file(path, data: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# -- dense models ---------------------------------------------------------------------


@dataclass
class MoEModel:
    layers: list
    synth_spec: dict | None = None
    meta: dict = field(default_factory=dict)


def dumps_model(layers, synth_spec: dict | None = None) -> bytes:
    layers = list(layers)
    first = layers[0]
    w = _Writer()
    tensors = {}
    for l, layer in enumerate(layers):
        for k, e in enumerate(layer.experts):
            names = ["w1", "b1"] + (["w3", "b3"] if e.kind is Kind.GATED else []) + ["w2", "b2"]
            for n in names:
                w.add(getattr(e, n), _F32, tensors, f"layers.{l}.experts.{k}.{n}", with_dtype=True)
        w.add(layer.gate, _F32, tensors, f"layers.{l}.gate", with_dtype=True)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": first.kind.value,
        "N": first.n_experts,
        "p": first.p,
        "p_I": first.p_inner,
        "top_k": first.top_k,
        "activation": first.activation.value,
        "layers": len(layers),
        "prng": PRNG_ID,
        "synth_spec": synth_spec,
        "tensors": tensors,
    }
    return _frame(MODEL_MAGIC, header, w.payload())


def loads_model(data: bytes) -> MoEModel:
    header, payload = _unframe(data, MODEL_MAGIC)
    try:
        kind = Kind(header["kind"])
        n, top_k, act = int(header["N"]), int(header["top_k"]), header["activation"]
        p = int(header["p"])
        n_layers = int(header.get("layers", 1))
        table = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise JsonError(f"model header incomplete: {exc}") from None
    for name, entry in table.items():
        if entry.get("dtype", "f32") != "f32":
            raise JsonError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
    layers = []
    for l in range(n_layers):
        experts = []
        for k in range(n):
            def get(name):
                return _read(payload, table, f"layers.{l}.experts.{k}.{name}", _F32)

            blocks = [get("w1"), get("b1")[:, None]]
            if kind is Kind.GATED:
                blocks += [get("w3"), get("b3")[:, None]]
            blocks.append(get("w2").T)
            experts.append(unpack_design(np.hstack(blocks), kind, p, get("b2"), act))
        gate = _read(payload, table, f"layers.{l}.gate", _F32)
        layers.append(MoELayer(tuple(experts), gate, top_k))
    return MoEModel(layers, header.get("synth_spec"), header)


def save_model(path, layers, synth_spec: dict | None = None) -> None:
    if isinstance(layers, MoELayer):
        layers = [layers]
    _write_file(path, dumps_model(layers, synth_spec))


def load_model(path) -> MoEModel:
    return loads_model(_read_file(path))


# -- compressed layers ------------------------------------------------------------


@dataclass
class CompressedModel:
    layers: dict
    manifest: dict
    synth_spec: dict | None = None


def _layer_blobs(w: _Writer, c: CompressedLayer, table: dict):
    width = _UINT[c.index_width]
    lost = None
    if c.center is not None:
        w.add(c.center, _F32, table, "center")
        lost = c.center - c.center.astype(_F32).astype(np.float64)
    w.add(c.gate, _F32, table, "gate")
    w.add(c.b2s, _F32, table, "b2")
    w.add(np.stack([t.perm for t in c.perms]), _U32, table, "perms")
    if c.groups is not None:
        w.add(c.groups, _U32, table, "groups")
    for k, r in enumerate(c.residuals):
        pre = f"residual.{k}."
        if isinstance(r, SparseResidual):
            if r.format == "coo":
                w.add(r.rows, width, table, pre + "rows")
            else:
                w.add(r.indptr, _U32, table, pre + "indptr")
            w.add(r.cols, width, table, pre + "cols")
            values = r.values
            if lost is not None and lost.shape == r.shape:
                # kept entries absorb the center's rounding error
                values = values + lost[r.row_indices(), r.cols.astype(np.int64)]
            w.add(values, _F32, table, pre + "values")
        elif isinstance(r, LowRankResidual):
            w.add(r.u, _F32, table, pre + "u")
            w.add(r.s, _F32, table, pre + "s")
            w.add(r.v, _F32, table, pre + "v")
        elif isinstance(r, KeptRows):
            w.add(r.rows, _U32, table, pre + "kept")
            w.add(r.data, _F32, table, pre + "data")
        else:
            w.add(r, _F32, table, pre + "dense")


def dumps_compressed(layers: dict, synth_spec: dict | None = None) -> bytes:
    """Serialize ``{layer_id: CompressedLayer}``; all layers share one method/config."""
    items = sorted(layers.items())
    first = items[0][1]
    w = _Writer()
    entries = []
    for layer_id, c in items:
        table = {}
        _layer_blobs(w, c, table)
        entries.append(
            {
                "layer_id": int(layer_id),
                "barycenter_result": c.bary_stats,
                "residual_norms": list(c.residual_norms) if c.residual_norms is not None else None,
                "blobs": table,
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "method": first.method.value,
        "keep_ratio": first.keep_ratio,
        "svd_rank": first.svd_rank,
        "sparse": {"format": first.sparse_format, "index_width": first.index_width},
        "barycenter": first.bary_config,
        "kind": first.kind.value,
        "N": first.n_experts,
        "p": first.p,
        "p_I": first.p_inner,
        "top_k": first.top_k,
        "activation": first.activation,
        "prng": PRNG_ID,
        "synth_spec": synth_spec,
        "layers": entries,
    }
    return _frame(COMPRESSED_MAGIC, manifest, w.payload())


def _decode_layer(m: dict, entry: dict, payload) -> CompressedLayer:
    method = Method(m["method"])
    kind = Kind(m["kind"])
    n, p, p_inner = int(m["N"]), int(m["p"]), int(m["p_I"])
    fmt = m["sparse"]["format"]
    width = int(m["sparse"]["index_width"])
    if width not in _UINT:
        raise JsonError(f"unsupported index_width {width}")
    t = entry["blobs"]
    keep_ratio = float(m["keep_ratio"])
    center = _read(payload, t, "center", _F32) if "center" in t else None
    rows = p_inner
    cols = 2 * p + 1 if kind is Kind.TWO_LAYER else 3 * p + 2
    residuals = []
    n_res = sum(1 for name in t if name.startswith("residual.") and name.endswith(
        (".values", ".u", ".data", ".dense")))
    for k in range(n_res):
        pre = f"residual.{k}."
        if pre + "values" in t:
            values = _read(payload, t, pre + "values", _F32)
            ccols = _read(payload, t, pre + "cols", _UINT[width])
            if fmt == "coo":
                rr = _read(payload, t, pre + "rows", _UINT[width])
                residuals.append(SparseResidual((rows, cols), fmt, width, values, ccols, rows=rr,
                                                keep_ratio=keep_ratio))
            else:
                ptr = _read(payload, t, pre + "indptr", _U32)
                residuals.append(SparseResidual((rows, cols), fmt, width, values, ccols, indptr=ptr,
                                                keep_ratio=keep_ratio))
        elif pre + "u" in t:
            residuals.append(LowRankResidual(
                _read(payload, t, pre + "u", _F32),
                _read(payload, t, pre + "s", _F32),
                _read(payload, t, pre + "v", _F32),
            ))
        elif pre + "kept" in t:
            kept = _read(payload, t, pre + "kept", _U32).astype(np.int64)
            residuals.append(KeptRows((rows, cols), kept, _read(payload, t, pre + "data", _F32)))
        else:
            residuals.append(_read(payload, t, pre + "dense", _F32))
    perms = _read(payload, t, "perms", _U32).astype(np.int64)
    groups = _read(payload, t, "groups", _U32).astype(np.int64) if "groups" in t else None
    norms = entry.get("residual_norms")
    return CompressedLayer(
        method=method,
        kind=kind,
        p=p,
        p_inner=p_inner,
        activation=m["activation"],
        top_k=int(m["top_k"]),
        keep_ratio=keep_ratio,
        center=center,
        residuals=tuple(residuals),
        b2s=_read(payload, t, "b2", _F32),
        gate=_read(payload, t, "gate", _F32),
        perms=tuple(Permutation(row) for row in perms),
        groups=groups,
        svd_rank=m.get("svd_rank"),
        sparse_format=fmt,
        index_width=width,
        bary_config=m.get("barycenter"),
        bary_stats=entry.get("barycenter_result"),
        residual_norms=tuple(norms) if norms is not None else None,
    )


def loads_compressed(data: bytes) -> CompressedModel:
    manifest, payload = _unframe(data, COMPRESSED_MAGIC)
    try:
        layers = {int(e["layer_id"]): _decode_layer(manifest, e, payload) for e in manifest["layers"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise JsonError(f"manifest incomplete: {exc!r}") from None
    return CompressedModel(layers, manifest, manifest.get("synth_spec"))


def save_compressed(path, layers, synth_spec: dict | None = None) -> None:
    if isinstance(layers, CompressedLayer):
        layers = {0: layers}
    _write_file(path, dumps_compressed(layers, synth_spec))


def load_compressed(path) -> CompressedModel:
    return loads_compressed(_read_file(path))


def as_stored(c: CompressedLayer) -> CompressedLayer:
    """``c`` rounded to storage precision, i.e. what a save/load round trip yields."""
    return loads_compressed(dumps_compressed({0: c})).layers[0]


def model_as_stored(layer: MoELayer) -> MoELayer:
    return loads_model(dumps_model([layer])).layers[0]
