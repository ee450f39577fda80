import json
import struct

import numpy as np
import pytest

from helpers import random_layer
from resmoe.codec import CompressConfig, Method, compress_layer, compressed_forward
from resmoe.container import (
    as_stored,
    dumps_compressed,
    dumps_model,
    load_compressed,
    load_model,
    loads_compressed,
    loads_model,
    model_as_stored,
    save_compressed,
    save_model,
)
from resmoe.errors import BadMagic, IoError, JsonError, TruncatedFile, VersionError
from resmoe.experts import Kind, layer_forward
from resmoe.synth import PRNG_ID, Family, SynthSpec, generate, generate_model, random_inputs


def _split(data):
    (hlen,) = struct.unpack("<I", data[4:8])
    return data[:4], json.loads(data[8 : 8 + hlen]), data[8 + hlen :]


def _join(magic, header, payload):
    head = json.dumps(header, separators=(",", ":")).encode()
    return magic + struct.pack("<I", len(head)) + head + payload


def test_model_layout():
    layer = random_layer(0, n=2, p=3, p_inner=4)
    data = dumps_model([layer])
    magic, header, payload = _split(data)
    assert magic == b"RMT1"
    assert header["N"] == 2 and header["p"] == 3 and header["p_I"] == 4 and header["prng"] == PRNG_ID
    entries = sorted(header["tensors"].values(), key=lambda e: e["offset"])
    pos = 0
    for e in entries:
        assert e["dtype"] == "f32" and e["offset"] == pos
        assert e["byte_len"] == 4 * int(np.prod(e["shape"]))
        pos += e["byte_len"]
    assert pos == len(payload)
    w1 = header["tensors"]["layers.0.experts.1.w1"]
    raw = np.frombuffer(payload[w1["offset"] : w1["offset"] + w1["byte_len"]], "<f4").reshape(4, 3)
    assert np.array_equal(raw, layer.experts[1].w1.astype(np.float32))


@pytest.mark.parametrize("kind", list(Kind))
def test_model_round_trip(tmp_path, kind):
    layers = generate_model(SynthSpec(seed=1, kind=kind.value, layers=2, activation="silu"))
    path = tmp_path / "m.rmt"
    save_model(path, layers, {"seed": 1})
    model = load_model(path)
    assert model.synth_spec == {"seed": 1} and len(model.layers) == 2
    for a, b in zip(layers, model.layers):
        for ea, eb in zip(a.experts, b.experts):
            assert ea.allclose(eb, atol=1e-6)
            assert np.array_equal(eb.w1, ea.w1.astype(np.float32).astype(np.float64))
        assert b.top_k == a.top_k and b.activation is a.activation


def test_model_deterministic_bytes():
    layers = generate_model(SynthSpec(seed=7, layers=2))
    assert dumps_model(layers) == dumps_model(generate_model(SynthSpec(seed=7, layers=2)))


def test_model_ignores_unknown_keys():
    magic, header, payload = _split(dumps_model([random_layer(1)]))
    header["future_field"] = {"x": 1}
    model = loads_model(_join(magic, header, payload))
    assert model.layers[0].n_experts == 4


def test_model_bad_magic():
    data = bytearray(dumps_model([random_layer(2)]))
    data[0:4] = b"XXXX"
    with pytest.raises(BadMagic):
        loads_model(bytes(data))
    with pytest.raises(BadMagic):
        loads_model(dumps_compressed({0: compress_layer(random_layer(2), Method.SVD, 0.5)}))


def test_model_truncated_names_tensor():
    data = dumps_model([random_layer(3)])
    with pytest.raises(TruncatedFile) as info:
        loads_model(data[:-10])
    assert "layers.0.gate" in str(info.value)
    with pytest.raises(TruncatedFile):
        loads_model(data[:6])
    with pytest.raises(TruncatedFile):
        loads_model(data[:20])


def test_model_version_and_json_errors():
    magic, header, payload = _split(dumps_model([random_layer(4)]))
    header["format_version"] = 99
    with pytest.raises(VersionError):
        loads_model(_join(magic, header, payload))
    bad = magic + struct.pack("<I", 3) + b"{x]" + payload
    with pytest.raises(JsonError):
        loads_model(bad)
    del header["kind"]
    header["format_version"] = 1
    with pytest.raises(JsonError):
        loads_model(_join(magic, header, payload))


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_model(tmp_path / "nope.rmt")


@pytest.mark.parametrize("method", list(Method))
@pytest.mark.parametrize("sparse", [("coo", 16), ("csr", 32)])
def test_compressed_round_trip_bit_identical(tmp_path, method, sparse):
    layer = generate(SynthSpec(seed=3, kind="gated", activation="silu"))
    cfg = CompressConfig(sparse_format=sparse[0], index_width=sparse[1])
    c = compress_layer(layer, method, 0.25, cfg)
    path = tmp_path / "c.rmz"
    save_compressed(path, {0: c})
    back = load_compressed(path).layers[0]
    stored = as_stored(c)
    for x in random_inputs(20, layer.p, 5):
        assert np.array_equal(compressed_forward(back, x), compressed_forward(stored, x))
        assert np.max(np.abs(compressed_forward(back, x) - compressed_forward(c, x))) <= 1e-4
    assert back.method is c.method and back.svd_rank == c.svd_rank and back.keep_ratio == c.keep_ratio


@pytest.mark.parametrize("family", ["planted", "copy_paste"])
def test_compressed_full_keep_restores_outputs(family):
    layer = model_as_stored(generate(SynthSpec(seed=4, family=Family(family))))
    c = loads_compressed(dumps_compressed({0: compress_layer(layer, Method.RESMOE_UP, 1.0)})).layers[0]
    for x in random_inputs(20, layer.p, 6):
        assert np.max(np.abs(compressed_forward(c, x) - layer_forward(layer, x))) <= 1e-6


def test_compressed_manifest_contents():
    layer = generate(SynthSpec(seed=5))
    c = compress_layer(layer, Method.RESMOE_SVD, 0.25)
    _, m, _ = _split(dumps_compressed({2: c}, {"seed": 5}))
    assert m["method"] == "resmoe-svd" and m["svd_rank"] == c.svd_rank and m["keep_ratio"] == 0.25
    assert m["barycenter"]["max_iters"] == 100 and m["synth_spec"] == {"seed": 5}
    entry = m["layers"][0]
    assert entry["layer_id"] == 2 and entry["barycenter_result"]["iterations"] >= 1
    assert len(entry["residual_norms"]) == 8
    assert {"center", "gate", "b2", "perms", "residual.0.u", "residual.7.v"} <= set(entry["blobs"])


def test_compressed_deterministic_bytes():
    def build():
        layer = generate(SynthSpec(seed=6))
        return dumps_compressed({0: compress_layer(layer, Method.RESMOE_UP, 0.25)})

    assert build() == build()


def test_index_width_mismatch_is_truncation():
    layer = generate(SynthSpec(seed=7))
    data = dumps_compressed({0: compress_layer(layer, Method.UP_SEP, 0.25, CompressConfig(index_width=16))})
    magic, m, payload = _split(data)
    m["sparse"]["index_width"] = 32
    with pytest.raises(TruncatedFile) as info:
        loads_compressed(_join(magic, m, payload))
    assert "residual.0" in str(info.value)


def test_compressed_bad_magic_and_truncated():
    data = dumps_compressed({0: compress_layer(random_layer(8), Method.SP, 0.5)})
    with pytest.raises(BadMagic):
        loads_compressed(b"RMT1" + data[4:])
    with pytest.raises(TruncatedFile):
        loads_compressed(data[:-3])


def test_compressed_multi_layer(tmp_path):
    layers = generate_model(SynthSpec(seed=9, layers=3))
    cs = {l: compress_layer(layers[l], Method.AVG_UP, 0.5) for l in (1, 2)}
    path = tmp_path / "m.rmz"
    save_compressed(path, cs)
    back = load_compressed(path)
    assert sorted(back.layers) == [1, 2]
    x = np.ones(layers[0].p)
    for l in (1, 2):
        assert np.array_equal(compressed_forward(back.layers[l], x), compressed_forward(as_stored(cs[l]), x))


def test_perm_and_index_dtypes():
    c = compress_layer(generate(SynthSpec(seed=10)), Method.RESMOE_UP, 0.25, CompressConfig(index_width=16))
    _, m, _ = _split(dumps_compressed({0: c}))
    blobs = m["layers"][0]["blobs"]
    assert blobs["perms"]["byte_len"] == 4 * 8 * 32
    assert blobs["residual.0.cols"]["byte_len"] == 2 * c.residuals[0].nnz
