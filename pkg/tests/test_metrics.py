import csv
import json

import numpy as np
import pytest

from helpers import random_layer
from resmoe.codec import CompressConfig, Method, compress_layer
from resmoe.errors import IndexOverflow, IoError, ShapeError
from resmoe.experts import Kind, MoELayer, permute_expert
from resmoe.metrics import (
    MB,
    REPORT_COLUMNS,
    FlopsModel,
    MemoryModel,
    approx_error,
    coo_bytes,
    csr_bytes,
    emit_report,
    evaluate_layer,
    flops_report,
    format_for,
    memory_report,
    method_flops,
    table9_flops,
    table9_rows,
)
from resmoe.synth import SynthSpec, generate


def _table(geometry):
    return {r.method: r for r in table9_rows(geometry, 0.25)}


def test_approx_error_zero_at_full():
    layer = random_layer(0)
    err = approx_error(layer, compress_layer(layer, Method.RESMOE_UP, 1.0), layer_id=3)
    assert err.epsilon_raw <= 1e-12 and err.layer_id == 3 and err.method == "resmoe-up"


def test_approx_error_normalization():
    layer = random_layer(1)
    err = approx_error(layer, compress_layer(layer, Method.UP_SEP, 0.3))
    assert err.epsilon_normalized == err.epsilon_raw / layer.p_inner and err.epsilon_raw > 0


def test_approx_error_invariant_to_row_permutation():
    layer = random_layer(2)
    order = np.random.default_rng(0).permutation(layer.p_inner)
    shuffled = MoELayer(tuple(permute_expert(e, order) for e in layer.experts), layer.gate, layer.top_k)
    for m in (Method.RESMOE_UP, Method.UP_SEP, Method.SVD, Method.SP):
        a = approx_error(layer, compress_layer(layer, m, 0.25))
        b = approx_error(shuffled, compress_layer(shuffled, m, 0.25))
        assert b.epsilon_normalized == pytest.approx(a.epsilon_normalized, rel=1e-9)


def test_approx_error_shape_mismatch():
    a, b = random_layer(3, n=4), random_layer(3, n=3)
    with pytest.raises(ShapeError):
        approx_error(a, compress_layer(b, Method.SVD, 0.5))


def test_byte_helpers():
    assert coo_bytes(10, 16) == 80
    assert csr_bytes(10, 4, 16) == 60 + 20
    assert csr_bytes(10, 4, 16, row_pointers=False) == 60


def test_memory_dense_layer():
    layer = random_layer(4, n=3, p=5, p_inner=7)
    # w1, b1, w2, b2 per expert
    assert memory_report(layer).bytes == 3 * (7 * 5 + 7 + 5 * 7 + 5) * 4


def test_memory_compressed_exact():
    layer = random_layer(5, n=4, p=6, p_inner=10)
    c = compress_layer(layer, Method.RESMOE_UP, 0.25, CompressConfig(sparse_format="coo", index_width=16))
    nnz = sum(r.nnz for r in c.residuals)
    center = 10 * 13 * 4
    assert memory_report(c).bytes == nnz * 8 + 4 * 6 * 4 + center
    no_center = memory_report(c, MemoryModel(include_center=False))
    assert no_center.bytes == nnz * 8 + 4 * 6 * 4
    c32 = compress_layer(layer, Method.RESMOE_UP, 0.25, CompressConfig(sparse_format="csr", index_width=32))
    assert memory_report(c32).breakdown["residuals"] == sum(r.nnz * 8 + 11 * 4 for r in c32.residuals)


def test_memory_low_rank_and_sp():
    layer = random_layer(6, n=2, p=4, p_inner=8)
    c = compress_layer(layer, Method.SVD, 0.5, CompressConfig(svd_rank=2))
    # u, v and the singular values
    assert memory_report(c).breakdown["residuals"] == 2 * 2 * (8 + 9 + 1) * 4
    sp = compress_layer(layer, Method.SP, 0.5)
    assert memory_report(sp).breakdown["residuals"] == 2 * 4 * 9 * 4


def test_table9_mixtral():
    t = _table("mixtral")
    expected = {"Full": 5376, "UP": 2016, "SP": 1344, "SVD": 1344, "GroupMerge": 1344,
                "ResMoE (UP)": 2688, "ResMoE (SVD)": 2016}
    assert {k: t[k].MB for k in expected} == expected
    assert t["Full"].bytes == 8 * 3 * 4096 * 14336 * 4
    assert "CSR" in t["UP"].memory_model


def test_table9_deepseek():
    t = _table("deepseek")
    expected = {"Full": 2112, "UP": 1056, "SP": 528, "SVD": 528, "GroupMerge": 528,
                "ResMoE (UP)": 1089, "ResMoE (SVD)": 561}
    assert {k: t[k].MB for k in expected} == expected
    assert "COO" in t["UP"].memory_model


def test_table9_switch_full():
    assert _table("switch")["Full"].bytes == 8 * 2 * 768 * 3072 * 4 == 144 * MB


def test_table9_unknown():
    with pytest.raises(KeyError):
        table9_rows("gpt", 0.25)


def test_csr_16bit_fits_mixtral_columns():
    # 12288 columns fit 16 bits; 14336 rows would too, but 3*4096+2 biased columns still fit
    from resmoe.codec import check_index_width

    check_index_width((14336, 12288), "csr", 16)
    with pytest.raises(IndexOverflow):
        check_index_width((4, 70_000), "csr", 16)


@pytest.mark.parametrize("geometry", ["switch", "mixtral", "deepseek"])
def test_flops_relations(geometry):
    f = table9_flops(geometry, 0.25)
    dense = f["Full"]
    for m in ("resmoe-up", "avg-up", "group-merge"):
        assert f[m] == dense
    assert f["sp"] == 0.25 * dense
    if geometry != "switch":
        assert f["sp"] < f["resmoe-svd"] < dense


def test_flops_full_keep_equals_dense():
    for kind in Kind:
        dense = method_flops(None, kind, 16, 32, 2)
        for m in Method:
            if m not in (Method.RESMOE_SVD, Method.SVD):
                assert method_flops(m, kind, 16, 32, 2, 1.0) == dense


def test_flops_report_dense_and_compressed():
    layer = random_layer(7, n=4, p=6, p_inner=10, top_k=2)
    assert flops_report(layer) == 2 * 2 * (2 * 6 * 10)
    sp = compress_layer(layer, Method.SP, 0.5)
    assert flops_report(sp) == 0.5 * flops_report(layer)
    assert flops_report(layer, FlopsModel(top_k=1)) == flops_report(layer) / 2


def test_emit_report_empty_csv(tmp_path):
    path = tmp_path / "r.csv"
    emit_report([], "csv", path)
    assert path.read_text() == ",".join(REPORT_COLUMNS) + "\n"


def test_emit_report_json_round_trip(tmp_path):
    layer = generate(SynthSpec(seed=1))
    row = evaluate_layer(layer, compress_layer(layer, Method.RESMOE_UP, 0.25), 0, 10, 0)
    path = tmp_path / "r.json"
    emit_report([row], "json", path)
    data = json.loads(path.read_text())
    assert list(data[0]) == list(REPORT_COLUMNS)
    assert data[0]["method"] == "resmoe-up" and data[0]["epsilon_raw"] == row.epsilon_raw


def test_emit_report_csv_columns(tmp_path):
    layer = generate(SynthSpec(seed=2))
    rows = [evaluate_layer(layer, compress_layer(layer, m, 0.5), 0, 5, 0) for m in Method]
    path = tmp_path / "r.csv"
    emit_report(rows, "csv", path)
    with open(path) as fh:
        parsed = list(csv.DictReader(fh))
    assert len(parsed) == len(Method) and list(parsed[0]) == list(REPORT_COLUMNS)


def test_emit_report_errors(tmp_path):
    with pytest.raises(IoError):
        emit_report([], "csv", tmp_path / "missing" / "r.csv")
    with pytest.raises(ValueError):
        emit_report([], "xml", tmp_path / "r.xml")


def test_format_for():
    assert format_for("a/b.JSON") == "json" and format_for("x.csv") == "csv"


def test_sweep_epsilon_non_increasing():
    layer = generate(SynthSpec(seed=3))
    eps = [approx_error(layer, compress_layer(layer, Method.RESMOE_UP, s)).epsilon_raw for s in (0.1, 0.25, 0.5, 1.0)]
    assert all(b <= a for a, b in zip(eps, eps[1:]))
