import json

import numpy as np
import pytest

from resmoe.barycenter import compute_barycenter
from resmoe.codec import compute_residuals
from resmoe.experts import pack_design
from resmoe.synth import (
    PRNG_ID,
    Family,
    SpecError,
    Stream,
    SynthSpec,
    generate,
    generate_model,
    random_inputs,
    stream_id,
)

_M64 = (1 << 64) - 1


def philox4x64_10(counter, key):
    """Reference Philox-4x64-10 block function in pure Python."""
    c, k = list(counter), list(key)
    for _ in range(10):
        p0 = 0xD2E7470EE14C6C93 * c[0]
        p1 = 0xCA5A826395121157 * c[2]
        c = [(p1 >> 64) ^ c[1] ^ k[0], p1 & _M64, (p0 >> 64) ^ c[3] ^ k[1], p0 & _M64]
        k = [(k[0] + 0x9E3779B97F4A7C15) & _M64, (k[1] + 0xBB67AE8584CAA73B) & _M64]
    return c


def _designs(layer):
    return [pack_design(e).data for e in layer.experts]


def test_stream_reproducible():
    a, b = Stream(42, 3), Stream(42, 3)
    assert np.array_equal(a.raw(10), b.raw(10))
    assert not np.array_equal(Stream(42, 3).raw(4), Stream(42, 4).raw(4))


def test_stream_uniform_open_interval():
    u = Stream(1).uniform(100_000)
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01


def test_stream_normal_moments():
    z = Stream(2).normal((200_000,))
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
    assert Stream(2).normal((3, 5), sigma=2.0).shape == (3, 5)


def test_stream_odd_length_prefix():
    assert np.array_equal(Stream(3).normal(5), Stream(3).normal(6)[:5])


def test_stream_permutation_is_bijection():
    perm = Stream(4).permutation(50)
    assert sorted(perm.tolist()) == list(range(50))
    assert Stream(4).permutation(1).tolist() == [0]


@pytest.mark.parametrize("seed,sid", [(0, 0), (7, 5), (2**63 + 11, 2**40 + 3)])
def test_raw_words_match_reference_philox(seed, sid):
    # the bit generator advances its counter before the first block
    expected = philox4x64_10([1, 0, 0, 0], [seed, sid]) + philox4x64_10([2, 0, 0, 0], [seed, sid])
    assert Stream(seed, sid).raw(8).tolist() == expected


def test_frozen_values():
    assert Stream(0, 0).raw(3).tolist() == [213000021201967259, 4455796210202625458, 2055444239878205049]
    assert Stream(7, stream_id(0, 1, 2)).normal(3).tolist() == [
        1.4878634707304947, -1.6903748249066255, -0.8037167678322141,
    ]
    assert Stream(5).permutation(8).tolist() == [3, 7, 6, 0, 2, 1, 4, 5]


def test_box_muller_from_raw_words():
    words = Stream(0, 0).raw(2)
    z = Stream(0, 0).normal(2)
    r = np.sqrt(-2 * np.log(((words[0] >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53))
    theta = 2 * np.pi * ((words[1] >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    assert z[0] == r * np.cos(theta) and z[1] == r * np.sin(theta)


def test_generate_deterministic():
    spec = SynthSpec(seed=9, kind="gated", activation="silu")
    a, b = generate(spec), generate(spec)
    assert all(x.allclose(y) for x, y in zip(a.experts, b.experts))
    assert np.array_equal(a.gate, b.gate)


def test_generate_shapes():
    layer = generate(SynthSpec(seed=0, n_experts=3, p=4, p_inner=6, kind="gated", top_k=1, activation="silu"))
    assert layer.n_experts == 3 and layer.p == 4 and layer.p_inner == 6 and layer.top_k == 1
    assert layer.experts[0].w3.shape == (6, 4)


def test_planted_noiseless_zero_loss():
    layer = generate(SynthSpec(seed=1, family=Family("planted", noise_sigma=0.0)))
    assert compute_barycenter(_designs(layer)).wb_loss <= 1e-20


def test_copy_paste_residuals_small():
    for seed in range(10):
        layer = generate(SynthSpec(seed=seed, family=Family("copy_paste", perturb_sigma=0.01)))
        ws = _designs(layer)
        deltas = compute_residuals(ws, compute_barycenter(ws))
        ratio = max(np.linalg.norm(d) for d in deltas) / min(np.linalg.norm(w) for w in ws)
        assert ratio < 0.1


def test_planted_experts_are_permuted():
    layer = generate(SynthSpec(seed=2, family=Family("planted", noise_sigma=0.0)))
    ws = _designs(layer)
    assert not np.array_equal(ws[0], ws[1])
    assert sorted(map(tuple, ws[0])) == sorted(map(tuple, ws[1]))


def test_iid_experts_differ():
    layer = generate(SynthSpec(seed=3, family=Family("iid", sigma=0.5)))
    ws = _designs(layer)
    assert abs(np.std(ws[0]) - 0.5) < 0.05


def test_generate_model_layers_differ():
    layers = generate_model(SynthSpec(seed=4, layers=3))
    assert len(layers) == 3
    assert not np.array_equal(layers[0].gate, layers[1].gate)
    assert np.array_equal(layers[0].gate, generate(SynthSpec(seed=4, layers=3)).gate)


@pytest.mark.parametrize(
    "field,kwargs",
    [
        ("N", {"n_experts": 0}),
        ("p", {"p": 0}),
        ("p_I", {"p_inner": -1}),
        ("top_k", {"top_k": 9}),
        ("kind", {"kind": "triple"}),
        ("activation", {"activation": "tanh"}),
        ("seed", {"seed": -1}),
        ("family.name", {"family": Family("zipf")}),
        ("family.noise_sigma", {"family": Family("planted", noise_sigma=-1)}),
    ],
)
def test_spec_validation_names_field(field, kwargs):
    with pytest.raises(SpecError) as info:
        SynthSpec(**kwargs)
    assert info.value.field == field


def test_spec_json_round_trip():
    spec = SynthSpec(seed=7, n_experts=4, p=5, p_inner=9, kind="gated", top_k=2, activation="gelu",
                     family=Family("copy_paste", perturb_sigma=0.02), layers=2)
    back = SynthSpec.from_json(spec.to_json())
    assert back.to_dict() == spec.to_dict()


def test_spec_from_dict_errors():
    with pytest.raises(SpecError) as info:
        SynthSpec.from_dict({"N": 0, "p": 2, "p_I": 2})
    assert info.value.field == "N"
    with pytest.raises(SpecError):
        SynthSpec.from_dict({"p": 2, "p_I": 2})
    with pytest.raises(SpecError):
        SynthSpec.from_json("{not json")
    with pytest.raises(SpecError):
        SynthSpec.from_dict({"N": 2, "p": 2, "p_I": 2, "family": {"name": "iid", "bogus": 1}})
    assert SynthSpec.from_dict({"N": 2, "p": 2, "p_I": 2, "family": "iid"}).family.name == "iid"


def test_random_inputs():
    x = random_inputs(5, 3, 0)
    assert x.shape == (5, 3) and np.array_equal(x, random_inputs(5, 3, 0))
    assert not np.array_equal(x, random_inputs(5, 3, 1))


def test_prng_id_is_versioned():
    assert "philox" in PRNG_ID and PRNG_ID.endswith("v1")
    json.dumps(PRNG_ID)
