"""Shared builders for tests."""

import numpy as np

from resmoe.experts import Kind, MoELayer, design_cols, unpack_design


def random_layer(seed, n=4, p=6, p_inner=10, kind=Kind.TWO_LAYER, top_k=2, activation="relu"):
    rng = np.random.default_rng(seed)
    experts = tuple(
        unpack_design(
            rng.standard_normal((p_inner, design_cols(kind, p))), kind, p, rng.standard_normal(p), activation
        )
        for _ in range(n)
    )
    return MoELayer(experts, rng.standard_normal((n, p)), top_k)
