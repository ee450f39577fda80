"""Expert and MoE layer containers, design-matrix packing, router and forward passes.

An expert is either a two-layer MLP ``w2 @ act(w1 @ x + b1) + b2`` or the gated
(SwiGLU-style) form ``w2 @ (act(w1 @ x + b1) * (w3 @ x + b3)) + b2``.  Every
hidden neuron is a self-contained bottleneck-1 sub-MLP, which is what makes the
row-exchangeable *design matrix* view possible::

    two-layer : [w1 | b1 | w2.T]              shape (p_I, 2p + 1)
    gated     : [w1 | b1 | w3 | b3 | w2.T]    shape (p_I, 3p + 2)

``b2`` is not part of the design matrix; it is carried next to it unchanged.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ShapeError


class Kind(str, enum.Enum):
    TWO_LAYER = "two_layer"
    GATED = "gated"


class Activation(str, enum.Enum):
    RELU = "relu"
    GELU = "gelu"
    SILU = "silu"


_GELU_C = np.sqrt(2.0 / np.pi)


def activate(z, activation):
    """Element-wise activation. GELU uses the tanh approximation, SiLU is Swish with beta=1."""
    activation = Activation(activation)
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    if activation is Activation.GELU:
        return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))
    return z * expit(z)


def _frozen(a, ndim, name):
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ExpertWeights:
    """Weights of a single expert. Arrays are copied to read-only float64."""

    kind: Kind
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray | None = None
    b3: np.ndarray | None = None
    activation: Activation = Activation.RELU

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "kind", Kind(self.kind))
        set_(self, "activation", Activation(self.activation))
        set_(self, "w1", _frozen(self.w1, 2, "w1"))
        set_(self, "b1", _frozen(self.b1, 1, "b1"))
        set_(self, "w2", _frozen(self.w2, 2, "w2"))
        set_(self, "b2", _frozen(self.b2, 1, "b2"))
        p_inner, p = self.w1.shape
        if self.b1.shape != (p_inner,):
            raise ShapeError(f"b1 shape {self.b1.shape} != ({p_inner},)")
        if self.w2.shape != (p, p_inner):
            raise ShapeError(f"w2 shape {self.w2.shape} != ({p}, {p_inner})")
        if self.b2.shape != (p,):
            raise ShapeError(f"b2 shape {self.b2.shape} != ({p},)")
        if self.kind is Kind.GATED:
            if self.w3 is None or self.b3 is None:
                raise ShapeError("gated expert requires w3 and b3")
            set_(self, "w3", _frozen(self.w3, 2, "w3"))
            set_(self, "b3", _frozen(self.b3, 1, "b3"))
            if self.w3.shape != self.w1.shape or self.b3.shape != self.b1.shape:
                raise ShapeError("w3/b3 shapes must match w1/b1")
        elif self.w3 is not None or self.b3 is not None:
            raise ShapeError("two-layer expert must not carry w3/b3")

    @property
    def p(self) -> int:
        return self.w1.shape[1]

    @property
    def p_inner(self) -> int:
        return self.w1.shape[0]

    def allclose(self, other: "ExpertWeights", atol=0.0) -> bool:
        if self.kind is not other.kind or self.activation is not other.activation:
            return False
        names = ["w1", "b1", "w2", "b2"] + (["w3", "b3"] if self.kind is Kind.GATED else [])
        return all(
            getattr(self, n).shape == getattr(other, n).shape
            and np.allclose(getattr(self, n), getattr(other, n), rtol=0.0, atol=atol)
            for n in names
        )


@dataclass(frozen=True, eq=False)
class MoELayer:
    experts: tuple
    gate: np.ndarray
    top_k: int

    def __post_init__(self):
        experts = tuple(self.experts)
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "gate", _frozen(self.gate, 2, "gate"))
        if len(experts) < 1:
            raise ShapeError("an MoE layer needs at least one expert")
        first = experts[0]
        for e in experts[1:]:
            if (e.kind, e.p, e.p_inner, e.activation) != (
                first.kind, first.p, first.p_inner, first.activation
            ):
                raise ShapeError("all experts of a layer must share kind, shape and activation")
        if self.gate.shape != (len(experts), first.p):
            raise ShapeError(f"gate shape {self.gate.shape} != ({len(experts)}, {first.p})")
        if not 1 <= int(self.top_k) <= len(experts):
            raise ShapeError(f"top_k={self.top_k} outside [1, {len(experts)}]")
        object.__setattr__(self, "top_k", int(self.top_k))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def kind(self) -> Kind:
        return self.experts[0].kind

    @property
    def activation(self) -> Activation:
        return self.experts[0].activation

    @property
    def p(self) -> int:
        return self.experts[0].p

    @property
    def p_inner(self) -> int:
        return self.experts[0].p_inner


# -- design matrix -----------------------------------------------------------


def design_cols(kind, p: int) -> int:
    return 2 * p + 1 if Kind(kind) is Kind.TWO_LAYER else 3 * p + 2


def design_spans(kind, p: int) -> dict:
    """Column slices of every parameter block inside the design matrix."""
    if Kind(kind) is Kind.TWO_LAYER:
        return {"w1": slice(0, p), "b1": slice(p, p + 1), "w2": slice(p + 1, 2 * p + 1)}
    return {
        "w1": slice(0, p),
        "b1": slice(p, p + 1),
        "w3": slice(p + 1, 2 * p + 1),
        "b3": slice(2 * p + 1, 2 * p + 2),
        "w2": slice(2 * p + 2, 3 * p + 2),
    }


def weight_columns(kind, p: int) -> np.ndarray:
    """Boolean mask of design-matrix columns holding weights (not biases)."""
    mask = np.zeros(design_cols(kind, p), dtype=bool)
    for name, sl in design_spans(kind, p).items():
        if name.startswith("w"):
            mask[sl] = True
    return mask


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    data: np.ndarray
    kind: Kind
    p: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "data", _frozen(self.data, 2, "design matrix"))
        expected = design_cols(self.kind, self.p)
        if self.data.shape[1] != expected:
            raise ShapeError(
                f"{self.kind.value} design matrix with p={self.p} needs {expected} columns, "
                f"got {self.data.shape[1]}"
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def spans(self) -> dict:
        return design_spans(self.kind, self.p)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def pack_design(e: ExpertWeights) -> DesignMatrix:
    blocks = [e.w1, e.b1[:, None]]
    if e.kind is Kind.GATED:
        blocks += [e.w3, e.b3[:, None]]
    blocks.append(e.w2.T)
    return DesignMatrix(np.hstack(blocks), e.kind, e.p)


def unpack_design(d, kind, p: int, b2, activation=Activation.RELU) -> ExpertWeights:
    """Inverse of :func:`pack_design`; ``b2`` must be supplied by the caller."""
    data = np.asarray(d, dtype=np.float64)
    kind = Kind(kind)
    if data.ndim != 2 or data.shape[1] != design_cols(kind, p):
        raise ShapeError(
            f"design matrix shape {data.shape} inconsistent with {kind.value}, p={p} "
            f"(expects {design_cols(kind, p)} columns)"
        )
    sp = design_spans(kind, p)
    extra = {}
    if kind is Kind.GATED:
        extra = {"w3": data[:, sp["w3"]], "b3": data[:, sp["b3"]][:, 0]}
    return ExpertWeights(
        kind=kind,
        w1=data[:, sp["w1"]],
        b1=data[:, sp["b1"]][:, 0],
        w2=data[:, sp["w2"]].T,
        b2=b2,
        activation=activation,
        **extra,
    )


def permute_expert(e: ExpertWeights, order) -> ExpertWeights:
    """Reorder hidden neurons: new neuron i is old neuron ``order[i]``."""
    order = np.asarray(order)
    return unpack_design(pack_design(e).data[order], e.kind, e.p, e.b2, e.activation)


# -- forward passes ----------------------------------------------------------


def _check_input(x, p):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (p,) or x.ndim > 2:
        raise ShapeError(f"input shape {x.shape} incompatible with p={p}")
    return x


def expert_hidden(e: ExpertWeights, x):
    """Hidden activations (one entry per sub-MLP) for ``x`` of shape (p,) or (B, p)."""
    x = _check_input(x, e.p)
    h = activate(x @ e.w1.T + e.b1, e.activation)
    if e.kind is Kind.GATED:
        h = h * (x @ e.w3.T + e.b3)
    return h


def expert_forward(e: ExpertWeights, x):
    return expert_hidden(e, x) @ e.w2.T + e.b2


def route(gate, top_k: int, x) -> np.ndarray:
    """Softmax over the top-k router logits; the rest are exactly zero.

    Ties between equal logits go to the lower expert index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != gate.shape[1]:
        raise ShapeError(f"router expects a vector of length {gate.shape[1]}, got {x.shape}")
    logits = gate @ x
    top = np.argsort(-logits, kind="stable")[:top_k]
    w = np.exp(logits[top] - logits[top].max())
    scores = np.zeros(gate.shape[0])
    scores[top] = w / w.sum()
    return scores


def gate_scores(layer: MoELayer, x) -> np.ndarray:
    return route(layer.gate, layer.top_k, x)


def active_experts(scores) -> np.ndarray:
    return np.flatnonzero(np.asarray(scores) > 0.0)


def layer_forward(layer: MoELayer, x) -> np.ndarray:
    scores = gate_scores(layer, x)
    y = np.zeros(layer.p)
    for k in active_experts(scores):
        y += scores[k] * expert_forward(layer.experts[k], x)
    return y


def layer_forward_matrix(layer: MoELayer, x) -> np.ndarray:
    """All-experts block form ``W2_cat @ R @ h_cat + sum_k g_k b2_k``.

    ``R = kron(diag(g), I_pI)`` zeroes the hidden blocks of inactive experts.
    Every expert is evaluated here, unlike :func:`layer_forward`.
    """
    x = _check_input(x, layer.p)
    g = gate_scores(layer, x)
    n, p_inner = layer.n_experts, layer.p_inner
    w1 = np.vstack([e.w1 for e in layer.experts])
    b1 = np.concatenate([e.b1 for e in layer.experts])
    w2 = np.hstack([e.w2 for e in layer.experts])
    b2 = np.stack([e.b2 for e in layer.experts])
    h = activate(w1 @ x + b1, layer.activation)
    if layer.kind is Kind.GATED:
        w3 = np.vstack([e.w3 for e in layer.experts])
        b3 = np.concatenate([e.b3 for e in layer.experts])
        h = h * (w3 @ x + b3)
    router = router_matrix(g, p_inner)
    return w2 @ (router @ h) + g @ b2


def router_matrix(scores, p_inner: int) -> np.ndarray:
    return np.kron(np.diag(np.asarray(scores, dtype=np.float64)), np.eye(p_inner))
