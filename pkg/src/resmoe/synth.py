"""Deterministic synthetic MoE layers.

Randomness comes from a Philox-4x64-10 counter-based stream keyed by
``(seed, stream_id)``.  Only the raw 64-bit words are taken from numpy; the
conversion to uniforms, gaussians (Box-Muller) and permutations (Fisher-Yates)
is done here, so outputs do not depend on numpy's distribution code.

Families
--------
``iid``         every expert drawn independently, entries ~ N(0, sigma^2)
``planted``     one base design matrix; each expert is a random row
                permutation of it (if ``permute``) plus N(0, noise_sigma^2)
``copy_paste``  base plus N(0, perturb_sigma^2) without permutation
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ResMoEError
from .experts import Activation, Kind, MoELayer, design_cols, unpack_design

PRNG_ID = "philox4x64-10/boxmuller/fisher-yates v1"
FAMILIES = ("iid", "planted", "copy_paste")

_ROLE_BASE, _ROLE_EXPERT, _ROLE_PERM, _ROLE_GATE, _ROLE_B2, _ROLE_INPUT = range(6)


class SpecError(ResMoEError, ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class Stream:
    """Portable random stream; identical ``(seed, stream_id)`` give identical draws."""

    def __init__(self, seed: int, stream_id: int = 0):
        key = np.array([seed % 2**64, stream_id % 2**64], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """Uniforms in the open interval (0, 1) with 53-bit resolution."""
        return ((self.raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, shape, sigma: float = 1.0) -> np.ndarray:
        shape = tuple(shape) if isinstance(shape, (tuple, list)) else (int(shape),)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return sigma * z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        words = self.raw(max(n - 1, 0))
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = (int(words[step]) * (i + 1)) >> 64
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def stream_id(layer: int, role: int, index: int = 0) -> int:
    return (layer << 40) | (role << 32) | index


@dataclass(frozen=True)
class Family:
    name: str = "planted"
    sigma: float = 1.0
    base_sigma: float = 1.0
    noise_sigma: float = 0.01
    permute: bool = True
    perturb_sigma: float = 0.01

    def to_dict(self) -> dict:
        if self.name == "iid":
            return {"name": "iid", "sigma": self.sigma}
        if self.name == "planted":
            return {
                "name": "planted",
                "base_sigma": self.base_sigma,
                "noise_sigma": self.noise_sigma,
                "permute": self.permute,
            }
        return {"name": "copy_paste", "base_sigma": self.base_sigma, "perturb_sigma": self.perturb_sigma}


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_experts: int = 8
    p: int = 16
    p_inner: int = 32
    kind: str = "two_layer"
    top_k: int = 2
    activation: str = "relu"
    family: Family = field(default_factory=Family)
    layers: int = 1
    gate_sigma: float = 1.0

    def __post_init__(self):
        for name, value in (("N", self.n_experts), ("p", self.p), ("p_I", self.p_inner), ("layers", self.layers)):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise SpecError(name, f"must be a positive integer, got {value!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise SpecError("seed", f"must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.top_k, int) or not 1 <= self.top_k <= self.n_experts:
            raise SpecError("top_k", f"must lie in [1, N={self.n_experts}], got {self.top_k!r}")
        try:
            Kind(self.kind)
        except ValueError:
            raise SpecError("kind", f"unknown expert kind {self.kind!r}") from None
        try:
            Activation(self.activation)
        except ValueError:
            raise SpecError("activation", f"unknown activation {self.activation!r}") from None
        fam = self.family
        if fam.name not in FAMILIES:
            raise SpecError("family.name", f"must be one of {FAMILIES}, got {fam.name!r}")
        for name in ("sigma", "base_sigma", "noise_sigma", "perturb_sigma"):
            if not getattr(fam, name) >= 0:
                raise SpecError(f"family.{name}", "must be >= 0")
        if not self.gate_sigma >= 0:
            raise SpecError("gate_sigma", "must be >= 0")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "N": self.n_experts,
            "p": self.p,
            "p_I": self.p_inner,
            "kind": self.kind,
            "top_k": self.top_k,
            "activation": self.activation,
            "layers": self.layers,
            "gate_sigma": self.gate_sigma,
            "family": self.family.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        if not isinstance(d, dict):
            raise SpecError("spec", "must be a JSON object")
        fam = d.get("family", {"name": "planted"})
        if isinstance(fam, str):
            fam = {"name": fam}
        if not isinstance(fam, dict):
            raise SpecError("family", "must be an object or a family name")
        known = set(asdict(Family()))
        unknown = set(fam) - known
        if unknown:
            raise SpecError("family", f"unknown keys {sorted(unknown)}")
        required = ("N", "p", "p_I")
        for name in required:
            if name not in d:
                raise SpecError(name, "missing")
        return cls(
            seed=d.get("seed", 0),
            n_experts=d["N"],
            p=d["p"],
            p_inner=d["p_I"],
            kind=d.get("kind", "two_layer"),
            top_k=d.get("top_k", min(2, d["N"]) if isinstance(d["N"], int) else 1),
            activation=d.get("activation", "relu"),
            family=Family(**fam),
            layers=d.get("layers", 1),
            gate_sigma=d.get("gate_sigma", 1.0),
        )

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError("spec", f"invalid JSON ({exc})") from None
        return cls.from_dict(d)


def _layer(spec: SynthSpec, layer: int) -> MoELayer:
    fam = spec.family
    kind = Kind(spec.kind)
    shape = (spec.p_inner, design_cols(kind, spec.p))
    seed = spec.seed
    designs = []
    if fam.name == "iid":
        for k in range(spec.n_experts):
            designs.append(Stream(seed, stream_id(layer, _ROLE_EXPERT, k)).normal(shape, fam.sigma))
    else:
        base = Stream(seed, stream_id(layer, _ROLE_BASE)).normal(shape, fam.base_sigma)
        noise = fam.noise_sigma if fam.name == "planted" else fam.perturb_sigma
        permute = fam.name == "planted" and fam.permute
        for k in range(spec.n_experts):
            d = base
            if permute:
                d = base[Stream(seed, stream_id(layer, _ROLE_PERM, k)).permutation(spec.p_inner)]
            d = d + Stream(seed, stream_id(layer, _ROLE_EXPERT, k)).normal(shape, noise)
            designs.append(d)
    b2_sigma = fam.sigma if fam.name == "iid" else fam.base_sigma
    experts = []
    for k, d in enumerate(designs):
        b2 = Stream(seed, stream_id(layer, _ROLE_B2, k)).normal((spec.p,), b2_sigma)
        experts.append(unpack_design(d, kind, spec.p, b2, spec.activation))
    gate = Stream(seed, stream_id(layer, _ROLE_GATE)).normal((spec.n_experts, spec.p), spec.gate_sigma)
    return MoELayer(tuple(experts), gate, spec.top_k)


def generate(spec: SynthSpec) -> MoELayer:
    """First layer of the model described by ``spec``."""
    return _layer(spec, 0)


def generate_model(spec: SynthSpec) -> list:
    return [_layer(spec, layer) for layer in range(spec.layers)]


def random_inputs(n: int, p: int, seed: int) -> np.ndarray:
    """``n`` standard-normal input vectors of length ``p``."""
    return Stream(seed, stream_id(0, _ROLE_INPUT)).normal((n, p))
