"""Executable checks of the method's mathematical claims, with independent oracles.

Each ``run_*_suite`` returns a :class:`SuiteSummary`; failures are counted,
never raised.  Summaries can be written with :func:`resmoe.metrics.emit_report`
using ``SUMMARY_COLUMNS``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .barycenter import BarycenterConfig, compute_barycenter, verify_proposition
from .codec import CompressConfig, Method, compress_layer, compressed_forward
from .experts import (
    Activation,
    ExpertWeights,
    Kind,
    design_cols,
    expert_forward,
    layer_forward,
    pack_design,
    permute_expert,
    unpack_design,
)
from .metrics import approx_error, output_error
from .ot import cost_matrix, solve_assignment
from .synth import Family, SynthSpec, generate, random_inputs

# (4!)^3
MAX_TUPLES = 13_824

SUMMARY_COLUMNS = ("suite", "cases", "passed", "failed", "max_deviation")


@dataclass
class SuiteSummary:
    suite: str
    cases: int = 0
    passed: int = 0
    max_deviation: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def failed(self) -> int:
        return self.cases - self.passed

    @property
    def ok(self) -> bool:
        return self.cases > 0 and self.failed == 0

    def record(self, ok: bool, deviation: float = 0.0, detail=None):
        self.cases += 1
        self.passed += bool(ok)
        self.max_deviation = max(self.max_deviation, float(deviation))
        if not ok:
            self.failures.append(detail)

    def as_row(self) -> dict:
        return {
            "suite": self.suite,
            "cases": self.cases,
            "passed": self.passed,
            "failed": self.failed,
            "max_deviation": self.max_deviation,
        }


@dataclass
class OracleCase:
    seed: int
    ws: np.ndarray  # (N, p_I, cols)
    brute_force_value: float

    @property
    def dims(self):
        return self.ws.shape


def brute_force_barycenter(ws) -> float:
    """Global optimum of the aligned Frobenius objective by full enumeration.

    Every tuple of row permutations is tried; for a fixed tuple the optimal
    center is the mean of the permuted matrices.
    """
    ws = np.asarray(ws, dtype=np.float64)
    n_exp, n, d = ws.shape
    perms = np.array(list(itertools.permutations(range(n))))
    if len(perms) ** n_exp > MAX_TUPLES:
        raise ValueError(f"{len(perms)}^{n_exp} tuples exceeds the cap of {MAX_TUPLES}")
    options = [w[perms] for w in ws]  # each (n!, n, d)
    total = np.zeros((len(perms),) * n_exp + (n, d))
    for k, opt in enumerate(options):
        idx = [None] * n_exp
        idx[k] = slice(None)
        total = total + opt[tuple(idx)]
    center = total / n_exp
    obj = np.zeros(center.shape[:-2])
    for k, opt in enumerate(options):
        idx = [None] * n_exp
        idx[k] = slice(None)
        diff = opt[tuple(idx)] - center
        obj = obj + np.sum(diff * diff, axis=(-2, -1))
    return float(obj.min() / n_exp)


def make_cases(count: int, seed: int = 0, n_experts=(2, 3), max_rows=4, max_cols=4, ties=False) -> list:
    """Random small instances; ``ties`` draws small integers and duplicates rows."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        n_exp = int(rng.choice(n_experts))
        n = int(rng.integers(2, max_rows + 1))
        d = int(rng.integers(1, max_cols + 1))
        if ties:
            ws = rng.integers(-2, 3, size=(n_exp, n, d)).astype(np.float64)
            ws[0, -1] = ws[0, 0]
        else:
            ws = rng.standard_normal((n_exp, n, d))
        cases.append(OracleCase(seed * 100_003 + i, ws, brute_force_barycenter(ws)))
    return cases


def run_optimality_suite(cases, tol: float = 1e-9, name: str = "optimality") -> SuiteSummary:
    """Barycenter optimality, Frobenius/transport equality, and permutation structure."""
    summary = SuiteSummary(name)
    cfg = BarycenterConfig(restarts=True)
    for case in cases:
        res = compute_barycenter(list(case.ws), cfg)
        check = verify_proposition(case.ws, res)
        opt_gap = abs(res.wb_loss - case.brute_force_value)
        perm_ok = True
        for w in case.ws:
            plan = solve_assignment(cost_matrix(w, res.w_omega))
            scaled = plan.n * plan.matrix()
            t = np.rint(scaled).astype(np.int64)
            perm_ok &= bool(
                np.array_equal(scaled, t)
                and set(np.unique(t)) <= {0, 1}
                and np.array_equal(t @ t.T, np.eye(plan.n, dtype=np.int64))
            )
        ok = opt_gap <= tol * (1.0 + case.brute_force_value) and check["ok"] and perm_ok
        summary.record(ok, max(opt_gap, check["gap"]), case.seed)
    return summary


def _random_expert(rng, kind, activation, p, p_inner) -> ExpertWeights:
    d = rng.standard_normal((p_inner, design_cols(kind, p)))
    return unpack_design(d, kind, p, rng.standard_normal(p), activation)


def run_equivariance_suite(trials: int = 1000, seed: int = 0, tol: float = 1e-12) -> SuiteSummary:
    """Permuting hidden neurons must not change an expert's output."""
    summary = SuiteSummary("equivariance")
    rng = np.random.default_rng(seed)
    kinds = list(Kind)
    acts = list(Activation)
    for i in range(trials):
        kind = kinds[i % len(kinds)]
        act = acts[(i // 2) % len(acts)]
        p, p_inner = int(rng.integers(1, 7)), int(rng.integers(1, 11))
        e = _random_expert(rng, kind, act, p, p_inner)
        x = rng.standard_normal(p)
        y = expert_forward(e, x)
        y_perm = expert_forward(permute_expert(e, rng.permutation(p_inner)), x)
        dev = float(np.max(np.abs(y - y_perm)))
        summary.record(dev <= tol * max(1.0, float(np.max(np.abs(y)))), dev, i)
    return summary


def run_codec_suite(seed: int = 0, n_inputs: int = 50, tol: float = 1e-10) -> SuiteSummary:
    """Every method at keep ratio 1 (full rank for SVD) is lossless."""
    summary = SuiteSummary("codec")
    cfg = CompressConfig(svd_rank="full")
    for kind in Kind:
        spec = SynthSpec(seed=seed, n_experts=4, p=6, p_inner=10, kind=kind.value, top_k=2,
                         activation="silu" if kind is Kind.GATED else "relu")
        layer = generate(spec)
        xs = random_inputs(n_inputs, spec.p, seed)
        for method in Method:
            c = compress_layer(layer, method, 1.0, cfg)
            dev = max(
                float(np.max(np.abs(compressed_forward(c, x) - layer_forward(layer, x)))) for x in xs
            )
            eps = approx_error(layer, c).epsilon_raw
            summary.record(dev <= tol and eps <= 1e-12, max(dev, eps), (kind.value, method.value))
    return summary


SWEEP = (0.1, 0.25, 0.5, 1.0)


def run_monotonicity_suite(seeds=range(10), method=Method.RESMOE_UP, grid=SWEEP, n_inputs=50) -> SuiteSummary:
    """Epsilon and output error must not increase with the keep ratio."""
    summary = SuiteSummary("monotonicity")
    for seed in seeds:
        layer = generate(SynthSpec(seed=seed, family=Family("planted", noise_sigma=1e-2)))
        ws = [pack_design(e).data for e in layer.experts]
        bary = compute_barycenter(ws) if Method(method) in (Method.RESMOE_UP, Method.RESMOE_SVD) else None
        xs = random_inputs(n_inputs, layer.p, seed)
        eps, out = [], []
        for s in grid:
            c = compress_layer(layer, method, s, bary=bary)
            eps.append(approx_error(layer, c).epsilon_raw)
            out.append(output_error(layer, c, xs))
        rise = max(
            max((b - a for a, b in zip(eps, eps[1:])), default=0.0),
            max((b - a for a, b in zip(out, out[1:])), default=0.0),
        )
        summary.record(rise <= 1e-12, max(rise, 0.0), seed)
    return summary


def run_all(quick: bool = False) -> list:
    n = 10 if quick else 50
    return [
        run_optimality_suite(make_cases(n, seed=1)),
        run_optimality_suite(make_cases(max(n // 5, 2), seed=2, ties=True), name="optimality_ties"),
        run_equivariance_suite(100 if quick else 1000),
        run_codec_suite(),
        run_monotonicity_suite(range(3) if quick else range(10)),
    ]
