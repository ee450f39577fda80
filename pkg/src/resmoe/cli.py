"""Command-line driver: ``resmoe gen|compress|eval|forward|tables|verify``.

Exit codes: 0 success, 1 user error (bad flags, bad inputs, unreadable files),
2 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .barycenter import BarycenterConfig, compute_barycenter
from .codec import (
    CompressConfig,
    Method,
    check_index_width,
    compress_layer,
    compressed_forward,
    svd_rank_for_budget,
)
from .container import load_compressed, load_model, save_compressed, save_model
from .errors import ResMoEError
from .experts import active_experts, design_cols, layer_forward, pack_design, route
from .metrics import (
    GEOMETRIES,
    REPORT_COLUMNS,
    emit_report,
    evaluate_layer,
    format_for,
    table9_flops,
    table9_rows,
)
from .plotting import plot_sweep
from .synth import SynthSpec, generate_model, random_inputs

log = logging.getLogger("resmoe")

SPARSE_CHOICES = ("coo16", "coo32", "coo64", "csr16", "csr32", "csr64")
UP_METHODS = (Method.RESMOE_UP, Method.AVG_UP, Method.UP_SEP, Method.UP_CONCAT)
SVD_METHODS = (Method.RESMOE_SVD, Method.SVD)
BARY_METHODS = (Method.RESMOE_UP, Method.RESMOE_SVD, Method.GROUP_MERGE)


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _keep_ratio(text: str) -> float:
    try:
        s = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < s <= 1:
        raise argparse.ArgumentTypeError(f"keep ratio must lie in (0, 1], got {text}")
    return s


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _seed(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 0:
        raise argparse.ArgumentTypeError(f"seed must be >= 0, got {n}")
    return n


def _layer_range(text: str) -> tuple:
    """Half-open ``a..b``; either bound may be omitted."""
    if ".." not in text:
        raise argparse.ArgumentTypeError(f"layer range must look like a..b, got {text!r}")
    a, b = text.split("..", 1)
    try:
        lo = int(a) if a else None
        hi = int(b) if b else None
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer range {text!r}") from None
    if (lo is not None and lo < 0) or (lo is not None and hi is not None and hi <= lo):
        raise argparse.ArgumentTypeError(f"empty or negative layer range {text!r}")
    return lo, hi


def _svd_rank(text: str):
    return "full" if text == "full" else _positive_int(text)


def _sweep(text: str) -> list:
    return [_keep_ratio(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resmoe", description="Barycenter-residual compression for MoE layers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic model file (.rmt)")
    p.add_argument("--spec", required=True, help="path to a synth spec JSON file")
    p.add_argument("--out", required=True, help="output .rmt path")

    p = sub.add_parser("compress", help="compress a model into a .rmz artifact")
    p.add_argument("--model", required=True)
    p.add_argument("--method", required=True, choices=[m.value for m in Method])
    p.add_argument("--keep-ratio", required=True, type=_keep_ratio)
    p.add_argument("--layers", type=_layer_range, help="half-open layer range a..b (default: all)")
    p.add_argument("--center", choices=("wb", "avg", "none"),
                   help="center for residual methods (resmoe-up: wb|avg|none, resmoe-svd: wb|none)")
    p.add_argument("--sparse", choices=SPARSE_CHOICES, help="residual encoding for pruning methods")
    p.add_argument("--bary-iters", type=_positive_int)
    p.add_argument("--bary-tol", type=float)
    p.add_argument("--bary-restarts", action="store_true", help="restart from the mean and every expert")
    p.add_argument("--svd-rank", type=_svd_rank, help="override the budget rank (integer or 'full')")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a compressed artifact against its model")
    p.add_argument("--model", required=True)
    p.add_argument("--compressed", required=True)
    p.add_argument("--inputs", type=_positive_int, default=50, help="random inputs for output error")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--report", required=True, help="report path (.csv or .json); a .png figure is written beside it")
    p.add_argument("--sweep", type=_sweep, help="comma-separated keep ratios to recompress and evaluate")

    p = sub.add_parser("forward", help="run inputs through a compressed layer")
    p.add_argument("--compressed", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="JSON vector, or path to a JSON file holding a vector or list of vectors")
    src.add_argument("--random", type=_positive_int, metavar="N", help="N random standard-normal inputs")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--compare", help="original .rmt for an L2 comparison")
    p.add_argument("--layer", type=int, help="layer id (default: first stored layer)")

    p = sub.add_parser("tables", help="memory (and FLOPs) of one layer at a reference geometry")
    p.add_argument("--geometry", required=True, help="|".join(GEOMETRIES))
    p.add_argument("--keep-ratio", type=_keep_ratio, default=0.25)
    p.add_argument("--flops", action="store_true", help="also print per-token FLOPs")

    p = sub.add_parser("verify", help="run the property suites and print a summary")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--report", help="optional summary path (.csv or .json)")
    return parser


# -- subcommands --------------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".9g")


def _vec(v) -> str:
    return "[" + ", ".join(_fmt(x) for x in np.ravel(v)) + "]"


def cmd_gen(args) -> int:
    try:
        text = Path(args.spec).read_text()
    except OSError as exc:
        raise UserError(f"cannot read spec {args.spec}: {exc.strerror}") from None
    spec = SynthSpec.from_json(text)
    save_model(args.out, generate_model(spec), spec.to_dict())
    digest = hashlib.sha256(Path(args.out).read_bytes()).hexdigest()
    print(f"wrote {args.out} layers={spec.layers} N={spec.n_experts} p={spec.p} p_I={spec.p_inner} sha256={digest}")
    return 0


def _compress_settings(args, kind, p, p_inner):
    method = Method(args.method)
    if args.center is not None:
        if method is Method.RESMOE_UP:
            method = {"wb": Method.RESMOE_UP, "avg": Method.AVG_UP, "none": Method.UP_SEP}[args.center]
        elif method is Method.RESMOE_SVD and args.center in ("wb", "none"):
            method = Method.RESMOE_SVD if args.center == "wb" else Method.SVD
        elif method is Method.AVG_UP and args.center == "avg":
            pass
        else:
            raise UserError(f"--center {args.center} is not compatible with --method {args.method}")
    if args.sparse is not None and method not in UP_METHODS:
        raise UserError(f"--sparse applies to pruning methods, not {method.value}")
    if args.svd_rank is not None and method not in SVD_METHODS:
        raise UserError(f"--svd-rank applies to svd methods, not {method.value}")
    bary_flags = args.bary_iters is not None or args.bary_tol is not None or args.bary_restarts
    if bary_flags and method not in BARY_METHODS:
        raise UserError(f"--bary-* flags apply to barycenter methods, not {method.value}")
    if args.bary_tol is not None and not args.bary_tol > 0:
        raise UserError("--bary-tol must be > 0")
    fmt, width = "coo", 32
    if args.sparse:
        fmt, width = args.sparse[:3], int(args.sparse[3:])
    if method in UP_METHODS:
        check_index_width((p_inner, design_cols(kind, p)), fmt, width)
    if isinstance(args.svd_rank, int) and args.svd_rank > min(p_inner, design_cols(kind, p)):
        raise UserError(f"--svd-rank {args.svd_rank} exceeds min(p_I, cols) of the design matrix")
    bary = BarycenterConfig(
        max_iters=args.bary_iters or 100,
        rel_tol=args.bary_tol or 1e-8,
        seed=args.seed,
        restarts=args.bary_restarts,
    )
    cfg = CompressConfig(bary=bary, sparse_format=fmt, index_width=width, svd_rank=args.svd_rank, seed=args.seed)
    return method, cfg


def _select_layers(n_layers: int, rng) -> list:
    if rng is None:
        return list(range(n_layers))
    lo, hi = rng
    lo = 0 if lo is None else lo
    hi = n_layers if hi is None else hi
    if hi > n_layers:
        raise UserError(f"layer range {lo}..{hi} exceeds the model's {n_layers} layers")
    return list(range(lo, hi))


def cmd_compress(args) -> int:
    model = load_model(args.model)
    first = model.layers[0]
    method, cfg = _compress_settings(args, first.kind, first.p, first.p_inner)
    ids = _select_layers(len(model.layers), args.layers)
    out = {}
    for l in ids:
        layer = model.layers[l]
        log.info("compressing layer %d with %s", l, method.value)
        c = compress_layer(layer, method, args.keep_ratio, cfg)
        out[l] = c
        print(f"layer {l} method={method.value} keep_ratio={_fmt(args.keep_ratio)}")
        if c.bary_stats:
            st = c.bary_stats
            print(f"  wb_loss={_fmt(st['wb_loss'])} iterations={st['iterations']} converged={st['converged']}")
        if c.residual_norms is not None:
            print("  residual_norms=" + _vec(c.residual_norms))
        if c.svd_rank is not None:
            print(f"  svd_rank={c.svd_rank}")
    save_compressed(args.out, out, model.synth_spec)
    print(f"wrote {args.out}")
    return 0


def _check_match(layer, c, l):
    got = (c.kind, c.n_experts, c.p, c.p_inner)
    want = (layer.kind, layer.n_experts, layer.p, layer.p_inner)
    if got != want:
        raise UserError(
            f"layer {l}: compressed (kind, N, p, p_I)={tuple(map(str, got))} does not match model {tuple(map(str, want))}"
        )


def _recompress_config(c) -> CompressConfig:
    bary = BarycenterConfig(**c.bary_config) if c.bary_config else BarycenterConfig()
    return CompressConfig(bary=bary, sparse_format=c.sparse_format, index_width=c.index_width)


def cmd_eval(args) -> int:
    model = load_model(args.model)
    comp = load_compressed(args.compressed)
    fmt = format_for(args.report)
    rows = []
    for l, c in sorted(comp.layers.items()):
        if not 0 <= l < len(model.layers):
            raise UserError(f"compressed layer {l} is not present in {args.model}")
        layer = model.layers[l]
        _check_match(layer, c, l)
        if not args.sweep:
            rows.append(evaluate_layer(layer, c, l, args.inputs, args.seed))
            continue
        cfg = _recompress_config(c)
        bary = None
        if c.method in (Method.RESMOE_UP, Method.RESMOE_SVD):
            bary = compute_barycenter([pack_design(e).data for e in layer.experts], cfg.bary)
        for s in args.sweep:
            cs = compress_layer(layer, c.method, s, cfg, bary=bary)
            rows.append(evaluate_layer(layer, cs, l, args.inputs, args.seed))
    emit_report(rows, fmt, args.report)
    fig = Path(args.report).with_suffix(".png")
    plot_sweep(rows, fig, title=f"{rows[0].method}" if rows else None)
    print(",".join(REPORT_COLUMNS))
    for r in rows:
        vals = [getattr(r, k) for k in REPORT_COLUMNS]
        print(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in vals))
    print(f"wrote {args.report} and {fig}")
    return 0


def _load_inputs(args, p: int) -> np.ndarray:
    if args.random is not None:
        return random_inputs(args.random, p, args.seed)
    text = args.input
    path = Path(text)
    try:
        if path.is_file():
            text = path.read_text()
    except OSError:
        pass
    try:
        xs = np.asarray(json.loads(text), dtype=np.float64)
    except (json.JSONDecodeError, ValueError, TypeError):
        raise UserError("--input must be a JSON vector of numbers or a list of vectors") from None
    if xs.ndim == 1:
        xs = xs[None, :]
    if xs.ndim != 2 or xs.shape[1] != p:
        raise UserError(f"input dimension {xs.shape[-1] if xs.ndim else 0} does not match p={p}")
    return xs


def cmd_forward(args) -> int:
    comp = load_compressed(args.compressed)
    l = min(comp.layers) if args.layer is None else args.layer
    if l not in comp.layers:
        raise UserError(f"layer {l} not in {args.compressed} (have {sorted(comp.layers)})")
    c = comp.layers[l]
    xs = _load_inputs(args, c.p)
    original = None
    if args.compare:
        model = load_model(args.compare)
        if not 0 <= l < len(model.layers):
            raise UserError(f"layer {l} is not present in {args.compare}")
        original = model.layers[l]
        _check_match(original, c, l)
    for i, x in enumerate(xs):
        scores = route(c.gate, c.top_k, x)
        y = compressed_forward(c, x)
        print(f"input {i}")
        print("  gate_scores=" + _vec(scores))
        print("  active=" + json.dumps([int(k) for k in active_experts(scores)]))
        print("  output=" + _vec(y))
        if original is not None:
            print(f"  l2_diff={_fmt(np.linalg.norm(y - layer_forward(original, x)))}")
    return 0


def cmd_tables(args) -> int:
    if args.geometry not in GEOMETRIES:
        raise UserError(f"unknown geometry {args.geometry!r}; choose from {', '.join(GEOMETRIES)}")
    g = GEOMETRIES[args.geometry]
    print("geometry,method,bytes,MB,memory_model")
    for r in table9_rows(args.geometry, args.keep_ratio):
        mb = int(r.MB) if float(r.MB).is_integer() else _fmt(r.MB)
        print(f"{r.geometry},{r.method},{r.bytes},{mb},\"{r.memory_model}\"")
    k = svd_rank_for_budget(g.kind, g.p, g.p_inner, args.keep_ratio)
    print(f"# svd_rank={k} (floor of the real-valued budget rank)")
    if args.flops:
        print("geometry,method,flops_per_token")
        for name, f in table9_flops(args.geometry, args.keep_ratio).items():
            print(f"{args.geometry},{name},{int(f)}")
    return 0


def cmd_verify(args) -> int:
    from .proptests import SUMMARY_COLUMNS, run_all

    summaries = run_all(quick=args.quick)
    print(",".join(SUMMARY_COLUMNS))
    for s in summaries:
        row = s.as_row()
        print(",".join(_fmt(row[k]) if isinstance(row[k], float) else str(row[k]) for k in SUMMARY_COLUMNS))
    if args.report:
        emit_report([s.as_row() for s in summaries], format_for(args.report), args.report, SUMMARY_COLUMNS)
    return 0 if all(s.ok for s in summaries) else 1


COMMANDS = {
    "gen": cmd_gen,
    "compress": cmd_compress,
    "eval": cmd_eval,
    "forward": cmd_forward,
    "tables": cmd_tables,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UserError, ResMoEError, ValueError, OSError) as exc:
        print(f"resmoe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"resmoe {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
