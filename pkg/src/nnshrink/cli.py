"""``nnshrink`` command line.

Exit codes: 0 success (``verify``: UNSAT), 1 ``verify`` found a witness (SAT),
2 bad input, 3 internal invariant violation, 4 ``verify`` ran out of budget.
Log verbosity comes from the ``NNSHRINK_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .net import InputError, NetworkError, PreconditionError, evaluate, parse_network, \
    serialize_network, validate
from .pipeline import MODES, PipelineConfig, simplify
from .prop import Box, interval_bounds, symbolic_bounds, tighten
from .slicing import NetworkFamily, SlicePlan, family_evaluate, linearization_report, \
    slice_and_simplify
from .verify import query_from_json, solve

EXIT_OK, EXIT_SAT, EXIT_INPUT, EXIT_INTERNAL, EXIT_UNKNOWN = 0, 1, 2, 3, 4

log = logging.getLogger("nnshrink")


class InvariantError(NetworkError):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def _load_json(path: str):
    try:
        return json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def load_network(path: str):
    text = _read(path)
    try:
        return parse_network(text)
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from None


def load_box(spec: str) -> Box:
    """A Box JSON file, or inline ``lo:hi,lo:hi,...``."""
    if not Path(spec).exists() and ":" in spec:
        try:
            pairs = [tuple(float(v) for v in part.split(":")) for part in spec.split(",")]
            return Box([p[0] for p in pairs], [p[1] for p in pairs])
        except (ValueError, IndexError):
            raise InputError(f"bad inline box {spec!r}: expected lo:hi,lo:hi,...") from None
    doc = _load_json(spec)
    try:
        return Box.from_json(doc)
    except InputError as exc:
        raise InputError(f"{spec}: {exc}") from None


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise InputError(f"bad input vector {text!r}: expected comma-separated numbers") from None


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text + "\n")


def _config(args) -> PipelineConfig:
    return PipelineConfig(mode=args.mode, margin=args.delta, e_t=args.eps,
                          bound_budget=args.bound_budget, sim_samples=args.sim_samples,
                          verify_budget=args.budget, seed=args.seed)


def _check(net) -> None:
    problems = validate(net)
    if problems:
        raise InvariantError("simplified network is invalid: " + "; ".join(problems[:5]))


# ---------------------------------------------------------------------------
# subcommands


def cmd_simplify(args) -> int:
    net = load_network(args.net)
    box = load_box(args.box)
    out, report = simplify(net, box, _config(args))
    _check(out)
    if args.out:
        _write(args.out, serialize_network(out, indent=1))
    if args.report:
        _write(args.report, report.dumps(timings=args.timings))
    bound = report.ledger.headline if report.ledger is not None else 0.0
    print(f"{net.name}: hidden {report.size_before['hidden']} -> {report.size_after['hidden']}, "
          f"activations {report.size_before['activation']} -> {report.size_after['activation']}, "
          f"unknown {len(report.unknown)}, error bound {bound:.6g}")
    return EXIT_OK


def cmd_slice(args) -> int:
    net = load_network(args.net)
    box = load_box(args.box)
    plan = SlicePlan.parse(args.splits, net.input_dim)
    if plan.dim != net.input_dim:
        raise InputError(f"--splits has {plan.dim} counts, network has {net.input_dim} inputs")
    sample = None
    if args.sample is not None:
        if args.sample < 1:
            raise InputError("--sample must be at least 1")
        rng = np.random.default_rng(args.seed)
        k = min(args.sample, plan.count)
        sample = sorted(rng.choice(plan.count, size=k, replace=False).tolist())
    family = slice_and_simplify(net, box, plan, _config(args), sample, threads=args.threads)
    for e in family.entries:
        if not e.fully_linear:
            _check(e.model)
        if e.report is not None and not args.timings:
            e.report["timings"] = {}
    root = family.save(args.out)
    stats = linearization_report(family)
    (root / "linearization.json").write_text(json.dumps(stats, indent=2) + "\n")
    agg = stats["aggregate"]
    print(f"{agg['cells']} cells ({agg['simplified']} simplified), {agg['fully_linear']} fully "
          f"linear, mean removal {agg['mean_fraction']:.1%} -> {root}")
    return EXIT_OK


def cmd_eval(args) -> int:
    x = _parse_vector(args.input)
    if Path(args.net).is_dir():
        y = family_evaluate(NetworkFamily.load(args.net), x)
    else:
        net = load_network(args.net)
        if args.box is not None and not load_box(args.box).contains(x):
            raise InputError(f"input {x.tolist()} is outside the box")
        y = evaluate(net, x).output
    print(json.dumps([float(v) for v in y]))
    return EXIT_OK


def cmd_verify(args) -> int:
    net = load_network(args.net)
    query = query_from_json(net, _load_json(args.query))
    verdict = solve(query, args.budget)
    _write(args.out, json.dumps(verdict.to_json()))
    return {"unsat": EXIT_OK, "sat": EXIT_SAT, "unknown": EXIT_UNKNOWN}[verdict.status]


def cmd_bounds(args) -> int:
    net = load_network(args.net)
    box = load_box(args.box)
    if args.backend == "interval":
        bounds = interval_bounds(net, box)
    elif args.budget <= 1:
        bounds = symbolic_bounds(net, box)
    else:
        bounds = tighten(net, box, args.budget)
    _write(args.out, bounds.dumps())
    return EXIT_OK


def _table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_report(doc: dict) -> str:
    """Plain-text summary of a simplify report or a linearization report."""
    if "aggregate" in doc:
        agg = doc["aggregate"]
        rows = [(e["index"], "yes" if e["simplified"] else "no", f"{e['removed']}/{e['total']}",
                 f"{e['fraction']:.1%}", "yes" if e["fully_linear"] else "", f"{e['error_bound']:.3g}")
                for e in doc["entries"]]
        head = (f"cells {agg['cells']}, simplified {agg['simplified']}, fully linear "
                f"{agg['fully_linear']}, removal mean {agg['mean_fraction']:.1%} "
                f"(min {agg['min_fraction']:.1%}, max {agg['max_fraction']:.1%})")
        return head + "\n\n" + _table(["cell", "simplified", "removed", "fraction", "linear",
                                       "bound"], rows)
    counts = doc["counts"]
    head = (f"{doc['network']} [{doc['config']['mode']}]: hidden {doc['size_before']['hidden']} -> "
            f"{doc['size_after']['hidden']} (removed {doc['removed']}, unknown {doc['unknown']}, "
            f"surviving {doc['surviving']})")
    summary = _table(["kind", "count"], [(k, v) for k, v in counts.items()])
    rows = []
    for r in doc["removals"]:
        detail = []
        if "line" in r:
            detail.append("line=({:g}, {:g})".format(*r["line"]))
        for key in ("segment", "k", "epsilon"):
            if key in r:
                detail.append(f"{key}={r[key]:g}" if isinstance(r[key], float) else f"{key}={r[key]}")
        rows.append((r["neuron"], r["kind"], r["evidence"].get("method", ""), " ".join(detail)))
    removals = _table(["neuron", "kind", "method", "detail"], rows) if rows else "(none removed)"
    parts = [head, "", summary, "", removals]
    if doc.get("ledger"):
        led = doc["ledger"]
        parts += ["", f"output error bound {led['headline']:.6g}",
                  _table(["output", "err_lo", "err_hi"],
                         [(i, f"{o['err_lo']:.6g}", f"{o['err_hi']:.6g}")
                          for i, o in enumerate(led["outputs"])])]
    timings = ", ".join(f"{k} {v:.3f}s" for k, v in doc.get("timings", {}).items())
    if timings:
        parts += ["", "time: " + timings]
    return "\n".join(parts)


def cmd_report(args) -> int:
    path = Path(args.report)
    if path.is_dir():
        path = path / "linearization.json"
    doc = _load_json(str(path))
    try:
        print(render_report(doc))
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a simplify or linearization report ({exc})") from None
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, default="exact",
                   help="exact, respres (label preserving), relaxed, or full")
    p.add_argument("--eps", type=float, default=0.0, help="output error budget e_t (relaxed/full)")
    p.add_argument("--delta", type=float, default=0.0, help="borderline margin (respres/full)")
    p.add_argument("--sim-samples", type=int, default=100_000)
    p.add_argument("--budget", type=int, default=10_000, help="verifier nodes per query")
    p.add_argument("--bound-budget", type=int, default=64, help="bound-tightening leaves")
    p.add_argument("--timings", action="store_true",
                   help="record wall times in reports (makes output non-reproducible)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnshrink",
                                     description="Provably shrink piecewise-linear networks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simplify", parents=[common], help="simplify one network on a box")
    p.add_argument("--net", required=True)
    p.add_argument("--box", required=True, help="Box JSON file or inline lo:hi,lo:hi")
    p.add_argument("--out", help="where to write the simplified network")
    p.add_argument("--report", help="where to write the report JSON")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_simplify)

    p = sub.add_parser("slice", parents=[common], help="simplify per cell of an even grid")
    p.add_argument("--net", required=True)
    p.add_argument("--box", required=True)
    p.add_argument("--splits", required=True, help="cells per dimension, e.g. 4 or 2,2,4")
    p.add_argument("--sample", type=int, help="simplify only this many random cells")
    p.add_argument("--out", required=True, help="family directory")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("eval", parents=[common], help="evaluate a network or family")
    p.add_argument("--net", required=True, help="network JSON or family directory")
    p.add_argument("--input", required=True, help="comma-separated input vector")
    p.add_argument("--box", help="reject inputs outside this box (networks only)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", parents=[common], help="solve a query")
    p.add_argument("--net", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--budget", type=int, default=10_000)
    p.add_argument("--out", help="verdict JSON path (default stdout)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bounds", parents=[common], help="per-neuron bounds on a box")
    p.add_argument("--net", required=True)
    p.add_argument("--box", required=True)
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--backend", choices=("symbolic", "interval"), default="symbolic")
    p.add_argument("--out", help="BoundsMap JSON path (default stdout)")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("report", parents=[common], help="render a report as a text table")
    p.add_argument("report", help="simplify report JSON, linearization JSON or family directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("NNSHRINK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "budget", 1) < 1:
        print("nnshrink: error: --budget must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"nnshrink: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (InputError, PreconditionError) as exc:
        print(f"nnshrink: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # anything else is a bug, not bad input
        log.debug("unexpected failure", exc_info=True)
        print(f"nnshrink: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
