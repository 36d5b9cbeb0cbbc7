"""Command-line entry point: ``radialse {check,solve,estimate,grid}``.

Exit status is 0 on success, 1 on a domain error (invalid network, no
convergence, unobservable set, failed grid cells) and 2 on usage errors or
missing input files.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import harness
from .estimator import assemble, estimate_to_dict, postfilter_antisymmetry, solve_wls
from .measurement import (
    DEFAULT_FRACTIONS,
    VIRTUAL_WEIGHT,
    NoiseConfig,
    ObservabilityError,
    check_observability,
    load_set,
    select_set,
    set_to_dict,
    synthesize_pool,
)
from .netmodel import NetworkFormatError, NetworkValidationError, fixture_path, load_network
from .powerflow import (
    VoltageCollapseError,
    dispatch_from_dict,
    generate_dispatch,
    solution_from_dict,
    solution_to_dict,
    solve_exact,
    solve_linear,
)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg)


def _dump(path: str | Path, doc: dict) -> None:
    harness.atomic_write(path, json.dumps(doc, indent=1) + "\n")


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}") from exc


def _network(args):
    return load_network(args.network or fixture_path())


# -- check ------------------------------------------------------------------

def cmd_check(args) -> int:
    try:
        net = _network(args)
    except NetworkValidationError as exc:
        for finding in exc.findings:
            print(f"finding: {finding}", file=sys.stderr)
        return EXIT_DOMAIN
    _say(args, f"{len(net.buses)} buses, {len(net.lines)} lines; radial, slack {net.slack}")
    return EXIT_OK


# -- solve ------------------------------------------------------------------

def cmd_solve(args) -> int:
    net = _network(args)
    if args.dispatch:
        d = dispatch_from_dict(net, _read_json(args.dispatch))
    else:
        d = generate_dispatch(net, harness._stream(args.seed, 0, harness.STREAM_DISPATCH))
    if args.method == "linear":
        sol = solve_linear(net, d)
    else:
        sol = solve_exact(net, d, tol=args.tol, max_iter=args.max_iter)
        if not sol.converged:
            print(f"error: power flow did not converge after {sol.iterations} iteration(s)", file=sys.stderr)
            return EXIT_DOMAIN
    _dump(args.out, solution_to_dict(net, sol))
    _say(args, f"{sol.method} solution, {sol.iterations} iteration(s), min voltage {sol.v.min():.6f} pu -> {args.out}")
    return EXIT_OK


# -- estimate ---------------------------------------------------------------

def cmd_estimate(args) -> int:
    net = _network(args)
    truth = solution_from_dict(net, _read_json(args.truth))
    noise = NoiseConfig(args.ev, args.ei, args.distribution)
    build = {
        "antisymmetry_rows": args.antisymmetry_rows,
        "weighting": args.weighting,
        "virtual_weight": args.virtual_weight,
    }
    if args.set:
        mset = load_set(args.set)
        report = check_observability(net, mset)
        if not report.observable:
            raise ObservabilityError(report.rank, report.state_dim, 0)
    else:
        pool = synthesize_pool(truth, net, noise, harness._stream(args.seed, 0, harness.STREAM_NOISE))
        fractions = None
        if args.node_fraction is not None or args.flow_fraction is not None:
            default = DEFAULT_FRACTIONS[args.preference]
            fractions = (
                default[0] if args.node_fraction is None else args.node_fraction,
                default[1] if args.flow_fraction is None else args.flow_fraction,
            )
        mset = select_set(
            pool, net, args.preference, fractions,
            seed=harness._stream(args.seed, 0, harness.STREAM_SELECT),
            max_resamples=args.max_resamples, **build,
        )
    est = solve_wls(assemble(net, mset))
    if args.postfilter:
        est = postfilter_antisymmetry(est, net, args.postfilter_threshold)
    errors = harness.compute_errors(
        truth, est.state.v_sq, est.state.flow_p, est.state.flow_q, args.normalization, mset.resamples
    )
    doc = estimate_to_dict(net, est)
    doc["errors"] = asdict(errors)
    doc["metadata"] = {
        "preference": mset.preference,
        "node_fraction": mset.node_fraction,
        "flow_fraction": mset.flow_fraction,
        "resamples": mset.resamples,
        "measurement_count": len(mset),
        "seed": args.seed,
        "e_v": args.ev,
        "e_i": args.ei,
        "normalization": args.normalization,
    }
    if args.dump_set:
        _dump(args.dump_set, set_to_dict(mset))
    _dump(args.out, doc)
    _say(
        args,
        f"{mset.preference} set ({mset.node_fraction:.2f} nodes, {mset.flow_fraction:.2f} flows), "
        f"mean/max voltage error {100 * errors.mean_err_v:.4f}%/{100 * errors.max_err_v:.4f}%, "
        f"mean/max flow error {100 * errors.mean_err_f:.4f}%/{100 * errors.max_err_f:.4f}% -> {args.out}",
    )
    return EXIT_OK


# -- grid -------------------------------------------------------------------

_GRID_FLAGS = {
    "e_v_list": "e_v_list",
    "e_i_list": "e_i_list",
    "preferences": "preferences",
    "dispatch_count": "dispatch_count",
    "seed": "master_seed",
    "postfilter": "postfilter",
    "postfilter_threshold": "postfilter_threshold",
    "normalization": "normalization",
    "distribution": "distribution",
    "truth_method": "truth_method",
    "weighting": "weighting",
    "virtual_weight": "virtual_weight",
    "antisymmetry_rows": "antisymmetry_rows",
    "max_resamples": "max_resamples",
}


def grid_config_from_args(args) -> harness.GridConfig:
    """Defaults, then the config file, then explicit flags."""
    doc = _read_json(args.config) if args.config else {}
    if not isinstance(doc, dict):
        raise ValueError("grid config must be a JSON object")
    for flag, key in _GRID_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    if args.node_fraction is not None or args.flow_fraction is not None:
        fr = dict(doc.get("fractions") or {})
        for pref in DEFAULT_FRACTIONS:
            base = list(fr.get(pref, DEFAULT_FRACTIONS[pref]))
            if args.node_fraction is not None:
                base[0] = args.node_fraction
            if args.flow_fraction is not None:
                base[1] = args.flow_fraction
            fr[pref] = base
        doc["fractions"] = fr
    return harness.grid_from_dict(doc)


def cmd_grid(args) -> int:
    net = _network(args)
    grid = grid_config_from_args(args)
    n_scen = len(grid.scenarios())

    def progress(done: int, total: int) -> None:
        if not args.quiet:
            print(f"\r{done}/{total} dispatches x {n_scen} scenarios", end="", file=sys.stderr, flush=True)

    result = harness.run_grid(net, grid, jobs=args.jobs, progress=progress)
    if not args.quiet:
        print(file=sys.stderr)
    harness.write_tables(result, args.out_dir)
    _say(args, f"wrote {2 * len(harness.STATS) * len(grid.preferences)} tables and sidecar.json to {args.out_dir}")
    if not result.complete:
        for (pref, ei, ev), why in sorted(result.failed.items()):
            print(f"failed cell {pref} e_v={ev} e_i={ei}: {why}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in [0, 1], got {text}")
    return value


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _prefs(text: str) -> list[str]:
    out = [t.strip() for t in text.split(",") if t.strip()]
    bad = [p for p in out if p not in DEFAULT_FRACTIONS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown preference(s): {', '.join(bad)}")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--network", help="network file (default: bundled IEEE-123 balanced fixture)")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--quiet", action="store_true", help="suppress progress and summaries")

    p = argparse.ArgumentParser(prog="radialse", description="Angle-free state estimation on radial feeders.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("check", parents=[common], help="validate a network file")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("solve", parents=[common], help="run a power flow")
    sp.add_argument("--dispatch", help="dispatch file; otherwise a random dispatch from --seed")
    sp.add_argument("--method", choices=("exact", "linear"), default="exact")
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--max-iter", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("estimate", parents=[common], help="estimate the state from synthetic measurements")
    sp.add_argument("--truth", required=True, help="solution file used as ground truth")
    sp.add_argument("--ev", type=float, default=0.001, help="voltage error bound (fraction)")
    sp.add_argument("--ei", type=float, default=0.001, help="current error bound (fraction)")
    sp.add_argument("--preference", choices=tuple(DEFAULT_FRACTIONS), default="nodal")
    sp.add_argument("--node-fraction", type=_fraction)
    sp.add_argument("--flow-fraction", type=_fraction)
    sp.add_argument("--distribution", choices=("uniform", "gaussian"), default="uniform")
    sp.add_argument("--weighting", choices=("uniform", "inverse_variance"), default="uniform")
    sp.add_argument("--virtual-weight", type=float, default=VIRTUAL_WEIGHT)
    sp.add_argument("--antisymmetry-rows", action="store_true")
    sp.add_argument("--max-resamples", type=int, default=100)
    sp.add_argument("--postfilter", action="store_true")
    sp.add_argument("--postfilter-threshold", type=float, default=harness.DEFAULT_POSTFILTER_THRESHOLD)
    sp.add_argument("--normalization", choices=("class_mean", "per_element"), default="class_mean")
    sp.add_argument("--set", help="replay a saved measurement set instead of sampling one")
    sp.add_argument("--dump-set", help="also write the measurement set used")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("grid", parents=[common], help="run the Monte Carlo scenario grid")
    sp.add_argument("--config", help="grid config file")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--e-v-list", type=_floats)
    sp.add_argument("--e-i-list", type=_floats)
    sp.add_argument("--preferences", type=_prefs)
    sp.add_argument("--dispatch-count", type=int)
    sp.add_argument("--node-fraction", type=_fraction)
    sp.add_argument("--flow-fraction", type=_fraction)
    sp.add_argument("--postfilter", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--postfilter-threshold", type=float)
    sp.add_argument("--normalization", choices=("class_mean", "per_element"))
    sp.add_argument("--distribution", choices=("uniform", "gaussian"))
    sp.add_argument("--truth-method", choices=("exact", "linear"))
    sp.add_argument("--weighting", choices=("uniform", "inverse_variance"))
    sp.add_argument("--virtual-weight", type=float)
    sp.add_argument("--antisymmetry-rows", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--max-resamples", type=int)
    sp.set_defaults(func=cmd_grid)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command != "grid" and args.seed is None:
        args.seed = 0
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except NetworkValidationError as exc:
        print("error: invalid network: " + "; ".join(exc.findings), file=sys.stderr)
        return EXIT_DOMAIN
    except (NetworkFormatError, ObservabilityError, VoltageCollapseError, np.linalg.LinAlgError,
            harness.DispatchError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
