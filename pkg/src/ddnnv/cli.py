"""Command-line front end.

Exit codes: 0 certified (or check passed), 2 not certified, 1 usage or data
error.  Every run writes ``verdict.json``, ``report.txt`` and a
``metadata.json`` that holds the only non-deterministic content (time stamp).
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .data import OraclePlant, TrajectoryData, check_excitation, collect
from .errors import VerificationError
from .examples import EXAMPLES, load_example
from .nn import NeuralNetwork
from .reach import (
    MULTIPLIER_DEGREES,
    load_problem,
    safety_via_invariance,
    verify_invariance,
    verify_safety,
)
from .sdp import SolverSettings, export_sdpa
from .sectors import SectorData
from .stability import OBJECTIVES, build_stability_program, prepare_transform, roa_ellipsoid, verify_stability

logger = logging.getLogger("ddnnv")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CERTIFIED = 0, 1, 2
MODES = ("stability", "safety", "invariance", "collect", "check-data")


class UsageError(Exception):
    pass


def build_parser():
    p = argparse.ArgumentParser(
        prog="ddnnv",
        description="Verify neural-network feedback loops around an unknown linear plant from data.",
    )
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--nn", help="network weights JSON")
    p.add_argument("--data", help="trajectory CSV (u_*, x_*, x1_* columns)")
    p.add_argument("--sets", help="problem JSON with input_set / safe_set / invariant_set")
    p.add_argument("--sectors", help="optional sector override JSON")
    p.add_argument("--example", choices=sorted(EXAMPLES), help="use a bundled example for missing inputs")
    p.add_argument("--plant", help="plant JSON {A, B} (collect mode)")
    p.add_argument("--samples", type=int, default=None, help="number of samples K (collect mode)")
    p.add_argument("--input-bound", type=float, default=1.0, help="|u| bound for collect mode")
    p.add_argument("--init-bound", type=float, default=1.0, help="|x(0)| bound for collect mode")
    p.add_argument("--independent", action="store_true", help="one experiment per sample in collect mode")
    p.add_argument("--noise", type=float, default=0.0,
                   help="Gaussian noise std on x+ in collect mode (exploratory runs only; never certifies)")
    p.add_argument("--horizon", type=int, default=None, help="safety horizon T (overrides the sets file)")
    p.add_argument("--objective", choices=OBJECTIVES, default="trace_min")
    p.add_argument("--margin", type=float, default=1e-6, help="strictness margin of the stability LMI")
    p.add_argument("--mult-degree", type=int, choices=MULTIPLIER_DEGREES, default=None)
    p.add_argument("--no-facet-products", action="store_true",
                   help="drop the pairwise facet products from the reachability certificates")
    p.add_argument("--jobs", type=int, default=1, help="parallel facet solves")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="ddnnv-out", help="output directory")
    p.add_argument("--solver-tol", type=float, default=1e-8)
    p.add_argument("--export-sdpa", action="store_true", help="also write every program in SDPA sparse format")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")


def _svg_polylines(path, curves, title):
    """Minimal SVG with one closed polyline per ``(label, points)`` entry."""
    pts = np.vstack([c for _, c in curves if len(c)]) if curves else np.zeros((0, 2))
    if pts.size == 0:
        pts = np.array([[-1.0, -1.0], [1.0, 1.0]])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    size, pad = 400.0, 30.0
    scale = (size - 2 * pad) / span.max()
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}">',
        f'<text x="{pad:.0f}" y="20" font-size="12">{title}</text>',
    ]
    for n, (label, c) in enumerate(curves):
        if len(c) < 2:
            continue
        xs = pad + (c[:, 0] - lo[0]) * scale
        ys = size - pad - (c[:, 1] - lo[1]) * scale
        coords = " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(xs, ys))
        colour = colours[n % len(colours)]
        lines.append(f'<polygon points="{coords}" fill="none" stroke="{colour}"><title>{label}</title></polygon>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _svg_bars(path, gammas, title):
    """Grouped bars of ``gamma_i^k`` per step with the level-1 line."""
    size_w, size_h, pad = 480.0, 300.0, 30.0
    finite = [g for step in gammas for g in step if math.isfinite(g)]
    top = max([1.0] + finite) * 1.1
    n_steps = len(gammas)
    n_f = max((len(s) for s in gammas), default=1)
    group = (size_w - 2 * pad) / max(n_steps, 1)
    bar = group / (n_f + 1)
    y = lambda v: size_h - pad - (size_h - 2 * pad) * min(v, top) / top
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size_w:.0f}" height="{size_h:.0f}">',
        f'<text x="{pad:.0f}" y="20" font-size="12">{title}</text>',
        f'<line x1="{pad:.0f}" y1="{y(1.0):.3f}" x2="{size_w - pad:.0f}" y2="{y(1.0):.3f}" stroke="black" '
        f'stroke-dasharray="4"/>',
    ]
    for k, step in enumerate(gammas):
        for i, g in enumerate(step):
            h = top if not math.isfinite(g) else g
            x0 = pad + k * group + i * bar
            colour = "#d62728" if (not math.isfinite(g) or g > 1.0) else "#1f77b4"
            lines.append(f'<rect x="{x0:.3f}" y="{y(h):.3f}" width="{bar * 0.9:.3f}" '
                         f'height="{size_h - pad - y(h):.3f}" fill="{colour}"><title>k={k + 1} i={i} '
                         f'gamma={g!r}</title></rect>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Input resolution
# ---------------------------------------------------------------------------

def _resolve_inputs(args, need_sets):
    example = load_example(args.example, seed=args.seed) if args.example else None
    if args.nn:
        net = NeuralNetwork.load(args.nn)
    elif example:
        net = example.net
    else:
        raise UsageError("--nn is required (or --example)")
    if args.data:
        data = TrajectoryData.load_csv(args.data)
    elif example:
        data = example.data
    else:
        raise UsageError("--data is required (or --example)")
    if data.n_x != net.n_x or data.n_u != net.n_u:
        raise UsageError(f"data has n_x={data.n_x}, n_u={data.n_u}; network expects n_x={net.n_x}, n_u={net.n_u}")
    sectors = SectorData.load(net, args.sectors) if args.sectors else SectorData.for_network(net)
    problem = None
    if need_sets:
        if args.sets:
            problem = load_problem(args.sets)
        elif example:
            problem = {"input_set": example.input_set, "safe_set": example.safe_set,
                       "invariant_set": example.invariant_set, "horizon": example.horizon,
                       "multiplier_degree": 0}
        else:
            raise UsageError("--sets is required (or --example)")
        if args.horizon is not None:
            problem["horizon"] = args.horizon
        if args.mult_degree is not None:
            problem["multiplier_degree"] = args.mult_degree
    return net, data, sectors, problem


def _settings(args):
    return SolverSettings(tol=args.solver_tol)


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------

def _run_collect(args, out):
    if args.example:
        ex = load_example(args.example, seed=args.seed,
                          **({"K": args.samples} if args.samples else {}))
        paths = ex.write(out)
        lines = [f"example {ex.name}: {ex.description}", f"samples K = {ex.data.K}"]
        lines += [f"{k}: {os.path.basename(v)}" for k, v in sorted(paths.items())]
        return EXIT_OK, {"verdict": "collected", "example": ex.name, "K": ex.data.K}, lines
    if not args.plant:
        raise UsageError("collect mode needs --plant or --example")
    plant = OraclePlant.load(args.plant)
    K = args.samples or (plant.n_u + plant.n_x)
    data = collect(plant, K, [-args.input_bound, args.input_bound], [-args.init_bound, args.init_bound],
                   seed=args.seed, independent=args.independent, noise_std=args.noise)
    data.save_csv(os.path.join(out, "data.csv"))
    rep = check_excitation(data)
    lines = [f"collected K = {K} samples (seed {args.seed})", rep.describe()]
    if data.noisy:
        lines.append(f"noise std {args.noise!r}: results on this data are exploratory, not certificates")
    return EXIT_OK, {"verdict": "collected", "K": K, "noise": args.noise, "excitation": rep.to_dict()}, lines


def _run_check_data(args, out):
    if args.data:
        data = TrajectoryData.load_csv(args.data)
    elif args.example:
        data = load_example(args.example, seed=args.seed).data
    else:
        raise UsageError("check-data needs --data or --example")
    rep = check_excitation(data)
    lines = [f"K = {data.K}, n_u = {data.n_u}, n_x = {data.n_x}", rep.describe()]
    if data.noisy:
        lines.append(f"data is flagged noisy (std {data.provenance['noise']!r}): verification runs are exploratory only")
    if not rep.passed:
        if rep.rank_stacked < rep.required_stacked:
            lines.append(f"rank([U0;X0]) = {rep.rank_stacked} < {rep.required_stacked} = n_u + n_x")
        if rep.rank_x1 < rep.required_x1:
            lines.append(f"rank(X1) = {rep.rank_x1} < {rep.required_x1} = n_x")
        lines.append(f"collect at least {rep.required_stacked} informative samples")
    code = EXIT_OK if rep.passed else EXIT_NOT_CERTIFIED
    return code, {"verdict": "pass" if rep.passed else "fail", "excitation": rep.to_dict()}, lines


def _run_stability(args, out):
    net, data, sectors, _ = _resolve_inputs(args, need_sets=False)
    cert = verify_stability(net, sectors, data, objective=args.objective, margin=args.margin,
                            settings=_settings(args))
    cert_dict = cert.to_dict()
    _write_json(os.path.join(out, "certificate.json"), cert_dict)
    lines = [f"stability ({args.objective}): {cert.verdict}", f"solver status: {cert.status}"]
    if args.export_sdpa:
        prog = build_stability_program(prepare_transform(net, sectors, 1e-9), data.scaled(data.column_scaling()),
                                       args.objective, args.margin)
        export_sdpa(prog, os.path.join(out, "stability.dat-s"))
    if cert.certified:
        lines.append("Q1 = " + json.dumps(_clean(cert.Q1)))
        lines.append(f"min eig H = {cert.residuals['min_eig_H']!r} (margin {args.margin!r})")
        planes = [(i, i + 1) for i in range(0, net.n_x - 1, 2)]
        curves = []
        rows = []
        for pl in planes:
            pts = roa_ellipsoid(cert, pl, 256)
            curves.append((f"x{pl[0]}-x{pl[1]}", pts))
            rows += [[pl[0], pl[1], a, b] for a, b in pts]
        if rows:
            _write_csv(os.path.join(out, "roa.csv"), ["i", "j", "x_i", "x_j"], rows)
            _svg_polylines(os.path.join(out, "roa.svg"), curves, "ROA ellipsoid slices")
        code = EXIT_OK
    elif cert.exploratory:
        lines.append("noisy data: the LMI result is exploratory and is not a stability certificate")
        code = EXIT_NOT_CERTIFIED
    else:
        lines.append("not certified: the sufficient LMI condition was not met (this does not prove instability)")
        code = EXIT_NOT_CERTIFIED
    verdict = {"verdict": cert.verdict, "objective": args.objective, "residuals": cert.residuals}
    return code, verdict, lines


def _gamma_outputs(out, gammas, template, title):
    rows = [[k + 1, i, g] for k, step in enumerate(gammas) for i, g in enumerate(step)]
    _write_csv(os.path.join(out, "gamma.csv"), ["k", "facet", "gamma"], rows)
    _svg_bars(os.path.join(out, "gamma.svg"), gammas, title)
    curves, srows = [], []
    if template.dim >= 2:
        for k, g in enumerate(gammas):
            if not np.all(np.isfinite(g)):
                continue
            poly = template.with_offsets(g).slice2d((0, 1))
            curves.append((f"k={k + 1}", poly))
            srows += [[k + 1, a, b] for a, b in poly]
        if srows:
            _write_csv(os.path.join(out, "reach_slices.csv"), ["k", "x_0", "x_1"], srows)


def _export_reach_programs(out, steps, prefix):
    for k, step in enumerate(steps):
        for f in step.facets:
            if f.program is not None:
                export_sdpa(f.program, os.path.join(out, f"{prefix}_k{k + 1}_facet{f.facet}.dat-s"))


def _run_safety(args, out):
    net, data, sectors, prob = _resolve_inputs(args, need_sets=True)
    if "input_set" not in prob or "safe_set" not in prob:
        raise UsageError("safety mode needs input_set and safe_set in the sets file")
    res = verify_safety(net, sectors, data, prob["input_set"], prob["safe_set"], prob["horizon"],
                        prob["multiplier_degree"], settings=_settings(args), jobs=args.jobs,
                        keep_programs=args.export_sdpa, products=not args.no_facet_products)
    _write_json(os.path.join(out, "certificate.json"), res.to_dict())
    _gamma_outputs(out, res.gammas, prob["safe_set"], "gamma per step (dashed: 1)")
    if args.export_sdpa:
        _export_reach_programs(out, res.steps, "safety")
    lines = [f"safety over T = {res.horizon}: {res.verdict}", res.message, "", "k  gamma"]
    for k, g in enumerate(res.gammas):
        lines.append(f"{k + 1}  " + " ".join(f"{v:.6g}" for v in g))
    code = EXIT_OK if res.safe else EXIT_NOT_CERTIFIED
    verdict = {"verdict": res.verdict, "horizon": res.horizon, "safe_until": res.safe_until,
               "gamma": res.gammas}
    return code, verdict, lines


def _run_invariance(args, out):
    net, data, sectors, prob = _resolve_inputs(args, need_sets=True)
    if "invariant_set" not in prob:
        raise UsageError("invariance mode needs invariant_set in the sets file")
    res = verify_invariance(net, sectors, data, prob["invariant_set"], prob["multiplier_degree"],
                            settings=_settings(args), jobs=args.jobs, keep_programs=args.export_sdpa,
                            products=not args.no_facet_products)
    _write_json(os.path.join(out, "certificate.json"), res.to_dict())
    _gamma_outputs(out, [res.gamma], prob["invariant_set"], "invariance gamma (dashed: 1)")
    if args.export_sdpa:
        _export_reach_programs(out, [res.step], "invariance")
    lines = [f"invariance: {res.verdict}", "gamma " + " ".join(f"{v:.6g}" for v in res.gamma)]
    verdict = {"verdict": res.verdict, "gamma": res.gamma}
    if "input_set" in prob and "safe_set" in prob:
        composed = safety_via_invariance(prob["input_set"], prob["invariant_set"], prob["safe_set"], res)
        lines.append(f"safety for all time via invariance: {composed}")
        verdict["safety_via_invariance"] = composed
    code = EXIT_OK if res.invariant else EXIT_NOT_CERTIFIED
    return code, verdict, lines


RUNNERS = {
    "stability": _run_stability,
    "safety": _run_safety,
    "invariance": _run_invariance,
    "collect": _run_collect,
    "check-data": _run_check_data,
}


def run(args):
    """Execute one configured run; returns the process exit code."""
    out = args.out
    os.makedirs(out, exist_ok=True)
    try:
        code, verdict, lines = RUNNERS[args.mode](args, out)
    except (UsageError, VerificationError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        code = EXIT_ERROR
        verdict = {"verdict": "error", "error": type(exc).__name__, "message": str(exc)}
        report = getattr(exc, "report", None)
        if report is not None:
            verdict["excitation"] = report.to_dict()
        lines = [f"error ({type(exc).__name__}): {exc}"]
    verdict = dict(verdict, mode=args.mode, exit_code=code)
    _write_json(os.path.join(out, "verdict.json"), verdict)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(f"ddnnv {__version__} mode={args.mode} seed={args.seed}\n")
        fh.write("\n".join(lines) + "\n")
    _write_json(os.path.join(out, "metadata.json"), {
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "argv": sys.argv[1:],
        "version": __version__,
    })
    print("\n".join(lines))
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
