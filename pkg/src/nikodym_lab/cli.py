"""``nikodym`` command line: run one experiment step and write its artifact.

Every subcommand reads an optional config file, applies ``--set
section.key=value`` overrides and its own flags, then writes a CSV or JSON
artifact that embeds the resolved config.  Exit status is 0 on success,
2 when a fitted verdict is INCONCLUSIVE and 1 on any error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time

import numpy as np

from . import experiment as ex
from .artifacts import read_csv, render_csv, render_json, write_text
from .config import ExperimentConfig, default_config, load_config
from .errors import ConfigError, NikodymError, UsageError
from .geodesic_flow import geodesic_shoot, initial_data
from .metric import parity_of
from .nikodym_maximal import counterexample_f, maximal_field, worker_count
from .scaling_lab import (
    INCONCLUSIVE,
    SweepRecord,
    breakdown_verdict,
    fit_exponent,
    ratio_sweep,
)
from .variational import invert_shooting, lemma_margin, variational_transport

EXIT_OK, EXIT_ERROR, EXIT_INCONCLUSIVE = 0, 1, 2

EXTENSIONS = {"shoot": "csv", "variational": "csv", "lemma-check": "csv", "invert": "json",
              "maximal": "csv", "sweep": "csv", "fit": "json", "verify": "json"}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 because 2 is reserved for INCONCLUSIVE."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _override(text: str) -> tuple[tuple[str, str], str]:
    key, sep, value = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    return (section.strip().lower(), name.strip().lower()), value.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (bracketed sections of key = value)")
    common.add_argument("--set", dest="overrides", action="append", default=[], type=_override,
                        metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--out", help="output path; '-' for stdout "
                        "(default: <output.directory>/<subcommand>.<ext>)")
    common.add_argument("--threads", type=int, help="worker threads (default: NIKODYM_THREADS, 0 = auto)")

    parser = _Parser(prog="nikodym", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("shoot", parents=[common], help="integrate one geodesic")
    p.add_argument("--x0", type=_floats, help="start point (default: origin)")
    p.add_argument("--p0", type=_floats, help="start covector (default: e1)")
    p.add_argument("--s-max", type=float, help="overrides flow.s_max")
    p.add_argument("--step", type=float, help="overrides flow.step")

    p = sub.add_parser("variational", parents=[common],
                       help="transport variations along a launched geodesic")
    p.add_argument("--a", type=_floats, help="tangential launch offset (default: 0)")
    p.add_argument("--theta", type=_floats, help="launch tilt (default: 0)")
    p.add_argument("--s-max", type=float, help="overrides flow.s_max")
    p.add_argument("--directions", choices=["theta", "a", "both"], default="theta")

    p = sub.add_parser("lemma-check", parents=[common],
                       help="compare det xi_11 with its lower bound on a grid")
    p.add_argument("--s-max", type=float, default=0.05)
    p.add_argument("--points", type=int, default=50, help="number of grid points in (0, s_max]")

    p = sub.add_parser("invert", parents=[common], help="Newton-invert the shooting map")
    p.add_argument("--target", type=_floats, required=True)
    p.add_argument("--guess", type=_floats, help="initial a..., theta..., s")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=50)

    p = sub.add_parser("maximal", parents=[common],
                       help="maximal function of the slab indicator over a region")
    p.add_argument("--delta", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--grid-n", type=int)
    p.add_argument("--region", help="CENTER:HALFWIDTH, e.g. '0.12,0,0.06:0.05'")
    p.add_argument("--coarse-net", type=int)
    p.add_argument("--summary", help="summary JSON path (default: next to --out; stderr for stdout)")

    p = sub.add_parser("sweep", parents=[common], help="ratio sweep over sweep.deltas")
    p.add_argument("--deltas", help="overrides sweep.deltas")
    p.add_argument("--p", type=float, help="overrides sweep.p")

    p = sub.add_parser("fit", parents=[common], help="fit the exponent of a sweep CSV")
    p.add_argument("input", help="sweep CSV (its embedded config is used unless --config is given)")
    p.add_argument("--p", type=float, help="overrides sweep.p")

    sub.add_parser("verify", parents=[common],
                   help="lemma-check, maximal, sweep and fit in one JSON report")
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def resolve_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else (load_config(args.config) if args.config else default_config())
    flags = {}
    for (section, key), flag in {("flow", "s_max"): "s_max", ("flow", "step"): "step",
                                 ("maximal", "delta"): "delta", ("flow", "beta"): "beta",
                                 ("maximal", "grid_n"): "grid_n",
                                 ("maximal", "coarse_net"): "coarse_net",
                                 ("sweep", "deltas"): "deltas", ("sweep", "p"): "p"}.items():
        value = getattr(args, flag, None)
        if value is not None and not (args.command == "lemma-check" and flag == "s_max"):
            flags[(section, key)] = str(value)
    region = getattr(args, "region", None)
    if region:
        center, sep, half = region.partition(":")
        if not sep:
            raise UsageError("--region must look like CENTER:HALFWIDTH")
        flags[("maximal", "region_center")] = center
        flags[("maximal", "region_halfwidth")] = half
    merged = dict(args.overrides)
    merged.update(flags)
    return cfg.with_overrides(merged) if merged else cfg


def _out_path(args, cfg, suffix: str = "") -> str:
    if args.out:
        return args.out
    name = f"{args.command}{suffix}.{EXTENSIONS[args.command]}"
    return os.path.join(cfg.get("output", "directory"), name)


def _vector(values, size: int, name: str, default) -> np.ndarray:
    if values is None:
        return np.asarray(default, dtype=float)
    if len(values) != size:
        raise UsageError(f"{name} needs {size} components, got {len(values)}")
    return np.asarray(values, dtype=float)


def _seconds(cfg, value):
    return value if cfg.get("run", "timings") else None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_shoot(args, cfg):
    model = ex.model_from_config(cfg)
    D = model.dim
    x0 = _vector(args.x0, D, "--x0", np.zeros(D))
    p0 = _vector(args.p0, D, "--p0", np.eye(D)[0])
    f = cfg["flow"]
    traj = geodesic_shoot(model, x0, p0, f["s_max"], f["step"], f["energy_tolerance"])
    header = ["s"] + [f"x{i + 1}" for i in range(D)] + [f"p{i + 1}" for i in range(D)] + ["H"]
    rows = ([s, *x, *p, h] for s, x, p, h in zip(traj.s, traj.x, traj.p, traj.H))
    params = {"x0": x0, "p0": p0, "terminal": traj.terminal}
    write_text(_out_path(args, cfg), render_csv("shoot", header, rows, cfg, params))
    return EXIT_OK


def cmd_variational(args, cfg):
    model = ex.model_from_config(cfg)
    n, m = model.n_sub, model.n_normal
    a = _vector(args.a, n - 1, "--a", np.zeros(n - 1))
    theta = _vector(args.theta, m, "--theta", np.zeros(m))
    x0, p0 = initial_data(model, a, theta)
    f = cfg["flow"]
    traj = geodesic_shoot(model, x0, p0, f["s_max"], f["step"], f["energy_tolerance"])
    var = variational_transport(model, traj, args.directions)
    D, k = model.dim, var.X.shape[2]
    header = (["s"] + [f"dx{i + 1}_dv{j + 1}" for i in range(D) for j in range(k)]
              + [f"dp{i + 1}_dv{j + 1}" for i in range(D) for j in range(k)])
    rows = ([s, *X.ravel(), *P.ravel()] for s, X, P in zip(var.s, var.X, var.P))
    params = {"a": a, "theta": theta, "directions": args.directions}
    write_text(_out_path(args, cfg), render_csv("variational", header, rows, cfg, params))
    return EXIT_OK


def _lemma(cfg, s_max: float, points: int):
    if points < 1 or not s_max > 0:
        raise UsageError("lemma-check needs s_max > 0 and at least one point")
    model = ex.model_from_config(cfg)
    grid = s_max * np.arange(1, points + 1) / points
    return lemma_margin(model, grid, step=cfg.get("flow", "step"))


def cmd_lemma(args, cfg):
    report = _lemma(cfg, args.s_max, args.points)
    header = ["s", "det_xi11", "bound", "margin", "verdict"]
    params = {"s_max": args.s_max, "points": args.points, "s_cap": report.s_cap,
              "verdict": report.verdict, "degenerate": report.degenerate}
    write_text(_out_path(args, cfg), render_csv("lemma-check", header, report.rows(), cfg, params))
    return EXIT_OK


def cmd_invert(args, cfg):
    model = ex.model_from_config(cfg)
    target = _vector(args.target, model.dim, "--target", None)
    guess = None
    if args.guess is not None:
        n, m = model.n_sub, model.n_normal
        g = _vector(args.guess, n + m, "--guess", None)
        guess = (g[: n - 1], g[n - 1: n - 1 + m], float(g[-1]))
    res = invert_shooting(model, target, guess, tol=args.tol, max_iter=args.max_iter,
                          step=cfg.get("flow", "step"))
    params = {"target": target, "guess": args.guess}
    write_text(_out_path(args, cfg), render_json("invert", res.record(), cfg, params))
    return EXIT_OK


def _maximal(cfg, threads):
    model = ex.model_from_config(cfg)
    mx = cfg["maximal"]
    grid = counterexample_f(mx["delta"], model.dim, mx["grid_n"], model.delta0, mx["min_cells"])
    return model, maximal_field(grid, model, ex.region_from_config(cfg), ex.tube_from_config(cfg),
                                ex.search_from_config(cfg), threads)


def cmd_maximal(args, cfg):
    model, field = _maximal(cfg, args.threads)
    D = model.dim
    header = [f"x{i + 1}" for i in range(D)] + ["value"] + [f"witness_p{i + 1}" for i in range(D)]
    rows = ([*x, v, *w] for x, v, w in zip(field.points, field.values, field.witnesses))
    out = _out_path(args, cfg)
    write_text(out, render_csv("maximal", header, rows, cfg))
    summary = render_json("maximal-summary", field.summary(), cfg,
                          {"failures": {str(k): v for k, v in field.failures.items()}})
    if args.summary:
        write_text(args.summary, summary)
    elif out == "-":
        sys.stderr.write(summary)
    else:
        stem, _ = os.path.splitext(out)
        write_text(stem + ".summary.json", summary)
    return EXIT_OK


SWEEP_HEADER = ["delta", "numerator", "denominator", "ratio", "grid_n", "seconds"]


def _sweep(cfg, threads, progress=None):
    model = ex.model_from_config(cfg)
    p, q = ex.sweep_exponents(cfg)
    return ratio_sweep(model, p, q, cfg.get("sweep", "deltas"), ex.region_from_config(cfg),
                       ex.tube_from_config(cfg), ex.search_from_config(cfg),
                       ex.grid_rule_from_config(cfg), threads, progress)


def _progress(rec: SweepRecord) -> None:
    state = f"ratio={rec.ratio:.6g}" if rec.ok else f"failed: {rec.error}"
    sys.stderr.write(f"delta={rec.delta:g} grid_n={rec.grid_n} {state} ({rec.seconds:.1f}s)\n")


def cmd_sweep(args, cfg):
    records = _sweep(cfg, args.threads, _progress)
    rows = ([r.delta, r.numerator, r.denominator, r.ratio, r.grid_n, _seconds(cfg, r.seconds)]
            for r in records)
    errors = {f"{r.delta!r}": r.error for r in records if not r.ok}
    write_text(_out_path(args, cfg), render_csv("sweep", SWEEP_HEADER, rows, cfg,
                                                {"errors": errors} if errors else None))
    return EXIT_OK


def _fit_report(records, cfg) -> dict:
    p, q = ex.sweep_exponents(cfg)
    dim = cfg.get("metric", "dim")
    fit = fit_exponent(records, cfg.get("sweep", "min_points"))
    rep = breakdown_verdict(fit, p, dim, parity_of(dim), q)
    return {"slope": fit.slope, "stderr": fit.stderr, "intercept": fit.intercept,
            "n": fit.n_points, "verdict": rep.verdict, "trivial_exponent": rep.trivial_exponent,
            "predicted_exponent": rep.predicted_exponent, "p": p, "q": q,
            "threshold_p": rep.threshold_p, "margin": rep.margin,
            "residual_max": fit.residual_max}


def _records_from_csv(path):
    header, rows, embedded = read_csv(path)
    missing = {"delta", "ratio"} - set(header)
    if missing:
        raise UsageError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
    pairs = []
    for row in rows:
        try:
            d, r = float(row["delta"]), float(row["ratio"])
        except ValueError:
            raise UsageError(f"{path}: non-numeric delta or ratio in row {row}") from None
        if math.isfinite(d) and math.isfinite(r):
            pairs.append((d, r))
    return pairs, embedded


def cmd_fit(args, cfg_unused=None):
    pairs, embedded = _records_from_csv(args.input)
    base = None
    if not args.config and embedded is not None:
        base = embedded
    cfg = resolve_config(args, base)
    result = _fit_report(pairs, cfg)
    write_text(_out_path(args, cfg), render_json("fit", result, cfg, {"input": pairs}))
    return EXIT_INCONCLUSIVE if result["verdict"] == INCONCLUSIVE else EXIT_OK


def cmd_verify(args, cfg):
    start = time.perf_counter()
    lemma = _lemma(cfg, 0.05, 50)
    model, field = _maximal(cfg, args.threads)
    records = _sweep(cfg, args.threads, _progress)
    fit = _fit_report(records, cfg)
    result = {
        "model": model.model_id,
        "lemma": {"verdict": lemma.verdict, "s_cap": lemma.s_cap,
                  "min_margin": float(np.min(lemma.margin))},
        "maximal": field.summary(),
        "sweep": [{"delta": r.delta, "ratio": r.ratio, "grid_n": r.grid_n, "error": r.error}
                  for r in records],
        "fit": fit,
        "verdict": fit["verdict"],
        "seconds": _seconds(cfg, time.perf_counter() - start),
    }
    write_text(_out_path(args, cfg), render_json("verify", result, cfg))
    return EXIT_INCONCLUSIVE if fit["verdict"] == INCONCLUSIVE else EXIT_OK


COMMANDS = {"shoot": cmd_shoot, "variational": cmd_variational, "lemma-check": cmd_lemma,
            "invert": cmd_invert, "maximal": cmd_maximal, "sweep": cmd_sweep, "fit": cmd_fit,
            "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            worker_count(args.threads)
        else:
            worker_count()
        if args.command == "fit":
            return cmd_fit(args)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (NikodymError, ValueError, OSError) as exc:
        kind = "config error" if isinstance(exc, ConfigError) else "error"
        sys.stderr.write(f"nikodym {args.command}: {kind}: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
