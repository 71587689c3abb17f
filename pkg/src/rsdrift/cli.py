"""Command-line front end.

Exit codes: 0 ok, 2 configuration or usage error, 3 numeric error,
4 solver non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bandit import run_simulation
from .equilibrium import consensus_threshold, find_equilibrium, null_projection_residual, polarization_sweep
from .errors import ConfigError, InvalidArgumentError, NonConvergenceError, NumericError
from .experiments import FIGURES, apply_overrides, baseline_spec, get_spec, run_experiment, write_artifacts
from .experiments import ExperimentSpec
from .generic_sa import harmonic_time
from .model import ModelConfig, PopulationState, mismatch_report, numerical_rank
from .ode import OdeState, integrate

log = logging.getLogger("rsdrift")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NONCONVERGENCE = 0, 2, 3, 4
INVARIANT_KEYS = ("arrival_probs", "user_attrs", "product_attrs", "a", "zeta", "seed")


class OutputExists(Exception):
    pass


# ---------------------------------------------------------------- config

def parse_set(items) -> dict:
    """``["a=4", "user_attrs.2.2=1.1"]`` -> dict; values are parsed as JSON when possible."""
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", key=item)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key.strip()] = value
    return out


def load_document(path) -> dict:
    """Config document plus ``initial_states``; the built-in baseline when ``path`` is None."""
    if path is None:
        spec = baseline_spec()
        doc = spec.cfg.to_dict()
        doc["initial_states"] = spec.y0().tolist()
        return doc
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", key="config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}", key="config") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", key="config")
    return doc


def resolve(args) -> tuple[ModelConfig, PopulationState]:
    doc = apply_overrides(load_document(args.config), parse_set(args.set))
    if args.seed is not None:
        doc["seed"] = args.seed
    initial = doc.pop("initial_states", None)
    cfg = ModelConfig.from_dict(doc)
    if initial is None:
        initial = np.zeros((cfg.N, cfg.q))
    try:
        Y0 = np.array(initial, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("initial_states must be numeric", key="initial_states") from None
    if Y0.shape != (cfg.N, cfg.q) or not np.all(np.isfinite(Y0)):
        raise ConfigError(f"initial_states must be {cfg.N} finite arrays of length {cfg.q}", key="initial_states")
    return cfg, PopulationState.from_users(Y0)


def _targets(out, names, force) -> list[Path]:
    out = Path(out)
    paths = [out / n for n in names]
    clash = [p for p in paths if p.exists()]
    if clash and not force:
        raise OutputExists(f"{clash[0]} already exists (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return paths


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    cfg, pop0 = resolve(args)
    csv_path, summary_path = _targets(args.out, ["trajectory.csv", "summary.json"], args.force)
    traj = run_simulation(cfg, pop0, args.steps, record_every=args.record_every)
    traj.to_csv(csv_path)
    summary = traj.summary()
    summary.update(seed=cfg.seed, steps=args.steps, tau_final=float(traj.taus[-1]))
    _dump(summary_path, summary)
    print(f"simulated {args.steps} steps -> {csv_path}")
    return EXIT_OK


def cmd_ode(args) -> int:
    cfg, pop0 = resolve(args)
    csv_path, summary_path = _targets(args.out, ["ode_trajectory.csv", "summary.json"], args.force)
    traj = integrate(OdeState.initial(cfg, pop0.Y.reshape(cfg.N, cfg.q)), cfg, args.tau_max, h=args.h,
                     method=args.method, record_dtau=args.record_dtau)
    traj.to_csv(csv_path)
    final = traj[-1]
    _dump(summary_path, {"tau_final": float(final.tau), "final_y": final.y.reshape(cfg.N, cfg.q).tolist(),
                         "final_theta": traj.theta()[-1].tolist(), "h": args.h, "method": args.method})
    print(f"integrated to tau = {final.tau:g} -> {csv_path}")
    return EXIT_OK


def cmd_equilibrium(args) -> int:
    cfg, _ = resolve(args)
    (json_path,) = _targets(args.out, ["equilibrium.json"], args.force)
    rep = find_equilibrium(cfg, max_iter=args.max_iter)
    doc = rep.to_dict(cfg)
    doc["iterations"] = rep.iterations
    doc["max_real_eigenvalue"] = float(np.max(rep.spectrum.real)) if rep.spectrum.size else None
    doc["null_projection_residual"] = null_projection_residual(rep, cfg)
    _dump(json_path, doc)
    print(f"residual {rep.residual:.3e}, tracking={rep.tracking}, consensus={rep.consensus}, "
          f"nullspace_dim={rep.nullspace_dim}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, _ = resolve(args)
    json_path, csv_path = _targets(args.out, ["sweep.json", "sweep.csv"], args.force)
    a_list = [float(x) for x in args.a_list.split(",")]
    rows = polarization_sweep(cfg.W, a_list, n_starts=args.starts, seed=cfg.seed)
    thr = consensus_threshold(cfg.W)
    _dump(json_path, {"consensus_threshold": thr, "rows": [r.to_dict() for r in rows]})
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "n_points", "n_stable", "max_stable_distance", "max_distance"])
        for r in rows:
            w.writerow([format(r.a, ".17g"), len(r.points), sum(r.stable),
                        format(r.max_stable_distance, ".17g"), format(r.max_distance, ".17g")])
    print(f"consensus threshold 2/|W|^2 = {thr:.6g}")
    for r in rows:
        print(f"a = {r.a:g}: {len(r.points)} fixed point(s), max stable distance {r.max_stable_distance:.3e}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    spec = get_spec(args.figure)
    overrides = parse_set(args.set)
    cfg = spec.cfg
    if overrides or args.seed is not None:
        doc = apply_overrides(cfg.to_dict(), overrides)
        if args.seed is not None:
            doc["seed"] = args.seed
        cfg = ModelConfig.from_dict(doc)
    T = spec.T if args.steps is None else args.steps
    tau_max = spec.tau_max
    if args.tau_max is not None:
        tau_max = args.tau_max
    elif args.steps is not None and spec.engine == "both":
        tau_max = float(harmonic_time(T + 1) - harmonic_time(1))
    spec = ExperimentSpec(spec.name, cfg, spec.pop0, tau_max, T, {**spec.overrides, **overrides},
                          spec.engine, spec.record_dtau)
    result = run_experiment(spec, engine=args.engine, seed=cfg.seed, h=args.h)
    try:
        write_artifacts(result, args.out, force=args.force)
    except FileExistsError as exc:
        raise OutputExists(str(exc)) from None
    s = result.summary()
    print(f"{spec.name}: consensus={s['consensus']} final_dominant={s['final_dominant']} "
          f"final_frequency={s['final_frequency']}")
    if "overlay" in s:
        print(f"overlay error: initial {s['overlay']['initial']:.3e}, final {s['overlay']['final']:.3e}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        doc = apply_overrides(load_document(args.config), parse_set(args.set))
        doc.pop("initial_states", None)
        cfg = ModelConfig.from_dict(doc)
    except ConfigError as exc:
        failed = {k for k, _ in exc.problems}
        for key in INVARIANT_KEYS:
            if key not in failed:
                print(f"[ ok ] {key}")
        for key, msg in exc.problems:
            print(f"[FAIL] {key}: {msg}")
        return EXIT_CONFIG
    for key in INVARIANT_KEYS:
        print(f"[ ok ] {key}")
    rep = mismatch_report(cfg, beta_all_zero=False)
    print(f"N={cfg.N} K={cfg.K} p={cfg.p} q={cfg.q} rank(V)={numerical_rank(cfg.V)} rank(W)={numerical_rank(cfg.W)}")
    print(f"stationary={str(rep.stationary).lower()} learnable={str(rep.learnable).lower()} "
          f"mismatch={str(rep.mismatch).lower()}")
    print(f"consensus threshold 2/|W|^2 = {consensus_threshold(cfg.W):.6g} (a = {cfg.a:g})")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", metavar="PATH", help="model config JSON (default: built-in baseline)")
    p.add_argument("--out", metavar="DIR", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-key override applied after loading, e.g. a=4 or user_attrs.2.2=1.1 (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite existing output files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsdrift", description="Recommender / user-drift simulation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the stochastic recommender/population model")
    _common(p, "out/simulate")
    p.add_argument("--steps", type=int, default=100_000, help="number of interactions T")
    p.add_argument("--record-every", type=int, default=1000, help="record stride in steps")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ode", help="integrate the mean-field ODE")
    _common(p, "out/ode")
    p.add_argument("--tau-max", type=float, default=1000.0, help="ODE horizon")
    p.add_argument("--h", type=float, default=0.01, help="fixed step size")
    p.add_argument("--method", choices=["rk4", "euler"], default="rk4")
    p.add_argument("--record-dtau", type=float, default=0.5, help="recording interval in ODE time")
    p.set_defaults(func=cmd_ode)

    p = sub.add_parser("equilibrium", help="solve for an ODE equilibrium and its stability spectrum")
    _common(p, "out/equilibrium")
    p.add_argument("--max-iter", type=int, default=20000)
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("sweep", help="single-user fixed points and polarization over a list of a values")
    _common(p, "out/sweep")
    p.add_argument("--a-list", default="1,10,100,1000", help="comma-separated increasing a values")
    p.add_argument("--starts", type=int, default=20, help="number of solver starts per a")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce", help="rerun a named figure experiment")
    p.add_argument("figure", help="one of " + ", ".join(FIGURES))
    _common(p, "out/reproduce")
    p.add_argument("--engine", choices=["ode", "stochastic", "both"], help="override the figure's engine")
    p.add_argument("--steps", type=int, help="stochastic horizon T")
    p.add_argument("--tau-max", type=float, help="ODE horizon")
    p.add_argument("--h", type=float, default=0.01, help="ODE step size")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("validate", help="check config invariants and report mismatch")
    p.add_argument("--config", metavar="PATH", help="model config JSON (default: built-in baseline)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override (repeatable)")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OutputExists) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
