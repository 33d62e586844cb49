"""Command line front end: ``gammadyn <command> --config <file> [--seed S] [--threads N] [--out DIR]``.

Exit codes: 0 success, 1 assertion failure, 2 configuration error,
3 precondition (hypothesis flag) failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .config import ExperimentConfig, build_model, load_config, sim_params

COMMANDS = ("validate", "evolve", "chain", "stationary", "simulate", "ergodicity", "compare")


class PreconditionFailure(Exception):
    pass


class AssertionFailure(Exception):
    pass


class ConfigFailure(Exception):
    pass


# -- output helpers -----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


class Output:
    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = {}

    def _record(self, name, data: bytes):
        (self.dir / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def csv(self, name, header, rows):
        lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
        self._record(name, ("\n".join(lines) + "\n").encode())

    def json(self, name, obj):
        self._record(name, (json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n").encode())

    def text(self, name, text: str):
        self._record(name, text.encode())

    def manifest(self, cfg: ExperimentConfig, command: str, seed: int, extra=None):
        import pydantic
        import scipy
        man = {
            "command": command,
            "config": cfg.model_dump(mode="json"),
            "config_hash": cfg.config_hash(),
            "seed": seed,
            "versions": {"gammadyn": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "pydantic": pydantic.VERSION, "python": platform.python_version()},
            "files": dict(sorted(self.files.items())),
        }
        if extra:
            man.update(extra)
        (self.dir / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


# -- shared set-up --------------------------------------------------------------------

def _initial(space, init):
    from .gamma import TruncatedGammaFunction
    if init.kind == "poisson":
        vec = init.z ** space.level_of.astype(float)
        return TruncatedGammaFunction.from_vector(space, vec)
    return TruncatedGammaFunction.indicator_empty(space.n_max)


def _glauber_params(cfg, spec, grid):
    from .evolution import GlauberParams
    if spec.preset != "glauber" or spec.s != 0 or spec.m != 1:
        raise PreconditionFailure("glauber chain: needs the Glauber preset with s = 0 and m = 1")
    return GlauberParams(spec.z, spec.phi.build(grid), cfg.evolution.C)


def _times(ev):
    return sorted(set(ev.times)) if ev.times else [0.0, ev.t_end]


# -- commands ---------------------------------------------------------------------------

def cmd_evolve(cfg, spec, grid, model, out: Output, seed, threads):
    from .evolution import EvolutionConfig, evolve_correlation, evolve_quasi
    from .hierarchy import OperatorContext
    ev = cfg.evolution
    ctx = OperatorContext(model, grid, ev.n_max, ev.zeta_trunc)
    ecfg = EvolutionConfig(ev.C, ev.n_max, ev.zeta_trunc, ev.dt, ev.delta, ev.t_end, ev.stepper, ev.closure)
    f0 = _initial(ctx.space, ev.initial)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            run = evolve_quasi if ev.kind == "quasi" else evolve_correlation
            res = run(ctx, f0, ecfg, _times(ev))
        except FloatingPointError as exc:
            raise AssertionFailure(str(exc))
        except ValueError as exc:
            raise PreconditionFailure(str(exc))
    norm = "norm_LC" if ev.kind == "quasi" else "norm_KC"
    out.csv("evolution.csv", ["t", "level", "l1_mass", norm, "residual_bound"],
            res.rows(ctx.space, ev.C, grid.cell_volume))
    for t, snap in zip(res.times, res.snapshots):
        out.text(f"snapshot_t{t:.6g}.json", snap.to_json() + "\n")
    for w in res.warnings:
        print(f"warning: {w}")
    print(f"evolve: {len(res.times)} snapshots, final {norm} = {res.norms[-1]:.6g}")
    return {"warnings": res.warnings}


def cmd_chain(cfg, spec, grid, model, out: Output, seed, threads):
    from .evolution import _space, chain_trajectory
    from .gamma import TruncatedGammaFunction, vec_norm_KC, vec_norm_LC
    ev = cfg.evolution
    params = _glauber_params(cfg, spec, grid)
    if not params.smallparam_ok:
        raise PreconditionFailure(
            f"smallparam: z*exp(C*C_phi) = {params.z * math.exp(params.C * params.C_phi):.6g} > C = {params.C:.6g}")
    space = _space(grid.n_cells, ev.n_max)
    f0 = _initial(space, ev.initial)
    traj = chain_trajectory(f0, _times(ev), ev.delta, params, dual=ev.dual, zeta_trunc=ev.zeta_trunc)
    h = grid.cell_volume
    rows = []
    for t, v in traj:
        nrm = vec_norm_KC(space, v, ev.C) if ev.dual else vec_norm_LC(space, v, ev.C, h)
        for n in range(ev.n_max + 1):
            rows.append((t, n, float(np.abs(v[space.level_slice(n)]).sum() * h ** n), nrm, 0.0))
        out.text(f"snapshot_t{t:.6g}.json", TruncatedGammaFunction.from_vector(space, v).to_json() + "\n")
    out.csv("chain.csv", ["t", "level", "l1_mass", "norm_KC" if ev.dual else "norm_LC", "residual_bound"], rows)
    print(f"chain: {len(traj)} snapshots at delta = {ev.delta}")


def cmd_stationary(cfg, spec, grid, model, out: Output, seed, threads):
    from .hierarchy import OperatorContext
    from .stationary import ConvergenceError, KSContext, solve_stationary
    ev = cfg.evolution
    ctx = OperatorContext(model, grid, ev.n_max, ev.zeta_trunc)
    try:
        ks = KSContext(model, ctx, ev.C, ev.max_iter, ev.tol)
    except ZeroDivisionError as exc:
        raise PreconditionFailure(f"nonzero death: {exc}")
    if not ks.norm_bound < 1:
        raise PreconditionFailure(f"statior-est: a1+a2/C = {ks.norm_bound + 1:.6g} >= 2")
    try:
        res = solve_stationary(ks)
    except ConvergenceError as exc:
        raise AssertionFailure(str(exc))
    out.text("stationary.json", res.k.to_json() + "\n")
    out.csv("convergence.csv", ["iter", "residual", "contraction_factor"], res.rows())
    summary = {"iterations": res.iterations, "residual": res.residual, "norm_bound": res.norm_bound,
               "L_star_residual": res.L_star_residual, "closure_defect": res.closure_defect,
               "ruelle_const": res.ruelle_const, "max_contraction_factor": max(res.factors)}
    out.json("summary.json", summary)
    print(f"stationary: {res.iterations} iterations, residual {res.residual:.3g}, "
          f"L*k residual {res.L_star_residual:.3g}")
    bad = [f for f in res.factors if f > ks.norm_bound + 1e-6]
    if bad:
        raise AssertionFailure(f"contraction factor {max(bad):.6g} exceeds a1+a2/C-1 = {ks.norm_bound:.6g}")


def _sim_config(cfg, spec, seed, threads):
    from .particles import SimConfig
    s = cfg.sim
    return SimConfig(spec.preset, sim_params(spec, cfg.grid.dim), cfg.grid.side_length, cfg.grid.dim, s.t_end,
                     s.replicas, seed, tuple(s.record_times) if s.record_times else None, s.audit_every, threads)


def cmd_simulate(cfg, spec, grid, model, out: Output, seed, threads):
    from .particles import AuditError, RateOverflowError, estimate_correlations, simulate
    try:
        scfg = _sim_config(cfg, spec, seed, threads)
    except ValueError as exc:
        raise ConfigFailure(str(exc))
    init = cfg.sim.initial
    try:
        res = simulate(scfg, ("poisson", init.z) if init.kind == "poisson" else None)
    except (RateOverflowError, AuditError) as exc:
        raise AssertionFailure(str(exc))
    summary = res.summary_rows()
    out.csv("replicas.csv", ["replica", "final_count", "events"], [r[:3] for r in summary])
    # cpu time differs between runs, so it goes to a file outside the manifest hashes
    (out.dir / "telemetry.csv").write_text(
        "replica,cpu_ms,proposals\n" + "".join(f"{r[0]},{r[3]:.3f},{p}\n" for r, p in zip(summary, res.proposals)))
    if scfg.replicas >= 2:
        rows, dens = [], []
        for t in res.times:
            est = estimate_correlations(res.at(t), grid, cfg.sim.radial_bins)
            dens.append((t, est.density, est.density_se))
        for kind, i, v, se in est.rows():
            rows.append((kind, i, v, se))
        out.csv("estimate.csv", ["kind", "cell_or_bin", "k1_or_k2", "stderr"], rows)
        out.csv("density.csv", ["t", "density", "stderr"], dens)
    print(f"simulate: {scfg.replicas} replicas, {sum(res.events)} events")


def cmd_ergodicity(cfg, spec, grid, model, out: Output, seed, threads):
    from .evolution import _space
    from .particles import ergodicity_experiment
    ev = cfg.evolution
    params = _glauber_params(cfg, spec, grid)
    space = _space(grid.n_cells, ev.n_max)
    k0 = _initial(space, ev.initial)
    try:
        rep = ergodicity_experiment(params, k0, _times(ev), ev.delta, ev.nu, window=ev.window, tol=ev.tol)
    except ValueError as exc:
        raise PreconditionFailure(str(exc))
    out.csv("decay.csv", ["t", "norm_KC", "level1_error"], rep.rows())
    out.json("decay_report.json", {"slope": rep.slope, "level1_slope": rep.level1_slope, "target": rep.target,
                                   "window": list(rep.window), "ok": rep.ok})
    print(f"ergodicity: slope {rep.slope:.4f} (target <= {rep.target:.4f}), level-1 slope {rep.level1_slope:.4f}")
    if not rep.ok:
        raise AssertionFailure(f"ergodicity: fitted slope {rep.slope:.4f} > {rep.target:.4f}")


def _read_series(path: Path, column: str):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    cols = rows[0].keys()
    col = column if column in cols else next((c for c in cols if c.startswith(column)), None)
    if col is None:
        raise ConfigFailure(f"column {column!r} missing in {path}")
    out = {}
    for i, r in enumerate(rows):
        key = (r.get("t", i), r.get("level", ""))
        out[key] = float(r[col])
    return out


def cmd_compare(cfg, spec, grid, model, out: Output, seed, threads, base: Path | None = None):
    c = cfg.compare
    if c is None:
        raise ConfigFailure("compare section missing")
    paths = []
    for p in (c.a, c.b):
        path = Path(p)
        if not path.is_absolute() and base is not None:
            path = base / path
        if not path.exists():
            raise ConfigFailure(f"compare input {path} does not exist")
        paths.append(path)
    A, B = (_read_series(p, c.column) for p in paths)
    common = sorted(set(A) & set(B), key=lambda k: (float(k[0]), k[1]))
    if not common:
        raise AssertionFailure("compare: the two series share no (t, level) keys")
    devs = [abs(A[k] - B[k]) for k in common]
    worst = max(devs)
    out.csv("compare.csv", ["t", "level", "a", "b", "abs_dev"],
            [(k[0], k[1], A[k], B[k], d) for k, d in zip(common, devs)])
    out.json("compare.json", {"max_deviation": worst, "threshold": c.threshold, "points": len(common)})
    print(f"compare: max deviation {worst:.6g} over {len(common)} points (threshold {c.threshold:.6g})")
    if worst > c.threshold:
        raise AssertionFailure(f"compare: max deviation {worst:.6g} > threshold {c.threshold:.6g}")


def cmd_validate(cfg, spec, grid, model, out: Output, seed, threads):
    from .validation import run_validation
    rows = run_validation(cfg, spec, grid, model, seed)
    width = max(len(r[0]) for r in rows)
    print(f"{'check':<{width}}  status  detail")
    for name, status, detail in rows:
        print(f"{name:<{width}}  {status:<6}  {detail}")
    out.csv("validate.csv", ["check", "status", "detail"], rows)
    failed = [r[0] for r in rows if r[1] == "FAIL"]
    if failed:
        raise AssertionFailure("validate: failed checks: " + ", ".join(failed))


DISPATCH = {"validate": cmd_validate, "evolve": cmd_evolve, "chain": cmd_chain, "stationary": cmd_stationary,
            "simulate": cmd_simulate, "ergodicity": cmd_ergodicity, "compare": cmd_compare}


def _threads(arg):
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("GAMMADYN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigFailure(f"GAMMADYN_THREADS must be an integer, got {env!r}")
    return 1


def build_parser():
    ap = argparse.ArgumentParser(prog="gammadyn", description="Birth-and-death dynamics on a periodic grid.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="config JSON file or bundled preset name")
    ap.add_argument("--seed", type=int, default=None, help="64-bit seed (overrides the config)")
    ap.add_argument("--threads", type=int, default=None, help="worker cap (fallback: GAMMADYN_THREADS)")
    ap.add_argument("--out", default=None, help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, base = load_config(args.config)
        if cfg.command is not None and cfg.command != args.command:
            raise ConfigFailure(f"config is for command {cfg.command!r}, not {args.command!r}")
        seed = cfg.seed if args.seed is None else args.seed
        if not 0 <= seed < 2 ** 64:
            raise ConfigFailure("seed must be a 64-bit unsigned integer")
        threads = _threads(args.threads)
        grid = cfg.grid.build()
        spec = model = None
        if args.command != "compare" or cfg.model is not None or cfg.model_file is not None:
            spec = cfg.resolved_model(base)
            model = build_model(spec, grid)
    except (ValidationError, ValueError, FileNotFoundError, ConfigFailure) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out or cfg.output_dir or f"gammadyn_out/{args.command}")
    out = Output(out_dir)
    try:
        if args.command == "compare":
            extra = cmd_compare(cfg, spec, grid, model, out, seed, threads, base=base)
        else:
            extra = DISPATCH[args.command](cfg, spec, grid, model, out, seed, threads)
    except ConfigFailure as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PreconditionFailure as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        out.manifest(cfg, args.command, seed, {"status": "precondition", "message": str(exc)})
        return 3
    except AssertionFailure as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        out.manifest(cfg, args.command, seed, {"status": "assertion", "message": str(exc)})
        return 1
    out.manifest(cfg, args.command, seed, dict(extra or {}, status="ok"))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
