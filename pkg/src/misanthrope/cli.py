"""Batch experiment runner.

Invocation: ``misanthrope <mode> --config cfg.toml [--out dir] [--seed n]
[--threads n]`` with modes simulate, meanfield, stationary, compare and
coarsen.  Configs are TOML files with an [experiment] section plus optional
per-mode sections; every run writes a manifest recording the config, seeds,
versions and wall clock, and re-running an identical config reproduces all
other outputs byte for byte.

Exit codes: 0 on success (scientific negatives such as blow-up reports
included), 1 on usage or config errors, 2 on internal errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 path
    import tomli as tomllib

from . import __version__
from . import diagnostics as diag
from . import initial as init_mod
from . import kernels as kern_mod
from . import meanfield as mf
from . import simulate as sim

MODES = ("simulate", "meanfield", "stationary", "compare", "coarsen")

_EXPERIMENT_KEYS = {
    "mode", "kernel", "initial", "L", "replicas", "horizon",
    "record_times", "seed", "out",
}
_SOLVER_KEYS = {
    "rel_tol", "abs_tol", "K_init", "max_K", "boundary_trigger",
    "blowup_m2_threshold", "max_steps",
}
_STATIONARY_KEYS = {"n_max", "phi"}
_COMPARE_KEYS = {"observable_level", "time", "pair_level"}
_COARSEN_KEYS = {"fit_window", "baseline", "subtract_critical_bulk"}


@dataclass
class ExperimentConfig:
    mode: str
    kernel_spec: str
    initial_spec: Optional[str]
    sizes: list[int]
    replicas: int
    horizon: float
    record_times: Optional[list[float]]
    seed: int
    out: Optional[str]
    solver: dict = dc_field(default_factory=dict)
    stationary: dict = dc_field(default_factory=dict)
    compare: dict = dc_field(default_factory=dict)
    coarsen: dict = dc_field(default_factory=dict)
    raw: dict = dc_field(default_factory=dict)

    def solver_config(self, **overrides) -> mf.SolverConfig:
        kw = dict(self.solver)
        kw.update(overrides)
        return mf.SolverConfig(**kw)


def validate(text: str, mode: Optional[str] = None) -> tuple[Optional[ExperimentConfig], list[str]]:
    """Parse and validate a TOML config, collecting every error found."""
    errors: list[str] = []
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        return None, [f"config is not valid TOML: {exc}"]
    exp = data.get("experiment")
    if exp is None:
        return None, ["missing [experiment] section"]

    for key in exp:
        if key not in _EXPERIMENT_KEYS:
            errors.append(f"experiment: unknown key {key!r}")
    for section, allowed in (
        ("solver", _SOLVER_KEYS),
        ("stationary", _STATIONARY_KEYS),
        ("compare", _COMPARE_KEYS),
        ("coarsen", _COARSEN_KEYS),
    ):
        for key in data.get(section, {}):
            if key not in allowed:
                errors.append(f"{section}: unknown key {key!r}")
    for section in data:
        if section not in ("experiment", "solver", "stationary", "compare", "coarsen"):
            errors.append(f"unknown section [{section}]")

    mode_val = mode or exp.get("mode")
    if mode_val is None:
        errors.append("experiment.mode is required (or pass the mode on the command line)")
    elif mode_val not in MODES:
        errors.append(f"experiment.mode must be one of {MODES}, got {mode_val!r}")

    kernel_spec = exp.get("kernel")
    if kernel_spec is None:
        errors.append("experiment.kernel is required")
    else:
        try:
            kern_mod.parse_kernel(str(kernel_spec))
        except Exception as exc:
            errors.append(f"experiment.kernel: {exc}")

    needs_initial = mode_val in ("simulate", "meanfield", "compare", "coarsen")
    initial_spec = exp.get("initial")
    parsed_initial = None
    if initial_spec is None:
        if needs_initial:
            errors.append("experiment.initial is required for this mode")
    else:
        try:
            parsed_initial = init_mod.parse_initial(str(initial_spec))
        except Exception as exc:
            errors.append(f"experiment.initial: {exc}")
    if parsed_initial is not None and mode_val in ("meanfield", "coarsen"):
        try:
            parsed_initial.mean_field_f0()
        except Exception as exc:
            errors.append(f"experiment.initial: {exc}")

    sizes = exp.get("L", [])
    if isinstance(sizes, int):
        sizes = [sizes]
    if not isinstance(sizes, list) or any(not isinstance(v, int) or v < 2 for v in sizes):
        errors.append("experiment.L must be an integer >= 2 or a list of them")
        sizes = []
    if mode_val in ("simulate", "compare") and not sizes:
        errors.append("experiment.L is required for simulation modes")
    if mode_val == "compare" and len(sizes) < 2:
        errors.append("compare mode needs at least 2 system sizes in L")

    replicas = exp.get("replicas", 1)
    if not isinstance(replicas, int) or replicas < 1:
        errors.append("experiment.replicas must be a positive integer")
    elif mode_val == "compare" and replicas < 2:
        errors.append("compare mode needs replicas >= 2")

    horizon = exp.get("horizon", 1.0)
    if not isinstance(horizon, (int, float)) or horizon < 0:
        errors.append("experiment.horizon must be a non-negative number")

    record_times = exp.get("record_times")
    if record_times is not None:
        if not isinstance(record_times, list) or any(
            not isinstance(v, (int, float)) for v in record_times
        ):
            errors.append("experiment.record_times must be a list of numbers")
        elif any(v < 0 or v > horizon for v in record_times):
            errors.append("experiment.record_times must lie within [0, horizon]")

    seed = exp.get("seed", 0)
    if not isinstance(seed, int):
        errors.append("experiment.seed must be an integer")

    solver = dict(data.get("solver", {}))
    try:
        mf.SolverConfig(**solver)
    except (TypeError, ValueError) as exc:
        errors.append(f"solver: {exc}")

    comp = dict(data.get("compare", {}))
    if "pair_level" in comp:
        pl = comp["pair_level"]
        if not (isinstance(pl, list) and len(pl) == 2 and all(isinstance(v, int) for v in pl)):
            errors.append("compare.pair_level must be a pair of integers")
    coarsen = dict(data.get("coarsen", {}))
    if "fit_window" in coarsen:
        fw = coarsen["fit_window"]
        if not (isinstance(fw, list) and len(fw) == 2):
            errors.append("coarsen.fit_window must be [t_lo, t_hi]")

    stat = dict(data.get("stationary", {}))
    if "n_max" in stat and (not isinstance(stat["n_max"], int) or stat["n_max"] < 64):
        errors.append("stationary.n_max must be an integer >= 64")

    if errors:
        return None, errors
    return (
        ExperimentConfig(
            mode=str(mode_val),
            kernel_spec=str(kernel_spec),
            initial_spec=str(initial_spec) if initial_spec is not None else None,
            sizes=list(sizes),
            replicas=int(replicas),
            horizon=float(horizon),
            record_times=[float(v) for v in record_times] if record_times is not None else None,
            seed=int(seed),
            out=exp.get("out"),
            solver=solver,
            stationary=stat,
            compare=comp,
            coarsen=coarsen,
            raw=data,
        ),
        [],
    )


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _write_csv(path: Path, schema: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# schema: {schema}\n")
        fh.write(schema + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path: Path, payload: dict) -> None:
    # non-finite floats become strings so the files stay strict JSON
    text = json.dumps(_sanitize(payload), indent=2, sort_keys=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def _record_grid(cfg: ExperimentConfig, n_default: int = 11) -> list[float]:
    if cfg.record_times is not None:
        return sorted(cfg.record_times)
    if cfg.horizon == 0:
        return [0.0]
    return np.linspace(0.0, cfg.horizon, n_default).tolist()


def _replica_seeds(master_seed: int, replica: int) -> tuple:
    root = np.random.SeedSequence(entropy=master_seed, spawn_key=(replica,))
    return tuple(root.spawn(2))  # (initial-condition stream, dynamics stream)


def _run_replica(args) -> tuple[sim.EmpiricalTrajectory, np.ndarray]:
    kernel_spec, initial_spec, L, replica, master_seed, horizon, rec = args
    kernel = kern_mod.parse_kernel(kernel_spec)
    ispec = init_mod.parse_initial(initial_spec)
    seq_init, seq_dyn = _replica_seeds(master_seed, replica)
    config = ispec.realize(L, seq_init)
    state = sim.new_simulation(config, kernel, seq_dyn)
    traj = sim.run_until(state, horizon, rec)
    traj.replica = replica
    return traj, np.array(state.occ, dtype=np.int64)


def _run_ensemble(cfg: ExperimentConfig, L: int, rec: list[float], threads: int):
    tasks = [
        (cfg.kernel_spec, cfg.initial_spec, L, r, cfg.seed, cfg.horizon, rec)
        for r in range(cfg.replicas)
    ]
    if threads <= 1:
        results = [_run_replica(t) for t in tasks]
    else:
        # per-replica derived seeds keep results independent of scheduling
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_replica, tasks))
    return results


# ---------------------------------------------------------------------------
# mode drivers


def _drive_simulate(cfg: ExperimentConfig, out: Path, threads: int) -> list[str]:
    rec = _record_grid(cfg)
    L = cfg.sizes[0]
    files = []
    for traj, final_occ in _run_ensemble(cfg, L, rec, threads):
        r = traj.replica
        name = f"trajectory_r{r:04d}.csv"
        rows = []
        for i, t in enumerate(traj.times):
            for k, n_k in enumerate(traj.counts[i]):
                if n_k:
                    rows.append((t, k, n_k / traj.L))
        _write_csv(out / name, "t,k,F_k", rows)
        files.append(name)
        name_m = f"moments_r{r:04d}.csv"
        _write_csv(
            out / name_m,
            "t,m1,m2",
            zip(traj.times, traj.m1, traj.m2),
        )
        files.append(name_m)
        name_c = f"config_r{r:04d}.csv"
        sim.configuration_to_csv(sim.Configuration(final_occ), out / name_c)
        files.append(name_c)
    return files


def _meanfield_solution(cfg: ExperimentConfig, rec: list[float]) -> mf.MeanFieldSolution:
    kernel = kern_mod.parse_kernel(cfg.kernel_spec)
    ispec = init_mod.parse_initial(cfg.initial_spec)
    f0 = ispec.mean_field_f0()
    return mf.integrate(f0, kernel, cfg.horizon, cfg.solver_config(), record_times=rec)


def _drive_meanfield(cfg: ExperimentConfig, out: Path, threads: int) -> list[str]:
    rec = _record_grid(cfg, n_default=101)
    sol = _meanfield_solution(cfg, rec)
    files = ["solution.csv", "moments.csv"]
    rows = []
    for s in sol.states:
        for k, fk in enumerate(s.f):
            if fk != 0.0:
                rows.append((s.t, k, fk))
    _write_csv(out / "solution.csv", "t,k,f_k", rows)
    _write_csv(
        out / "moments.csv",
        "t,m0,m1,m2,leaked_mass",
        (
            (s.t, mf.moment(s.f, 0), mf.moment(s.f, 1), mf.moment(s.f, 2), s.leaked_mass)
            for s in sol.states
        ),
    )
    if sol.blowup_time is not None:
        _write_json(
            out / "blowup.json",
            {
                "kernel_spec": sol.kernel_spec,
                "K": sol.states[-1].K if sol.states else None,
                "blowup_time": sol.blowup_time,
                "flags": sol.flags,
            },
        )
        files.append("blowup.json")
    return files


def _drive_stationary(cfg: ExperimentConfig, out: Path, threads: int) -> list[str]:
    kernel = kern_mod.parse_kernel(cfg.kernel_spec)
    n_max = int(cfg.stationary.get("n_max", 1 << 17))
    family = kern_mod.stationary_weights(kernel, n_max)
    crit = kern_mod.critical_point(family)
    files = ["family.csv", "critical.json"]
    _write_csv(out / "family.csv", "n,w,logw", family.export_rows())
    _write_json(
        out / "critical.json",
        {
            "kernel_spec": kernel.spec_string(),
            "n_max": family.n_max,
            "phi_c": crit.phi_c,
            "rho_c": crit.rho_c,
            "stabilized": crit.stabilized,
            "tail_class": crit.tail_class,
            "degenerate": family.degenerate,
        },
    )
    for phi in cfg.stationary.get("phi", []):
        f = kern_mod.marginal(family, float(phi), tail_tol=1e-9)
        keep = f > 0
        name = f"marginal_phi{phi}.csv"
        _write_csv(
            out / name,
            "k,f_k",
            ((k, f[k]) for k in range(f.size) if keep[k]),
        )
        files.append(name)
    return files


def _drive_compare(cfg: ExperimentConfig, out: Path, threads: int) -> list[str]:
    rec = _record_grid(cfg)
    ensembles = {
        L: [traj for traj, _ in _run_ensemble(cfg, L, rec, threads)] for L in cfg.sizes
    }
    sol = _meanfield_solution(cfg, rec)
    report = diag.lln_report(ensembles, sol, rec)
    files = ["lln.csv", "summary.json", "variance.csv", "chaos.csv"]
    rows = []
    for i, L in enumerate(report.sizes):
        for j, t in enumerate(report.times):
            rows.append((L, t, report.tv[i, j], report.stderr[i, j]))
    _write_csv(out / "lln.csv", "L,t,tv,stderr", rows)

    t_star = float(cfg.compare.get("time", min(1.0, cfg.horizon)))
    level = int(cfg.compare.get("observable_level", 1))
    h = np.zeros(level + 1)
    h[level] = 1.0
    if len(cfg.sizes) >= 3:
        var = diag.variance_scaling(ensembles, h, t_star)
    else:
        # slope fit needs >= 3 sizes; still report the raw variances
        vals = []
        for L in cfg.sizes:
            samples = [float(h[: tr.F_at(t_star).size] @ tr.F_at(t_star)[: h.size]) for tr in ensembles[L]]
            vals.append(float(np.var(samples, ddof=1)))
        var = diag.VarianceScalingReport(
            list(cfg.sizes), np.array(vals), math.nan, math.inf
        )
    _write_csv(
        out / "variance.csv",
        "L,variance",
        zip(var.sizes, var.variances),
    )
    k_l = cfg.compare.get("pair_level", [1, 1])
    stats = {
        L: sim.two_site_statistics(ensembles[L], t_star, int(k_l[0]), int(k_l[1]))
        for L in cfg.sizes
    }
    chaos = diag.chaos_decay(stats)
    _write_csv(
        out / "chaos.csv",
        "L,covariance,stderr",
        zip(chaos.sizes, [stats[L].covariance for L in chaos.sizes], chaos.stderrs),
    )
    _write_json(
        out / "summary.json",
        {
            "lln_slope": report.slope,
            "lln_slope_stderr": report.slope_stderr,
            "lln_sup_tv": report.sup_tv,
            "lln_strictly_decreasing": report.strictly_decreasing,
            "variance_slope": var.slope,
            "variance_slope_stderr": var.slope_stderr,
            "variance_degenerate": var.degenerate,
            "chaos_decreasing": chaos.decreasing,
            "chaos_slope": chaos.slope,
            "observable_level": level,
            "time": t_star,
        },
    )
    return files


def _drive_coarsen(cfg: ExperimentConfig, out: Path, threads: int) -> list[str]:
    rec = cfg.record_times
    if rec is None:
        lo = min(0.1, cfg.horizon / 100) if cfg.horizon > 0 else 0.0
        rec = np.geomspace(max(lo, 1e-3), cfg.horizon, 80).tolist()
    sol = _meanfield_solution(cfg, sorted(rec))
    ts = sol.times
    m2 = sol.moments(2)
    files = ["moments.csv", "coarsening.json"]
    _write_csv(
        out / "moments.csv",
        "t,m0,m1,m2,leaked_mass",
        (
            (s.t, mf.moment(s.f, 0), mf.moment(s.f, 1), mf.moment(s.f, 2), s.leaked_mass)
            for s in sol.states
        ),
    )
    baseline = float(cfg.coarsen.get("baseline", 0.0))
    if cfg.coarsen.get("subtract_critical_bulk", False):
        kernel = kern_mod.parse_kernel(cfg.kernel_spec)
        family = kern_mod.stationary_weights(kernel, 4000)
        crit = kern_mod.critical_point(kern_mod.stationary_weights(kernel, 1 << 15))
        fbar = kern_mod.marginal(family, crit.phi_c, tail_tol=1e-6)
        baseline = mf.moment(fbar, 2)
    window = cfg.coarsen.get("fit_window")
    report = diag.coarsening_fit(
        ts,
        m2,
        window=tuple(window) if window else None,
        baseline=baseline,
        blowup_time=sol.blowup_time,
    )
    _write_json(
        out / "coarsening.json",
        {
            "kernel_spec": sol.kernel_spec,
            "exponent": report.exponent,
            "stderr": report.stderr,
            "regime": report.regime,
            "window": list(report.window),
            "baseline": report.baseline,
            "blowup_time": sol.blowup_time,
            "flags": sol.flags,
        },
    )
    return files


def run(cfg: ExperimentConfig, out_dir: Optional[str] = None, threads: int = 1) -> int:
    """Execute a validated config; returns the process exit code."""
    out = Path(out_dir or cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    driver = {
        "simulate": _drive_simulate,
        "meanfield": _drive_meanfield,
        "stationary": _drive_stationary,
        "compare": _drive_compare,
        "coarsen": _drive_coarsen,
    }[cfg.mode]
    files = driver(cfg, out, threads)
    import scipy

    manifest = {
        "config": cfg.raw,
        "mode": cfg.mode,
        "master_seed": cfg.seed,
        "outputs": sorted(files),
        "versions": {
            "misanthrope": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "wall_clock_seconds": time.time() - started,
    }
    if cfg.initial_spec and cfg.initial_spec.startswith("conditioned"):
        ispec = init_mod.parse_initial(cfg.initial_spec)
        if ispec.alpha2 is None and ispec.marginal is not None:
            a1, a2 = init_mod.default_alpha(ispec.marginal)
            manifest["moment_bounds"] = {"alpha1": a1, "alpha2": a2, "source": "defaults"}
    _write_json(out / "manifest.json", manifest)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="misanthrope",
        description="complete-graph particle simulation and mean-field experiments",
    )
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, help="TOML experiment config")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument(
        "--threads",
        type=int,
        default=os.cpu_count() or 1,
        help="replica parallelism (default: available cores)",
    )
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    cfg, errors = validate(text, mode=args.mode)
    if errors:
        for err in errors:
            print(f"config error: {err}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw.setdefault("experiment", {})["seed"] = args.seed
    try:
        return run(cfg, out_dir=args.out, threads=args.threads)
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
