"""Command-line front end: configuration, orchestration, and CSV/report output.

Subcommands: simulate, solve-u, solve-pi, validate, ergodic, stationary,
identity-check.  A run is fully determined by one JSON config file plus the
seed; identical invocations produce byte-identical outputs regardless of the
parallelism degree (replicates are assigned counter-based streams by index,
and reductions are performed in index order).  Nothing is written outside the
chosen output directory, and no output carries timestamps.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .measures import AgeMeasure, ScalarField
from .models import BranchingModel, ImmigrationMechanism
from .simulate import SimConfig, simulate
from .solvers import (
    SolverGrid,
    ergodicity_check,
    exponential_tail_identity,
    solve_exponent,
    solve_mean,
    stationary_laplace,
)
from .validate import (
    ComparisonReport,
    bound_suite,
    compare_laplace,
    compare_mean,
    control_report,
    ergodic_convergence,
    martingale_residual,
    snapshot_profile,
    solver_bound_checks,
)

SCHEMA_VERSION = 1
CHECK_COLUMNS = ["name", "mc", "se", "analytic", "tol", "z", "verdict"]


class ConfigError(ValueError):
    """Invalid run configuration, with a field-level message."""


@dataclass(frozen=True)
class RunConfig:
    """Parsed, validated run configuration."""

    model: BranchingModel
    initial: AgeMeasure
    t_end: float
    grid_dt: float
    quadrature: str
    replicates: int
    seed: int
    f: ScalarField
    immigration: ImmigrationMechanism | None = None
    snapshots: int = 50

    def sim_config(self) -> SimConfig:
        times = tuple(np.linspace(0.0, self.t_end, self.snapshots))
        return SimConfig(
            self.model,
            self.initial,
            self.t_end,
            times,
            self.immigration,
            self.seed,
        )

    def to_dict(self) -> dict:
        d: dict = {
            "schema_version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "immigration": None if self.immigration is None else self.immigration.to_dict(),
            "initial": list(self.initial.ages),
            "t_end": self.t_end,
            "f": self.f.to_dict(),
            "grid": {"dt": self.grid_dt, "quadrature": self.quadrature},
            "replicates": self.replicates,
            "seed": self.seed,
            "snapshots": self.snapshots,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        def req(key: str):
            if key not in d:
                raise ConfigError(f"{key}: missing required field")
            return d[key]

        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version}")
        try:
            model = BranchingModel.from_dict(req("model"))
        except (ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"model: {e}") from e
        imm = None
        if d.get("immigration") is not None:
            try:
                imm = ImmigrationMechanism.from_dict(d["immigration"])
            except (ValueError, KeyError, TypeError) as e:
                raise ConfigError(f"immigration: {e}") from e
        try:
            initial = AgeMeasure.from_ages(req("initial"))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"initial: {e}") from e
        t_end = float(req("t_end"))
        if not t_end > 0:
            raise ConfigError("t_end: must be > 0")
        grid = d.get("grid", {})
        dt = float(grid.get("dt", 1e-3))
        if not 0 < dt <= t_end:
            raise ConfigError("grid.dt: must satisfy 0 < dt <= t_end")
        quadrature = grid.get("quadrature", "trapezoid")
        if quadrature not in ("rectangle", "trapezoid"):
            raise ConfigError("grid.quadrature: must be 'rectangle' or 'trapezoid'")
        replicates = int(d.get("replicates", 10_000))
        if replicates < 2:
            raise ConfigError("replicates: must be >= 2")
        seed = int(d.get("seed", 0))
        try:
            f = ScalarField.from_dict(d.get("f", {"kind": "constant", "value": 1.0}))
        except (ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"f: {e}") from e
        snapshots = int(d.get("snapshots", 50))
        if snapshots < 2:
            raise ConfigError("snapshots: must be >= 2")
        return cls(model, initial, t_end, dt, quadrature, replicates, seed, f, imm, snapshots)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return RunConfig.from_dict(raw)


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_summary(path: Path, lines: list[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _report_lines(reports: list[ComparisonReport]) -> list[str]:
    lines = []
    for r in reports:
        lines.append(
            f"{r.name}: mc={_fmt(r.mc.value)} se={_fmt(r.mc.std_error)} "
            f"analytic={_fmt(r.analytic)} tol={_fmt(r.analytic_tol)} z={_fmt(r.z)} "
            f"verdict={'pass' if r.verdict else 'fail'}"
        )
    return lines


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(cfg: RunConfig, out: Path, n_jobs: int) -> int:
    sim = cfg.sim_config()
    traj = simulate(sim)
    write_csv(
        out / "events.csv",
        ["time", "kind", "dying_age", "offspring_count", "group_size"],
        [
            [
                e.time,
                e.kind,
                e.dying_age if e.kind == "branch" else "",
                e.offspring_count if e.kind == "branch" else "",
                e.group.total_mass if e.group is not None else "",
            ]
            for e in traj.events
        ],
    )
    profile = snapshot_profile(sim, cfg.f, cfg.replicates, stream=1, n_jobs=n_jobs)
    mass_rows = [
        [t, m.value, m.std_error, fe.value, fe.std_error] for t, m, fe in profile
    ]
    write_csv(out / "snapshot_stats.csv", ["time", "mean_mass", "se_mass", "mean_f", "se_f"], mass_rows)
    write_summary(
        out / "summary.txt",
        [
            f"replicate_0_events={len(traj.events)}",
            f"replicate_0_terminated_by={traj.terminated_by}",
            f"replicates={cfg.replicates}",
        ]
        + [
            f"t={_fmt(r[0])} mean_mass={_fmt(r[1])} se_mass={_fmt(r[2])} "
            f"mean_f={_fmt(r[3])} se_f={_fmt(r[4])}"
            for r in mass_rows
        ],
    )
    return 0


def _solution_tables(sol, grid: SolverGrid, out: Path, value_name: str) -> None:
    times = grid.times()
    write_csv(
        out / "boundary.csv",
        ["t", value_name],
        [[t, v] for t, v in zip(times, sol.boundary)],
    )
    # coarse (t, x, value) table: at most ~40 nodes per axis to keep files small
    stride = max(1, len(times) // 40)
    rows = []
    for x in times[::stride]:
        ray = sol.along_ray(float(x))
        rows.extend([float(t), float(x), float(v)] for t, v in zip(times[::stride], ray[::stride]))
    write_csv(out / "lattice.csv", ["t", "x", value_name], rows)


def _cmd_solve_u(cfg: RunConfig, out: Path) -> int:
    grid = SolverGrid(cfg.grid_dt, cfg.t_end, cfg.quadrature)
    sol = solve_exponent(cfg.model, cfg.f, grid)
    _solution_tables(sol, grid, out, "exponent")
    write_summary(
        out / "summary.txt",
        [f"t_end={_fmt(cfg.t_end)}", f"dt={_fmt(cfg.grid_dt)}", f"quadrature={cfg.quadrature}",
         f"boundary_at_t_end={_fmt(sol.boundary[-1])}"],
    )
    return 0


def _cmd_solve_pi(cfg: RunConfig, out: Path) -> int:
    grid = SolverGrid(cfg.grid_dt, cfg.t_end, cfg.quadrature)
    sol = solve_mean(cfg.model, cfg.f, grid)
    _solution_tables(sol, grid, out, "mean")
    write_summary(
        out / "summary.txt",
        [f"t_end={_fmt(cfg.t_end)}", f"dt={_fmt(cfg.grid_dt)}", f"quadrature={cfg.quadrature}",
         f"boundary_at_t_end={_fmt(sol.boundary[-1])}"],
    )
    return 0


def validation_suite(cfg: RunConfig, n_jobs: int = 1) -> list[ComparisonReport]:
    """The full comparison suite for one configuration.

    Two-sided identity checks with negative controls, one-sided pathwise
    bounds, and the deterministic solver lattice inequalities.  Controls are
    named ``control:...`` and are expected to fail; the suite's own power is
    asserted by their failure.
    """
    sim = cfg.sim_config()
    n, t, dt = cfg.replicates, cfg.t_end, cfg.grid_dt
    reports: list[ComparisonReport] = []
    lap = compare_laplace(sim, cfg.f, t, n, dt=dt, stream=10, n_jobs=n_jobs)
    reports += [lap, control_report(lap)]
    mean = compare_mean(sim, cfg.f, t, n, dt=dt, stream=20, n_jobs=n_jobs)
    reports += [mean, control_report(mean)]
    if cfg.f.kind in ("constant", "expdecay", "rational"):
        mart = martingale_residual(sim, "exp", cfg.f, t, n, stream=30, n_jobs=n_jobs)
        mart_bad = martingale_residual(
            sim, "exp", cfg.f, t, n, stream=30, n_jobs=n_jobs, perturb=0.05,
            name="control:martingale:exp",
        )
        reports += [mart, mart_bad]
    reports += bound_suite(sim, t, n, stream=40, n_jobs=n_jobs)
    lattice_grid = SolverGrid(dt, t, cfg.quadrature)
    reports += solver_bound_checks(cfg.model, cfg.f, lattice_grid)
    return reports


def _suite_outcome(reports: list[ComparisonReport]) -> tuple[bool, list[str]]:
    lines = []
    ok = True
    for r in reports:
        is_control = r.name.startswith("control:")
        expected = not r.verdict if is_control else r.verdict
        if not expected:
            ok = False
        status = "as-expected" if expected else "UNEXPECTED"
        lines.append(
            ("control " if is_control else "check ")
            + f"{r.name}: {'pass' if r.verdict else 'fail'} ({status})"
        )
    return ok, lines


def _cmd_validate(cfg: RunConfig, out: Path, n_jobs: int, ci: bool) -> int:
    reports = validation_suite(cfg, n_jobs)
    write_csv(out / "checks.csv", CHECK_COLUMNS, [r.row() for r in reports])
    ok, lines = _suite_outcome(reports)
    n_checks = sum(1 for r in reports if not r.name.startswith("control:"))
    n_controls = len(reports) - n_checks
    write_summary(
        out / "summary.txt",
        _report_lines(reports)
        + lines
        + [f"checks={n_checks}", f"controls={n_controls}", f"suite={'pass' if ok else 'fail'}"],
    )
    return 0 if ok or not ci else 1


def _cmd_ergodic(cfg: RunConfig, out: Path, n_jobs: int, ci: bool) -> int:
    if cfg.immigration is None:
        raise ConfigError("immigration: the ergodic command needs an immigration mechanism")
    report = ergodicity_check(cfg.model, cfg.immigration)
    lines = [
        f"status={report.status}",
        f"c0={_fmt(report.c0)}",
        f"criterion={report.criterion_status}",
        f"criterion_value={'' if report.criterion_value is None else _fmt(report.criterion_value)}",
        f"detail={report.detail}",
    ]
    rows: list[list] = []
    ok = True
    if report.status == "ergodic":
        horizons = [cfg.t_end / 4.0, cfg.t_end / 2.0, cfg.t_end]
        stat_value, reps, gaps = ergodic_convergence(
            cfg.sim_config(), cfg.f, horizons, cfg.replicates, dt=cfg.grid_dt,
            stream=50, n_jobs=n_jobs,
        )
        rows = [r.row() for r in reps]
        ok = all(r.verdict for r in reps) and all(
            gaps[i + 1] <= gaps[i] + 1e-12 for i in range(len(gaps) - 1)
        )
        lines += [f"stationary={_fmt(stat_value)}"]
        lines += [f"gap_T={_fmt(T)}: {_fmt(g)}" for T, g in zip(horizons, gaps)]
        lines += [f"gaps_decreasing={'true' if ok else 'false'}"]
    write_csv(out / "ergodic.csv", CHECK_COLUMNS, rows)
    write_summary(out / "summary.txt", lines)
    return 0 if ok or not ci else 1


def _cmd_stationary(cfg: RunConfig, out: Path) -> int:
    if cfg.immigration is None:
        raise ConfigError("immigration: the stationary command needs an immigration mechanism")
    thetas = [0.25, 0.5, 1.0, 2.0]
    rows = []
    for theta in thetas:
        rep = stationary_laplace(cfg.model, cfg.immigration, ScalarField.constant(theta))
        rows.append(
            [f"constant:{theta:g}", rep.value, rep.exponent_integral, rep.horizon, rep.dt,
             rep.tail_bound, rep.quadrature_error]
        )
    write_csv(
        out / "stationary.csv",
        ["f", "value", "exponent_integral", "horizon", "dt", "tail_bound", "quadrature_error"],
        rows,
    )
    write_summary(out / "summary.txt", [f"f={r[0]} value={_fmt(r[1])}" for r in rows])
    return 0


def _cmd_identity_check(out: Path, ci: bool) -> int:
    rows = []
    worst = 0.0
    for a in (0.5, 1.0, 2.0):
        for c in (0.5, 1.0, 2.0):
            for n in (1, 2, 5):
                lhs, rhs = exponential_tail_identity(a, c, n)
                diff = abs(lhs - rhs)
                worst = max(worst, diff)
                rows.append([a, c, n, lhs, rhs, diff])
    write_csv(out / "identity.csv", ["a", "c", "group_mass", "lhs", "rhs", "abs_diff"], rows)
    ok = worst <= 1e-8
    write_summary(
        out / "summary.txt",
        [f"cases={len(rows)}", f"max_abs_diff={_fmt(worst)}", f"verdict={'pass' if ok else 'fail'}"],
    )
    return 0 if ok or not ci else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agebranch",
        description="Exact simulation and solvers for age-structured branching processes",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "solve-u", "solve-pi", "validate", "ergodic", "stationary", "identity-check"):
        p = sub.add_parser(name)
        if name != "identity-check":
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--replicates", type=int, default=None, help="override replicate count")
        p.add_argument("--t-end", type=float, default=None, help="override the horizon")
        p.add_argument("--dt", type=float, default=None, help="override the solver step")
        p.add_argument("--out", default="out", help="output directory (all files go here)")
        p.add_argument("--parallelism", type=int, default=1, help="replicate worker processes")
        p.add_argument("--ci", action="store_true", help="nonzero exit on any failed check")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "identity-check":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            return _cmd_identity_check(out, args.ci)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.replicates is not None:
            cfg = replace(cfg, replicates=args.replicates)
        if args.t_end is not None:
            cfg = replace(cfg, t_end=args.t_end)
        if args.dt is not None:
            cfg = replace(cfg, grid_dt=args.dt)
        # re-validate the overridden configuration before touching the disk
        cfg = RunConfig.from_dict(cfg.to_dict())
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            return _cmd_simulate(cfg, out, args.parallelism)
        if args.command == "solve-u":
            return _cmd_solve_u(cfg, out)
        if args.command == "solve-pi":
            return _cmd_solve_pi(cfg, out)
        if args.command == "validate":
            return _cmd_validate(cfg, out, args.parallelism, args.ci)
        if args.command == "ergodic":
            return _cmd_ergodic(cfg, out, args.parallelism, args.ci)
        if args.command == "stationary":
            return _cmd_stationary(cfg, out)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
