"""Experiment configuration, multi-seed orchestration and CSV artifacts.

A run writes four files into ``output_dir``:

``gains.csv``
    ``t, g11, g12, ..., ric11, ric12, ...``: per grid point, the final
    regression gain averaged over repeats next to the Riccati solution.
``cost.csv``
    ``repeat, iteration, cost``: the forward-ensemble cost of every
    iteration of every successful repeat (iterations count from 1).
``trajectories.csv``
    ``sample, t, x1, xrev1, yrev1``: first coordinate of the forward state,
    reversed state and reversed adjoint for a seeded random subset of samples
    of the first successful repeat.
``summary.json``
    run metadata, final costs, the optimal cost and gain errors.

Floats are written with 17 significant digits so the files parse back to the
in-memory arrays exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .lq_model import GainSchedule, LqProblem, optimal_cost_oracle, riccati_solve
from .sde_core import STREAM_SELECTION, NumericalError, TimeGrid, make_grid, standard_normals
from .solver import SolverConfig, SolverOutput, solve

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentError",
    "ExperimentConfig",
    "RunArtifacts",
    "GainReport",
    "PRESETS",
    "preset_config",
    "load_config",
    "save_config",
    "worker_count",
    "run_repeats",
    "gain_report",
    "compare_oracle",
    "run_experiment",
    "run_oracle",
    "read_csv",
]

THREADS_ENV = "FBSDE_THREADS"
GAIN_CUTOFF_STEPS = 2

Matrix = list[list[float]]
Vector = list[float]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending fields."""


class ExperimentError(NumericalError):
    """Every repeat of an experiment failed."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemConfig(_Strict):
    A: Matrix
    B: Matrix
    sigma: Matrix
    Q: Matrix
    R: Union[Matrix, float]
    Q_f: Matrix
    m0: Vector
    Sigma0: Matrix

    @model_validator(mode="after")
    def _invariants(self):
        self.build(1.0)
        return self

    def build(self, horizon: float) -> LqProblem:
        return LqProblem(
            A=self.A,
            B=self.B,
            sigma=self.sigma,
            Q=self.Q,
            R=self.R,
            Q_f=self.Q_f,
            m0=self.m0,
            Sigma0=self.Sigma0,
            horizon=horizon,
        )


class GridConfig(_Strict):
    horizon: float = 1.0
    dt: float = 0.02

    @model_validator(mode="after")
    def _divisible(self):
        make_grid(self.horizon, self.dt)
        return self


class SolverSection(_Strict):
    n_samples: int = Field(1000, ge=2)
    n_iters: int = Field(75, ge=1)
    step_size: float = Field(0.02, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    record_history: bool = False
    terminal_sampling: Literal["fresh", "fixed", "reuse"] = "fixed"


class ExperimentConfig(_Strict):
    """Top-level JSON document; ``problem`` is required, everything else defaults."""

    problem: ProblemConfig
    grid: GridConfig = GridConfig()
    solver: SolverSection = SolverSection()
    n_repeats: int = Field(1, ge=1)
    n_trajectories: int = Field(20, ge=0)
    output_dir: str = "results"

    def lq_problem(self) -> LqProblem:
        return self.problem.build(self.grid.horizon)

    def time_grid(self) -> TimeGrid:
        return make_grid(self.grid.horizon, self.grid.dt)

    def solver_config(self, repeat: int = 0) -> SolverConfig:
        s = self.solver
        return SolverConfig(
            n_samples=s.n_samples,
            n_iters=s.n_iters,
            step_size=s.step_size,
            seed=s.seed + repeat,
            record_history=s.record_history,
            terminal_sampling=s.terminal_sampling,
        )

    def digest(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


_EYE2 = [[1.0, 0.0], [0.0, 1.0]]

PRESETS = {
    "mass-spring": {
        "problem": {
            "A": [[0.0, 1.0], [-1.0, 0.0]],
            "B": [[0.0], [1.0]],
            "sigma": _EYE2,
            "Q": _EYE2,
            "R": [[1.0]],
            "Q_f": _EYE2,
            "m0": [0.0, 0.0],
            "Sigma0": _EYE2,
        },
        "grid": {"horizon": 1.0, "dt": 0.02},
        "solver": {"n_samples": 1000, "n_iters": 75, "step_size": 0.02, "seed": 0},
        "n_repeats": 10,
    }
}


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}")
    return "; ".join(lines)


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def preset_config(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    data = json.loads(json.dumps(PRESETS[name]))
    data.update(overrides)
    return validate_config(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return validate_config(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n")


def worker_count(n_tasks: int) -> int:
    """Worker threads for repeats: ``FBSDE_THREADS`` caps it, 0 or unset means auto."""
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if cap < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0, got {cap}")
    if cap == 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def run_repeats(cfg: ExperimentConfig) -> list:
    """Solve every repeat; each entry is a :class:`SolverOutput` or the exception raised."""
    prob, grid = cfg.lq_problem(), cfg.time_grid()

    def one(r):
        try:
            return solve(prob, grid, cfg.solver_config(r))
        except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("repeat %d failed: %s", r, exc)
            return exc

    with ThreadPoolExecutor(max_workers=worker_count(cfg.n_repeats)) as pool:
        return list(pool.map(one, range(cfg.n_repeats)))


@dataclass
class GainReport:
    """Entrywise difference between estimated and oracle gains."""

    times: np.ndarray
    diff: np.ndarray
    rms_per_entry: np.ndarray
    rms: float
    max_rms: float
    cutoff_steps: int

    def to_dict(self) -> dict:
        return {
            "cutoff_steps": self.cutoff_steps,
            "rms_per_entry": self.rms_per_entry.tolist(),
            "rms": self.rms,
            "max_rms": self.max_rms,
        }


def gain_report(gains, oracle, grid: TimeGrid, cutoff_steps: int = GAIN_CUTOFF_STEPS) -> GainReport:
    """RMS over ``t in [0, T - cutoff_steps*dt]`` of ``gains - oracle`` per entry."""
    g = gains.g1 if isinstance(gains, GainSchedule) else np.asarray(gains, dtype=float)
    o = oracle.g1 if isinstance(oracle, GainSchedule) else np.asarray(oracle, dtype=float)
    if g.shape != o.shape:
        raise ValueError(f"gain shapes differ: {g.shape} vs {o.shape}")
    keep = grid.n_steps + 1 - cutoff_steps
    diff = g[:keep] - o[:keep]
    rms_entry = np.sqrt(np.mean(diff**2, axis=0))
    return GainReport(
        times=grid.times[:keep],
        diff=diff,
        rms_per_entry=rms_entry,
        rms=float(np.sqrt(np.mean(diff**2))),
        max_rms=float(rms_entry.max()),
        cutoff_steps=cutoff_steps,
    )


def _successes(outputs):
    ok = [(r, o) for r, o in enumerate(outputs) if isinstance(o, SolverOutput)]
    if not ok:
        first = next(o for o in outputs if isinstance(o, Exception))
        raise ExperimentError(f"all {len(outputs)} repeats failed; first error: {first}")
    return ok


def compare_oracle(cfg: ExperimentConfig, outputs=None) -> GainReport:
    """Average final gains over successful repeats and compare with the Riccati oracle."""
    grid = cfg.time_grid()
    if outputs is None:
        outputs = run_repeats(cfg)
    ok = _successes(outputs)
    mean_g = np.mean([o.gains.g1 for _, o in ok], axis=0)
    return gain_report(mean_g, riccati_solve(cfg.lq_problem(), grid), grid)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Parse an emitted CSV back into its header and a float array."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def _entry_names(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i + 1}{j + 1}" for i in range(n) for j in range(n)]


@dataclass
class RunArtifacts:
    gains_csv: Path
    cost_csv: Path
    trajectories_csv: Path
    summary_json: Path
    summary: dict
    report: GainReport
    mean_gains: np.ndarray
    oracle_gains: np.ndarray
    costs: dict


def select_samples(seed: int, n_samples: int, count: int) -> np.ndarray:
    """Seeded random subset of sample indices, in increasing order."""
    count = min(count, n_samples)
    keys = standard_normals(seed, STREAM_SELECTION, n_samples, (1,))[:, 0]
    return np.sort(np.argsort(keys, kind="stable")[:count])


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> RunArtifacts:
    """Run every repeat and write the CSV artifacts and summary."""
    start = time.perf_counter()
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    prob, grid = cfg.lq_problem(), cfg.time_grid()
    oracle = riccati_solve(prob, grid)
    j_star = optimal_cost_oracle(prob, grid, oracle)

    outputs = run_repeats(cfg)
    ok = _successes(outputs)
    failures = {r: str(o) for r, o in enumerate(outputs) if isinstance(o, Exception)}
    mean_g = np.mean([o.gains.g1 for _, o in ok], axis=0)
    report = gain_report(mean_g, oracle, grid)
    n = prob.n
    times = grid.times

    gains_csv = out / "gains.csv"
    _write_csv(
        gains_csv,
        ["t", *_entry_names("g", n), *_entry_names("ric", n)],
        (
            [times[k], *mean_g[k].ravel(), *oracle.g1[k].ravel()]
            for k in range(grid.n_steps + 1)
        ),
    )

    cost_csv = out / "cost.csv"
    _write_csv(
        cost_csv,
        ["repeat", "iteration", "cost"],
        ([r, it + 1, c] for r, o in ok for it, c in enumerate(o.cost_history)),
    )

    first_repeat, first = ok[0]
    picks = select_samples(cfg.solver.seed, cfg.solver.n_samples, cfg.n_trajectories)
    xf = first.forward_states.values
    xr = first.reversed_states.values
    yr = first.adjoints.values
    traj_csv = out / "trajectories.csv"
    _write_csv(
        traj_csv,
        ["sample", "t", "x1", "xrev1", "yrev1"],
        ([i, times[k], xf[i, k, 0], xr[i, k, 0], yr[i, k, 0]] for i in picks for k in range(grid.n_steps + 1)),
    )

    costs = {r: o.cost_history for r, o in ok}
    final_costs = [float(o.cost_history[-1]) for _, o in ok]
    summary = {
        "seed": cfg.solver.seed,
        "seeds": [cfg.solver.seed + r for r in range(cfg.n_repeats)],
        "config_hash": cfg.digest(),
        "wall_time": time.perf_counter() - start,
        "n_repeats": cfg.n_repeats,
        "failed_repeats": failures,
        "trajectory_repeat": first_repeat,
        "initial_cost": float(np.mean([o.cost_history[0] for _, o in ok])),
        "final_cost": float(np.mean(final_costs)),
        "final_costs": final_costs,
        "optimal_cost": j_star,
        "gain_error": report.to_dict(),
    }
    summary_json = out / "summary.json"
    summary_json.write_text(json.dumps(summary, indent=2) + "\n")
    return RunArtifacts(
        gains_csv=gains_csv,
        cost_csv=cost_csv,
        trajectories_csv=traj_csv,
        summary_json=summary_json,
        summary=summary,
        report=report,
        mean_gains=mean_g,
        oracle_gains=oracle.g1,
        costs=costs,
    )


def run_oracle(cfg: ExperimentConfig, output_dir=None) -> dict:
    """Solve only the Riccati equation; writes ``riccati.csv`` (``t, ric11, ...``)."""
    prob, grid = cfg.lq_problem(), cfg.time_grid()
    gains = riccati_solve(prob, grid)
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "riccati.csv"
    _write_csv(
        path,
        ["t", *_entry_names("ric", prob.n)],
        ([t, *g.ravel()] for t, g in zip(grid.times, gains.g1)),
    )
    return {
        "riccati_csv": str(path),
        "optimal_cost": optimal_cost_oracle(prob, grid, gains),
        "g1_initial": gains.g1[0].tolist(),
    }
