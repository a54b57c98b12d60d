"""Data-generating processes and the Monte Carlo experiment runner.

Five scenarios: monotone power function (size), U-shape with known switch
(size, two join modes), two non-monotone alternatives (power), and a
log-convex exponential (size through the quadratic-constraint path).
Covariates are uniform on [0, 1], errors Gaussian and independent of them.
The runner replays the full test pipeline per replication against bootstrap
critical values, either the plain bootstrap or the warp-speed variant (one
bootstrap draw per replication, pooled quantiles).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bsplines import make_knot_system
from .constraints import (
    ConstraintSet,
    derivative_sign_constraints,
    log_convexity_constraints,
    partition_constraints,
)
from .errors import ShapeTestError
from .estimation import cross_validate_lambda, pspline_penalty
from .khmaladze import full_design, transform
from .teststats import compute_statistics
from .bootstrap import (
    DEFAULT_LEVELS,
    STAT_NAMES,
    bootstrap_statistics,
    empirical_upper_quantile,
)

SWITCH_POINT = float(np.exp(0.33) - 1.0)  # U-shape switch in Scenario 2

DEFAULT_LAMBDA_GRID = (0.0, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)


def scenario_mean(scenario: int, a: float = 50.0):
    """Regression function of a scenario, vectorized over x."""
    if scenario == 1:
        return lambda x: x ** (13.0 / 4.0)
    if scenario == 2:
        return lambda x: 10.0 * (np.log(1.0 + x) - 0.33) ** 2
    if scenario == 3:

        def dip(x):
            x = np.asarray(x, dtype=float)
            bump = np.exp(-100.0 * (x - 0.25) ** 2)
            left = (10.0 * x - 0.5) ** 3 - bump
            right = 0.1 * (x - 0.5) - bump
            return np.where(x < 0.5, left, right)

        return dip
    if scenario == 4:
        return lambda x: x + 0.415 * np.exp(-a * np.asarray(x, dtype=float) ** 2)
    if scenario == 5:
        return lambda x: np.exp(np.asarray(x, dtype=float) ** 2)
    raise ValueError(f"unknown scenario {scenario}")


def generate(scenario: int, n: int, sigma: float, seed=0, a: float = 50.0):
    """One draw: x uniform, y = m(x) + Gaussian noise independent of x."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    u = rng.normal(0.0, sigma, n)
    return x, scenario_mean(scenario, a=a)(x) + u


@dataclass
class ScenarioConfig:
    scenario: int
    n: int = 1000
    sigma: float = 0.25
    l_prime: int = 6
    degree: int = 3
    spline_mode: str = "bspline"           # "bspline" or "pspline"
    levels: tuple[float, ...] = (0.10, 0.05)
    mc_reps: int = 200
    bootstrap_reps: int = 199
    warp: bool = False
    seed: int = 0
    a: float = 50.0                         # Scenario 4 dip parameter
    join: str = "continuous"                # Scenario 2 join mode
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    n_jobs: int | None = None               # None -> SHAPETEST_THREADS or 1

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4, 5):
            raise ValueError(f"unknown scenario {self.scenario}")
        if self.n < 1 or self.mc_reps < 1 or self.bootstrap_reps < 1:
            raise ValueError("counts must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.spline_mode not in ("bspline", "pspline"):
            raise ValueError(f"unknown spline mode {self.spline_mode!r}")

    def to_json_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def scenario_problem(cfg: ScenarioConfig):
    """Basis and constraint set under test for a scenario."""
    if cfg.scenario == 2:
        left = make_knot_system(cfg.degree, cfg.l_prime, (0.0, SWITCH_POINT))
        right = make_knot_system(cfg.degree, cfg.l_prime, (SWITCH_POINT, 1.0))
        S = partition_constraints([(left, 1, -1), (right, 1, +1)], join=cfg.join)
        return [left, right], S
    ks = make_knot_system(cfg.degree, cfg.l_prime, (0.0, 1.0))
    if cfg.scenario == 5:
        return ks, log_convexity_constraints(ks)
    return ks, derivative_sign_constraints(ks, 1, +1)


def _mc_data_rng(cfg: ScenarioConfig, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((cfg.seed, rep, 1))))


def _boot_seed(cfg: ScenarioConfig, rep: int) -> int:
    return int(np.random.SeedSequence((cfg.seed, rep, 2)).generate_state(1)[0])


def _modal_lambda(cfg: ScenarioConfig) -> float:
    """Modal cross-validation penalty across the replications of a cell."""
    basis, _ = scenario_problem(cfg)
    D = None
    chosen = []
    for rep in range(cfg.mc_reps):
        x, y = generate(cfg.scenario, cfg.n, cfg.sigma, _mc_data_rng(cfg, rep), a=cfg.a)
        X = full_design(basis, x)
        if D is None:
            D = pspline_penalty(X.shape[1], 2)
        chosen.append(cross_validate_lambda(X, y, D, cfg.lambda_grid))
    values, counts = np.unique(np.asarray(chosen), return_counts=True)
    return float(values[np.argmax(counts)])


def _run_replication(cfg: ScenarioConfig, rep: int, lam: float | None):
    basis, S = scenario_problem(cfg)
    x, y = generate(cfg.scenario, cfg.n, cfg.sigma, _mc_data_rng(cfg, rep), a=cfg.a)
    penalty = None
    if cfg.spline_mode == "pspline":
        X = full_design(basis, x)
        penalty = (pspline_penalty(X.shape[1], 2), lam)
    out = transform(x, y, basis, S, penalty=penalty)
    stats = compute_statistics(out).as_array()
    B = 1 if cfg.warp else cfg.bootstrap_reps
    boot = bootstrap_statistics(out, B=B, seed=_boot_seed(cfg, rep))
    return stats, boot


def _replication_worker(args):
    cfg_dict, rep, lam = args
    cfg = ScenarioConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg_dict.items()})
    try:
        stats, boot = _run_replication(cfg, rep, lam)
        return rep, stats, boot, None
    except ShapeTestError as exc:  # pragma: no cover - rare numerical failures
        return rep, None, None, f"{type(exc).__name__}: {exc}"


@dataclass
class McResult:
    """Rejection-rate table plus the run manifest."""

    config: ScenarioConfig
    rates: dict[tuple[str, float], float]
    counts: dict[tuple[str, float], int]
    completed: int
    failures: list[str] = field(default_factory=list)
    penalty_lambda: float | None = None

    def rate(self, stat: str, level: float) -> float:
        return self.rates[(stat, float(level))]

    def table_rows(self):
        rows = []
        for (stat, level), rate in sorted(self.rates.items()):
            rows.append({
                "statistic": stat,
                "level": level,
                "rejection_rate": rate,
                "rejections": self.counts[(stat, level)],
                "mc_reps": self.completed,
            })
        return rows

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("statistic,level,rejection_rate,rejections,mc_reps\n")
            for row in self.table_rows():
                fh.write(
                    f"{row['statistic']},{row['level']:g},{row['rejection_rate']:.6f},"
                    f"{row['rejections']},{row['mc_reps']}\n"
                )

    def write_manifest(self, path):
        doc = {
            "config": self.config.to_json_dict(),
            "completed": self.completed,
            "failures": self.failures,
            "penalty_lambda": self.penalty_lambda,
            "cells": {
                f"{stat}@{level:g}": self.counts[(stat, level)]
                for (stat, level) in sorted(self.counts)
            },
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)


def _worker_count(cfg: ScenarioConfig) -> int:
    if cfg.n_jobs is not None:
        return max(1, cfg.n_jobs)
    env = os.environ.get("SHAPETEST_THREADS")
    return max(1, int(env)) if env else 1


def run_mc(cfg: ScenarioConfig) -> McResult:
    """Monte Carlo rejection rates of the pipeline on a scenario.

    Replications are independent given the seed; results do not depend on
    the execution schedule.  With ``warp=True`` a single bootstrap draw per
    replication is pooled across replications for the critical values.
    """
    lam = None
    if cfg.spline_mode == "pspline":
        lam = _modal_lambda(cfg)

    jobs = [(cfg.to_json_dict(), rep, lam) for rep in range(cfg.mc_reps)]
    workers = _worker_count(cfg)
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replication_worker, jobs))
    else:
        results = [_replication_worker(job) for job in jobs]
    results.sort(key=lambda item: item[0])

    failures = [f"rep {rep}: {err}" for rep, _, _, err in results if err is not None]
    kept = [(stats, boot) for _, stats, boot, err in results if err is None]
    if not kept:
        raise ShapeTestError("every Monte Carlo replication failed")
    stats = np.array([s for s, _ in kept])            # (R, 3)
    completed = stats.shape[0]

    rates, counts = {}, {}
    if cfg.warp:
        pooled = np.vstack([b for _, b in kept])      # (R, 3), one draw each
        for level in cfg.levels:
            if pooled.shape[0] < 1.0 / level:
                raise ShapeTestError(
                    f"warp mode needs at least {int(np.ceil(1 / level))} replications for level {level}"
                )
            for j, name in enumerate(STAT_NAMES):
                cv = empirical_upper_quantile(pooled[:, j], level)
                k = int(np.sum(stats[:, j] > cv))
                rates[(name, float(level))] = k / completed
                counts[(name, float(level))] = k
    else:
        for level in cfg.levels:
            for j, name in enumerate(STAT_NAMES):
                cvs = np.array([empirical_upper_quantile(b[:, j], level) for _, b in kept])
                k = int(np.sum(stats[:, j] > cvs))
                rates[(name, float(level))] = k / completed
                counts[(name, float(level))] = k
    return McResult(config=cfg, rates=rates, counts=counts, completed=completed,
                    failures=failures, penalty_lambda=lam)
