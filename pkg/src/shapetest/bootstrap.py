"""Residual bootstrap for critical values of the transformed-path statistics.

Three steps: residuals come from the unconstrained fit, data are regenerated
from the constrained (null-imposing) fit plus resampled demeaned residuals
on the same regressor values, and each replication is pushed through the
frozen transformation machinery of the observed data (effective basis and
binding set included).  Feeding the regenerated responses directly into the
recursion gives the same path as first re-projecting them, so the default
route skips the projection; both routes are implemented and checked against
each other in the tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstraintSet
from .errors import ShapeTestError
from .khmaladze import TransformOutput, transform
from .teststats import TestStatistics, batch_statistics, compute_statistics

DEFAULT_LEVELS = (0.10, 0.05, 0.01)
STAT_NAMES = ("ks", "cvm", "ad")


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    """Counter-based stream for one replication; independent of schedule."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, rep))))


def empirical_upper_quantile(values: np.ndarray, level: float) -> float:
    """Order statistic at ceil((1 - level)(B + 1)), clamped to the sample max."""
    values = np.sort(np.asarray(values, dtype=float))
    B = values.size
    k = int(np.ceil((1.0 - level) * (B + 1)))
    return float(values[min(max(k, 1), B) - 1])


@dataclass
class BootstrapReport:
    stats: np.ndarray                       # (B, 3) KS/CvM/AD replications
    critical_values: dict[float, np.ndarray]  # level -> 3 critical values
    B: int
    seed: int
    levels: tuple[float, ...] = DEFAULT_LEVELS

    def critical_value(self, level: float, stat: str) -> float:
        return float(self.critical_values[level][STAT_NAMES.index(stat)])

    def to_json_dict(self) -> dict:
        return {
            "B": self.B,
            "seed": self.seed,
            "levels": list(self.levels),
            "critical_values": {
                str(level): dict(zip(STAT_NAMES, cv.tolist()))
                for level, cv in self.critical_values.items()
            },
            "stats": self.stats.tolist(),
        }


def _bootstrap_artifacts(out: TransformOutput):
    """Frozen per-dataset pieces shared by all replications."""
    ctx = out.context
    perm = ctx.os.perm
    n = perm.size
    fitted_sorted = ctx.os.P_sorted @ ctx.fit_constrained.beta_hat
    P_eff = ctx.os.P_sorted @ ctx.eff.M
    gram_inv = np.linalg.pinv(P_eff.T @ P_eff, hermitian=True)
    resid_u = ctx.fit_unconstrained.residuals
    # Residual pool: normalized first under heteroscedasticity, then demeaned.
    if ctx.scedastic is not None:
        sigma_x = np.empty(n)
        sigma_x[perm] = ctx.sigma_x_sorted
        pool = resid_u / sigma_x
    else:
        pool = resid_u.copy()
    pool = pool - pool.mean()
    return fitted_sorted, pool, P_eff, gram_inv, ctx


def bootstrap_statistics(
    out: TransformOutput,
    B: int,
    seed: int = 0,
    route: str = "ystar",
    chunk: int = 64,
) -> np.ndarray:
    """(B, 3) bootstrap statistics reusing the frozen transformation."""
    if B < 1:
        raise ValueError("need at least one bootstrap replication")
    if route not in ("ystar", "uhat"):
        raise ValueError(f"unknown bootstrap route {route!r}")
    fitted_sorted, pool, P_eff, gram_inv, ctx = _bootstrap_artifacts(out)
    n = fitted_sorted.size
    mach = ctx.mach
    hetero = ctx.scedastic is not None
    sig_sorted = ctx.sigma_x_sorted
    stats = np.empty((B, 3))
    for start in range(0, B, chunk):
        reps = range(start, min(start + chunk, B))
        draws = np.column_stack(
            [pool[replication_rng(seed, b).integers(0, n, n)] for b in reps]
        )
        if hetero:
            Y = fitted_sorted[:, None] + sig_sorted[:, None] * draws
        else:
            Y = fitted_sorted[:, None] + draws
        U_hat = Y - P_eff @ (gram_inv @ (P_eff.T @ Y))
        if hetero:
            inputs = U_hat / sig_sorted[:, None]
        else:
            inputs = Y if route == "ystar" else U_hat
        V = mach.apply_batch(inputs)
        paths = np.cumsum(V, axis=0) / np.sqrt(n)
        if hetero:
            sig_hats = np.sqrt(np.mean((U_hat / sig_sorted[:, None]) ** 2, axis=0))
        else:
            sig_hats = np.sqrt(np.mean(U_hat**2, axis=0))
        stats[start : start + len(list(reps))] = batch_statistics(
            paths, sig_hats, n, out.n_tilde
        )
    return stats


def bootstrap_critical_values(
    xs,
    ys,
    basis,
    S: ConstraintSet,
    B: int,
    levels=DEFAULT_LEVELS,
    seed: int = 0,
    route: str = "ystar",
    context: TransformOutput | None = None,
    **transform_kwargs,
) -> BootstrapReport:
    """Critical values at the requested levels from ``B`` replications.

    ``context`` may carry an already-computed transformation of the data;
    otherwise one is run with ``transform_kwargs`` passed through.
    """
    levels = tuple(float(l) for l in levels)
    if any(not 0.0 < l < 1.0 for l in levels):
        raise ValueError("levels must lie strictly between 0 and 1")
    for level in levels:
        if B < 1.0 / level - 1.0:
            warnings.warn(
                f"B={B} is too small to resolve level {level}; "
                f"need at least {int(np.ceil(1.0 / level - 1.0))}",
                stacklevel=2,
            )
    out = context if context is not None else transform(xs, ys, basis, S, **transform_kwargs)
    stats = bootstrap_statistics(out, B=B, seed=seed, route=route)
    cvs = {
        level: np.array([empirical_upper_quantile(stats[:, j], level) for j in range(3)])
        for level in levels
    }
    return BootstrapReport(stats=stats, critical_values=cvs, B=B, seed=seed, levels=levels)


@dataclass
class ShapeTestResult:
    """Observed statistics, bootstrap critical values and decisions."""

    statistics: TestStatistics
    report: BootstrapReport
    rejections: dict[float, dict[str, bool]] = field(default_factory=dict)
    sigma_hat: float = 0.0
    binding_labels: list[str] = field(default_factory=list)
    direction: str = "right"

    def to_json_dict(self) -> dict:
        return {
            "statistics": self.statistics.to_json_dict(),
            "sigma_hat": self.sigma_hat,
            "binding": self.binding_labels,
            "direction": self.direction,
            "bootstrap": self.report.to_json_dict(),
            "reject": {
                str(level): dict(flags) for level, flags in self.rejections.items()
            },
        }


def run_shape_test(
    xs,
    ys,
    basis,
    S: ConstraintSet,
    B: int,
    levels=DEFAULT_LEVELS,
    seed: int = 0,
    **transform_kwargs,
) -> ShapeTestResult:
    """Transform the data, bootstrap the critical values, decide each test."""
    out = transform(xs, ys, basis, S, **transform_kwargs)
    stats = compute_statistics(out)
    report = bootstrap_critical_values(
        xs, ys, basis, S, B=B, levels=levels, seed=seed, context=out
    )
    observed = stats.as_array()
    rejections = {
        level: {
            name: bool(observed[j] > report.critical_values[level][j])
            for j, name in enumerate(STAT_NAMES)
        }
        for level in report.levels
    }
    return ShapeTestResult(
        statistics=stats,
        report=report,
        rejections=rejections,
        sigma_hat=out.sigma_hat,
        binding_labels=[b.label for b in out.context.fit_constrained.binding],
        direction=out.context.direction,
    )
