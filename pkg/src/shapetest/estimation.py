"""Least-squares spline fitting, with and without shape constraints.

The unconstrained estimator projects the response on the basis through the
Moore-Penrose inverse of the Gram matrix; the constrained estimator solves
the same least-squares problem restricted to a :class:`ConstraintSet`.
Also here: the second-difference penalty and its leave-one-out
cross-validation, and the scedastic-function fit used by the
heteroscedasticity-corrected pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsplines import KnotSystem, design_matrix
from .constraints import ConstraintSet
from .errors import InfeasibleConstraints, ShapeTestError
from .solvers import solve_qp, solve_sqp

BINDING_TOL = 1e-7


@dataclass
class BindingConstraint:
    """A constraint active at the fitted coefficients."""

    kind: str  # "ineq", "eq", "quad" or "pos"
    index: int
    label: str
    multiplier: float
    slack: float


@dataclass
class FitResult:
    """Outcome of a spline least-squares fit."""

    beta_hat: np.ndarray
    residuals: np.ndarray
    sse: float
    binding: list[BindingConstraint] = field(default_factory=list)
    penalty_lambda: float | None = None

    def __post_init__(self):
        self.beta_hat = np.asarray(self.beta_hat, dtype=float)
        self.residuals = np.asarray(self.residuals, dtype=float)

    def to_json_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "sse": self.sse,
            "penalty_lambda": self.penalty_lambda,
            "binding": [
                {"kind": b.kind, "index": b.index, "label": b.label,
                 "multiplier": b.multiplier, "slack": b.slack}
                for b in self.binding
            ],
        }


def _pinv(mat: np.ndarray) -> np.ndarray:
    n = max(mat.shape)
    return np.linalg.pinv(mat, rcond=n * np.finfo(float).eps)


def ols_fit(X: np.ndarray, y: np.ndarray) -> FitResult:
    """Unconstrained series estimator ``(X'X/n)^+ (X'y/n)``.

    Rank-deficient designs resolve to the minimum-norm coefficient vector.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError(f"design has {X.shape[0]} rows but y has {y.size} entries")
    n = X.shape[0]
    beta = _pinv(X.T @ X / n) @ (X.T @ y / n)
    resid = y - X @ beta
    return FitResult(beta_hat=beta, residuals=resid, sse=float(resid @ resid))


def penalized_fit(X: np.ndarray, y: np.ndarray, D: np.ndarray, lam: float) -> FitResult:
    """Unconstrained fit of ``SSE + lam * b'Db``; ``lam = 0`` recovers OLS."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    beta = _pinv(X.T @ X + lam * D) @ (X.T @ y)
    resid = y - X @ beta
    return FitResult(beta_hat=beta, residuals=resid, sse=float(resid @ resid), penalty_lambda=lam)


def _collect_binding(S: ConstraintSet, beta, lam_ineq, lam_eq, lam_quad, tol) -> list[BindingConstraint]:
    out = []
    if S.n_ineq:
        slack = S.a_ineq @ beta - S.c_ineq
        for i in np.flatnonzero(np.abs(slack) <= tol):
            mult = float(lam_ineq[i]) if lam_ineq is not None and i < lam_ineq.size else 0.0
            out.append(BindingConstraint("ineq", int(i), S.ineq_labels[i], mult, float(slack[i])))
    for j in range(S.n_eq):
        mult = float(lam_eq[j]) if lam_eq is not None and j < lam_eq.size else 0.0
        out.append(BindingConstraint("eq", j, S.eq_labels[j], mult, float(S.e_eq[j] @ beta - S.d_eq[j])))
    for k, qc in enumerate(S.quad):
        val = qc.value(beta)
        if abs(val) <= tol:
            mult = float(lam_quad[k]) if lam_quad is not None and k < lam_quad.size else 0.0
            out.append(BindingConstraint("quad", k, qc.label, mult, float(val)))
    if S.positivity:
        slack = beta - S.positivity_margin
        for i in np.flatnonzero(np.abs(slack) <= tol):
            out.append(BindingConstraint("pos", int(i), f"pos[{i}]", 0.0, float(slack[i])))
    return out


def constrained_fit(
    X: np.ndarray,
    y: np.ndarray,
    S: ConstraintSet,
    penalty: tuple[np.ndarray, float] | None = None,
    binding_tol: float = BINDING_TOL,
) -> FitResult:
    """Least squares subject to ``S`` (plus an optional difference penalty).

    Linear constraint sets are solved as a convex QP by the active-set
    method; sets with quadratic constraints go through SQP started from the
    unconstrained fit (or from the QP with the quadratics linearized there,
    when that fit is infeasible).  Binding constraints are reported with
    their multipliers using a slack tolerance of ``binding_tol``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[1] != S.dim:
        raise ValueError(f"design has {X.shape[1]} columns but constraints expect {S.dim}")
    n = X.shape[0]
    lam = None
    G = X.T @ X
    g = X.T @ y
    if penalty is not None:
        D, lam = penalty
        G = G + lam * np.asarray(D, dtype=float)

    unconstrained = penalized_fit(X, y, penalty[0], lam) if penalty is not None else ols_fit(X, y)
    if S.violation(unconstrained.beta_hat) <= 1e-10:
        beta = unconstrained.beta_hat
        binding = _collect_binding(S, beta, None, None, None, binding_tol)
        return FitResult(beta_hat=beta, residuals=unconstrained.residuals,
                         sse=unconstrained.sse, binding=binding, penalty_lambda=lam)

    if S.is_linear():
        A, c = S.a_ineq, S.c_ineq
        lam_pos = None
        if S.positivity:
            A = np.vstack([A, np.eye(S.dim)])
            c = np.concatenate([c, np.full(S.dim, S.positivity_margin)])
        res = solve_qp(G, g, A, c, S.e_eq, S.d_eq)
        beta, lam_ineq, lam_eq, lam_quad = res.x, res.lam_ineq[: S.n_ineq], res.lam_eq, None
    else:
        x0 = unconstrained.beta_hat
        try:
            sres = solve_sqp(G, g, S, x0)
        except InfeasibleConstraints:
            raise
        beta, lam_ineq, lam_eq, lam_quad = sres.x, sres.lam_ineq, sres.lam_eq, sres.lam_quad

    resid = y - X @ beta
    binding = _collect_binding(S, beta, lam_ineq, lam_eq, lam_quad, binding_tol)
    return FitResult(beta_hat=beta, residuals=resid, sse=float(resid @ resid),
                     binding=binding, penalty_lambda=lam)


def constrained_fit_family(
    X: np.ndarray,
    y: np.ndarray,
    family: list[ConstraintSet],
    penalty: tuple[np.ndarray, float] | None = None,
) -> tuple[int, FitResult]:
    """Best-SSE member of a family of constraint sets; ties go to the lowest index."""
    if not family:
        raise ValueError("empty constraint family")
    best = None
    infeasible = 0
    for idx, S in enumerate(family):
        try:
            fit = constrained_fit(X, y, S, penalty=penalty)
        except InfeasibleConstraints:
            infeasible += 1
            continue
        if best is None or fit.sse < best[1].sse - 1e-12:
            best = (idx, fit)
    if best is None:
        raise InfeasibleConstraints(f"all {infeasible} family members are infeasible")
    return best


def pspline_penalty(L: int, order: int = 2) -> np.ndarray:
    """Difference penalty ``D = Delta' Delta`` on adjacent coefficients."""
    if L <= order:
        raise ValueError(f"need more than {order} coefficients, got {L}")
    delta = np.diff(np.eye(L), n=order, axis=0)
    return delta.T @ delta


def cross_validate_lambda(X: np.ndarray, y: np.ndarray, D: np.ndarray, grid) -> float:
    """Ordinary leave-one-out cross-validation over a penalty grid.

    Minimizes ``sum ((y_i - yhat_i) / (1 - h_ii))^2`` computed from the
    penalized hat matrix; ties resolve to the smaller penalty.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    grid = sorted(float(v) for v in np.atleast_1d(grid))
    if not grid or grid[0] < 0:
        raise ValueError("penalty grid must be nonempty and nonnegative")
    best_lam, best_score = None, np.inf
    for lam in grid:
        H = X @ _pinv(X.T @ X + lam * D) @ X.T
        denom = 1.0 - np.diag(H)
        if np.any(np.abs(denom) < 1e-12):
            continue
        score = float(np.sum(((y - H @ y) / denom) ** 2))
        if np.isfinite(score) and score < best_score - 1e-12:
            best_lam, best_score = lam, score
    if best_lam is None:
        raise ShapeTestError("cross-validation criterion undefined on the whole grid")
    return best_lam


@dataclass
class ScedasticFit:
    """Fitted conditional standard deviation ``sigma(x)``, strictly positive."""

    basis: KnotSystem
    gamma: np.ndarray
    form: str = "log"

    def sigma2(self, xs) -> np.ndarray:
        vals = design_matrix(self.basis, xs) @ self.gamma
        if self.form == "log":
            return np.exp(vals)
        return np.maximum(vals * vals, 1e-12)

    def sigma(self, xs) -> np.ndarray:
        return np.sqrt(self.sigma2(xs))


def scedastic_fit(xs, residuals, ks1: KnotSystem, form: str = "log") -> ScedasticFit:
    """Estimate the scedastic function from (unconstrained) residuals.

    The default form regresses the log of the squared residuals on the basis
    and exponentiates, which is positive by construction; ``form="sq"`` fits
    the absolute residuals and squares the fitted combination.
    """
    xs = np.asarray(xs, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    if np.all(residuals == 0.0):
        raise ValueError("cannot estimate a scedastic function from all-zero residuals")
    B = design_matrix(ks1, xs)
    if form == "log":
        target = np.log(np.maximum(residuals**2, 1e-12))
    elif form == "sq":
        target = np.abs(residuals)
    else:
        raise ValueError(f"unknown scedastic form {form!r}")
    gamma = ols_fit(B, target).beta_hat
    return ScedasticFit(basis=ks1, gamma=gamma, form=form)
