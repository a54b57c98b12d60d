"""Dense constrained least-squares solvers.

A primal active-set method handles quadratic programs with linear
inequalities and equalities on the normal-equations form, which keeps the
solutions exact at the small coefficient dimensions used here and yields the
Lagrange multipliers needed for binding-set detection.  Quadratic
(non-linear) constraints are handled by sequential quadratic programming:
the objective is already quadratic, so each step solves the QP with the
quadratic constraints linearized at the current iterate, globalized by a
penalty merit function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .constraints import ConstraintSet
from .errors import ConvergenceFailure, InfeasibleConstraints

_FEAS_TOL = 1e-9


@dataclass
class QPResult:
    x: np.ndarray
    lam_ineq: np.ndarray
    lam_eq: np.ndarray
    iterations: int
    active: list[int] = field(default_factory=list)


def _phase_one(A: np.ndarray, c: np.ndarray, E: np.ndarray, d: np.ndarray, dim: int) -> np.ndarray:
    """Feasible point for ``A x >= c, E x = d`` via an auxiliary LP."""
    m = A.shape[0]
    cost = np.zeros(dim + 1)
    cost[-1] = 1.0
    A_ub = b_ub = None
    if m:
        A_ub = np.hstack([-A, -np.ones((m, 1))])
        b_ub = -c
    A_eq = b_eq = None
    if E.shape[0]:
        A_eq = np.hstack([E, np.zeros((E.shape[0], 1))])
        b_eq = d
    bounds = [(None, None)] * dim + [(0, None)]
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if not res.success or res.x[-1] > 1e-7:
        raise InfeasibleConstraints("no feasible point for the linear constraint system")
    return res.x[:dim]


def solve_qp(
    G: np.ndarray,
    g: np.ndarray,
    A: np.ndarray,
    c: np.ndarray,
    E: np.ndarray | None = None,
    d: np.ndarray | None = None,
    x0: np.ndarray | None = None,
    max_iter: int | None = None,
) -> QPResult:
    """Minimize ``0.5 x'Gx - g'x`` subject to ``A x >= c`` and ``E x = d``.

    ``G`` must be symmetric positive semidefinite (a least-squares Gram
    matrix, possibly singular).  Returns the minimizer together with the
    KKT multipliers (nonnegative for the inequalities).
    """
    dim = G.shape[0]
    A = np.asarray(A, dtype=float).reshape(-1, dim)
    c = np.asarray(c, dtype=float).ravel()
    E = np.zeros((0, dim)) if E is None else np.asarray(E, dtype=float).reshape(-1, dim)
    d = np.zeros(0) if d is None else np.asarray(d, dtype=float).ravel()
    m, e = A.shape[0], E.shape[0]
    if max_iter is None:
        max_iter = 50 + 20 * (dim + m)

    if x0 is not None and _is_feasible(A, c, E, d, x0):
        x = np.asarray(x0, dtype=float).copy()
    elif m == 0 and e == 0:
        x = np.zeros(dim)
    elif e == 0 and np.all(c <= _FEAS_TOL):
        x = np.zeros(dim)
    else:
        x = _phase_one(A, c, E, d, dim)

    working: list[int] = []
    for it in range(max_iter):
        A_w = np.vstack([E, A[working]]) if (e or working) else np.zeros((0, dim))
        nw = A_w.shape[0]
        kkt = np.zeros((dim + nw, dim + nw))
        kkt[:dim, :dim] = G
        kkt[:dim, dim:] = A_w.T
        kkt[dim:, :dim] = A_w
        rhs = np.concatenate([g - G @ x, np.zeros(nw)])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        p = sol[:dim]

        if np.max(np.abs(p), initial=0.0) <= 1e-11 * (1.0 + np.max(np.abs(x))):
            # Stationary on the working set; check multiplier signs.
            grad = G @ x - g
            if nw:
                lam_all = np.linalg.lstsq(A_w.T, grad, rcond=None)[0]
            else:
                lam_all = np.zeros(0)
            lam_ineq_w = lam_all[e:]
            if lam_ineq_w.size == 0 or lam_ineq_w.min() >= -1e-10:
                lam_ineq = np.zeros(m)
                for idx, w in enumerate(working):
                    lam_ineq[w] = max(lam_ineq_w[idx], 0.0)
                return QPResult(x=x, lam_ineq=lam_ineq, lam_eq=lam_all[:e],
                                iterations=it, active=sorted(working))
            working.pop(int(np.argmin(lam_ineq_w)))
            continue

        # Ratio test against constraints not in the working set.
        alpha, blocking = 1.0, -1
        if m:
            mask = np.ones(m, dtype=bool)
            mask[working] = False
            Ap = A[mask] @ p
            resid = A[mask] @ x - c[mask]
            idx_map = np.flatnonzero(mask)
            descending = Ap < -1e-13
            if descending.any():
                ratios = np.where(descending, -resid / np.where(descending, Ap, -1.0), np.inf)
                ratios = np.maximum(ratios, 0.0)
                j = int(np.argmin(ratios))
                if ratios[j] < alpha:
                    alpha, blocking = float(ratios[j]), int(idx_map[j])
        x = x + alpha * p
        if blocking >= 0:
            working.append(blocking)
    raise ConvergenceFailure(f"active-set QP did not converge in {max_iter} iterations")


def _is_feasible(A, c, E, d, x, tol=_FEAS_TOL) -> bool:
    if A.shape[0] and np.min(A @ x - c) < -tol:
        return False
    if E.shape[0] and np.max(np.abs(E @ x - d)) > tol:
        return False
    return True


def _linear_parts(S: ConstraintSet):
    """Materialize the linear rows of ``S``, positivity bounds included."""
    A, c = S.a_ineq, S.c_ineq
    if S.positivity:
        A = np.vstack([A, np.eye(S.dim)])
        c = np.concatenate([c, np.full(S.dim, S.positivity_margin)])
    return A, c, S.e_eq, S.d_eq


@dataclass
class SQPResult:
    x: np.ndarray
    lam_ineq: np.ndarray
    lam_eq: np.ndarray
    lam_quad: np.ndarray
    iterations: int
    converged: bool


def solve_sqp(
    G: np.ndarray,
    g: np.ndarray,
    S: ConstraintSet,
    x0: np.ndarray,
    max_iter: int = 200,
    feas_tol: float = 1e-8,
) -> SQPResult:
    """Minimize ``0.5 x'Gx - g'x`` subject to a constraint set with quadratics.

    Starting from ``x0``, each iteration solves the QP with the quadratic
    constraints linearized at the current point and backtracks on the merit
    function (objective plus a penalty on constraint violations).  The
    returned point is a KKT point of the original problem when ``converged``
    is set; otherwise :class:`ConvergenceFailure` is raised by the caller
    contract.
    """
    A_lin, c_lin, E, d = _linear_parts(S)
    nq = len(S.quad)
    x = np.asarray(x0, dtype=float).copy()
    rho = 10.0

    def objective(v):
        return 0.5 * v @ G @ v - g @ v

    def violation(v):
        viol = 0.0
        if A_lin.shape[0]:
            viol += float(np.sum(np.maximum(c_lin - A_lin @ v, 0.0)))
        if E.shape[0]:
            viol += float(np.sum(np.abs(E @ v - d)))
        viol += sum(max(qc.value(v), 0.0) for qc in S.quad)
        return viol

    lam_q = np.zeros(nq)
    res = None
    for it in range(max_iter):
        vals = np.array([qc.value(x) for qc in S.quad])
        grads = np.array([qc.gradient(x) for qc in S.quad]).reshape(nq, S.dim)
        # Linearized rows: val + grad'(v - x) <= 0  <=>  (-grad)'v >= val - grad'x
        A_q = -grads
        c_q = vals - grads @ x
        A_all = np.vstack([A_lin, A_q])
        c_all = np.concatenate([c_lin, c_q])
        try:
            res = solve_qp(G, g, A_all, c_all, E, d, x0=x)
        except InfeasibleConstraints:
            # Elastic relaxation of the linearized rows only.
            shift = _phase_one(A_all, c_all, E, d, S.dim)
            slack = float(np.max(c_q - A_q @ shift, initial=0.0))
            res = solve_qp(G, g, A_all, np.concatenate([c_lin, c_q - slack - 1e-12]), E, d, x0=shift)
        lam_q = res.lam_ineq[A_lin.shape[0] :]
        rho = max(rho, 10.0 * (1.0 + float(np.max(np.abs(lam_q), initial=0.0))))

        step = res.x - x
        if np.max(np.abs(step), initial=0.0) <= 1e-11 * (1.0 + np.max(np.abs(x))):
            break
        merit0 = objective(x) + rho * violation(x)
        alpha = 1.0
        for _ in range(30):
            trial = x + alpha * step
            if objective(trial) + rho * violation(trial) < merit0 - 1e-14:
                break
            alpha *= 0.5
        x = x + alpha * step
    else:
        if violation(x) > feas_tol:
            raise ConvergenceFailure(f"SQP did not converge in {max_iter} iterations")

    if violation(x) > feas_tol:
        raise ConvergenceFailure("SQP terminated at an infeasible point")
    lam_ineq = res.lam_ineq[: S.a_ineq.shape[0]] if res is not None else np.zeros(S.a_ineq.shape[0])
    lam_eq = res.lam_eq if res is not None else np.zeros(E.shape[0])
    return SQPResult(x=x, lam_ineq=lam_ineq, lam_eq=lam_eq, lam_quad=lam_q,
                     iterations=it + 1, converged=True)
