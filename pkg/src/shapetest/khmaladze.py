"""Martingale transformation of the partial-sums residual process.

The transformation replaces each residual by its prediction error against
the sample to its right: with observations ordered by the regressor,

    ``v_i = u_i - P_i' A(i)^+ C(i)``,

where ``A(i)`` and ``C(i)`` are tail averages of ``P_k P_k'`` and
``P_k u_k`` over ``x_k >= x_i`` (weakly inclusive, which keeps ``P_i`` in
the range of ``A(i)``).  The cumulative sums of the ``v_i`` then behave like
a Brownian motion under the null hypothesis, regardless of the estimated
coefficients, because any component lying in the span of the regressor
columns is annihilated exactly.

Constraints that bind at the constrained fit must be folded into the
regressor columns first: binding equal-coefficient rows merge basis columns,
general linear rows eliminate coordinates through a null-space basis, and
binding smooth (quadratic) constraints eliminate one coordinate each through
the implicit function theorem.  Skipping this step costs the test its power
against alternatives pressed onto the boundary.

The tail pseudo-inverses are maintained right-to-left by a rank-one update;
each step is certified against the identity ``P' A^+ A = P'`` and falls
back to a direct SVD pseudo-inverse when the update is not exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsplines import KnotSystem, design_matrix, partition_design
from .constraints import ConstraintSet
from .errors import ShapeTestError
from .estimation import (
    BINDING_TOL,
    FitResult,
    ScedasticFit,
    constrained_fit,
    ols_fit,
    penalized_fit,
)

BasisSpec = "KnotSystem | list[KnotSystem]"


def _as_systems(basis) -> list[KnotSystem]:
    return [basis] if isinstance(basis, KnotSystem) else list(basis)


def full_design(basis, xs) -> np.ndarray:
    """Design matrix for a single or partitioned basis."""
    systems = _as_systems(basis)
    if len(systems) == 1:
        return design_matrix(systems[0], xs)
    return partition_design(systems, xs)


def combined_knots(basis) -> np.ndarray:
    """Sorted distinct breakpoints of all component systems."""
    systems = _as_systems(basis)
    return np.unique(np.concatenate([ks.unique_knots for ks in systems]))


def total_dim(basis) -> int:
    return sum(ks.L for ks in _as_systems(basis))


@dataclass
class OrderedSample:
    """Sample sorted by the regressor, with trimmed evaluation points."""

    perm: np.ndarray
    x_sorted: np.ndarray
    y_sorted: np.ndarray
    P_sorted: np.ndarray
    x_tilde: np.ndarray
    thresholds: np.ndarray  # first sorted index k with x_sorted[k] >= x_tilde[i]


def order_and_trim(xs, ys, basis, varsigma: float | None = None) -> OrderedSample:
    """Sort by the regressor (ties by original index) and apply trimming.

    With ``varsigma`` set, an observation within ``n^-varsigma`` of the next
    knot at or above it is evaluated at that knot instead of at itself;
    without it the evaluation points are the order statistics themselves.
    """
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if varsigma is not None and not 0.5 < varsigma < 1.0:
        raise ValueError(f"varsigma must lie in (1/2, 1), got {varsigma}")
    perm = np.argsort(xs, kind="stable")
    x_sorted = xs[perm]
    P_sorted = full_design(basis, x_sorted)
    n = xs.size
    if varsigma is None:
        x_tilde = x_sorted.copy()
    else:
        knots = combined_knots(basis)
        nxt = np.searchsorted(knots, x_sorted, side="left")
        nxt = np.minimum(nxt, knots.size - 1)
        next_knot = knots[nxt]
        x_tilde = np.where(x_sorted + n ** (-varsigma) >= next_knot, next_knot, x_sorted)
    thresholds = np.searchsorted(x_sorted, x_tilde, side="left")
    return OrderedSample(perm=perm, x_sorted=x_sorted, y_sorted=ys[perm],
                         P_sorted=P_sorted, x_tilde=x_tilde, thresholds=thresholds)


@dataclass
class EffectiveBasis:
    """Column map folding binding constraints into the regressors.

    Effective rows are ``P_eff(x) = M' P(x)``; in plain mode ``M`` is the
    identity.
    """

    mode: str  # "plain", "linear-merged" or "nonlinear-reparameterized"
    M: np.ndarray
    dim: int


def plain_basis(L: int) -> EffectiveBasis:
    return EffectiveBasis(mode="plain", M=np.eye(L), dim=L)


def _binding_linear_rows(S: ConstraintSet, fit: FitResult) -> list[np.ndarray]:
    rows = []
    for b in fit.binding:
        if b.kind == "ineq":
            rows.append(S.a_ineq[b.index])
        elif b.kind == "eq":
            rows.append(S.e_eq[b.index])
        elif b.kind == "pos":
            row = np.zeros(S.dim)
            row[b.index] = 1.0
            rows.append(row)
    return rows


def merge_binding_linear(S: ConstraintSet, fit: FitResult) -> EffectiveBasis:
    """Fold binding linear constraints into merged/eliminated columns.

    Rows of the form ``b_i = b_j`` (two entries of equal magnitude and
    opposite sign) merge the two columns into their sum, transitively across
    rows.  Remaining binding rows eliminate one direction each through a
    null-space basis of the binding system expressed in the merged
    coordinates.
    """
    if any(b.kind == "quad" for b in fit.binding):
        raise ValueError("binding quadratic constraints require the nonlinear path")
    rows = _binding_linear_rows(S, fit)
    L = S.dim
    if not rows:
        return plain_basis(L)

    parent = list(range(L))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    general = []
    for row in rows:
        nz = np.flatnonzero(row)
        if nz.size == 2 and abs(row[nz[0]] + row[nz[1]]) <= 1e-12 * max(abs(row[nz[0]]), 1.0):
            ra, rb = find(nz[0]), find(nz[1])
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        else:
            general.append(row)

    groups: dict[int, list[int]] = {}
    for l in range(L):
        groups.setdefault(find(l), []).append(l)
    M1 = np.zeros((L, len(groups)))
    for gcol, members in enumerate(groups[k] for k in sorted(groups)):
        M1[members, gcol] = 1.0

    M = M1
    if general:
        B = np.array(general) @ M1
        # Null-space basis of the remaining binding rows in merged coordinates.
        u, s, vt = np.linalg.svd(B)
        rank = int(np.sum(s > max(B.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)))
        N = vt[rank:].T
        if N.shape[1] == 0:
            raise ShapeTestError("binding constraints leave no free direction")
        M = M1 @ N
    return EffectiveBasis(mode="linear-merged", M=M, dim=M.shape[1])


def reparameterize_nonlinear(
    gradients: np.ndarray,
    L: int,
    pivots: list[int] | None = None,
) -> EffectiveBasis:
    """Eliminate one coordinate per binding smooth constraint.

    ``gradients`` holds one constraint gradient per row, evaluated at the
    constrained fit.  Each constraint expresses its pivot coordinate as an
    implicit function of the others; the effective columns are
    ``p_l + (dh/db_l) p_pivot`` with ``dh/db_l = -g_l / g_pivot``.  Pivots
    default to the largest-magnitude gradient entries (best conditioned).
    """
    G = np.atleast_2d(np.asarray(gradients, dtype=float))
    m = G.shape[0]
    if G.shape[1] != L:
        raise ValueError("gradient length does not match coefficient dimension")
    if pivots is None:
        pivots = []
        for row in G:
            order = np.argsort(-np.abs(row))
            pick = next((int(j) for j in order if j not in pivots and abs(row[j]) > 1e-12), None)
            if pick is None:
                raise ShapeTestError("zero pivot at every coordinate of a binding constraint")
            pivots.append(pick)
    else:
        pivots = [int(p) for p in pivots]
        for row, p in zip(G, pivots):
            if abs(row[p]) <= 1e-12:
                raise ShapeTestError(f"requested pivot {p} has zero gradient")
    others = [l for l in range(L) if l not in pivots]
    Gp = G[:, pivots]
    H = -np.linalg.solve(Gp, G[:, others])  # m x (L - m), rows follow `pivots`
    M = np.zeros((L, L - m))
    M[others, :] = np.eye(L - m)
    M[pivots, :] = H
    return EffectiveBasis(mode="nonlinear-reparameterized", M=M, dim=L - m)


def effective_basis_from_fit(S: ConstraintSet, fit: FitResult) -> EffectiveBasis:
    """Choose the merge or reparameterization path from the binding set."""
    if not fit.binding:
        return plain_basis(S.dim)
    quad_binding = [b for b in fit.binding if b.kind == "quad"]
    if not quad_binding:
        return merge_binding_linear(S, fit)
    grads = [S.quad[b.index].gradient(fit.beta_hat) for b in quad_binding]
    grads += _binding_linear_rows(S, fit)
    eff = reparameterize_nonlinear(np.array(grads), S.dim)
    return eff


def pinv_downdate(A_plus: np.ndarray, p: np.ndarray, n: int) -> np.ndarray:
    """Pseudo-inverse of ``A + p p'/n`` from the pseudo-inverse of ``A``.

    Exact when ``p`` lies in the range of ``A`` (the caller certifies the
    result and recomputes directly otherwise).
    """
    Ap = A_plus @ p
    denom = n + p @ Ap
    return A_plus - np.outer(Ap, Ap) / denom


def _solve_rt(R: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Minimum-norm forward substitution for ``R' w = p`` (R upper triangular).

    Columns never touched by an inserted row keep an exactly zero diagonal;
    their weight is zero (``p`` has no component there either).
    """
    d = R.shape[0]
    w = np.zeros(d)
    for j in range(d):
        if R[j, j] == 0.0:
            continue
        w[j] = (p[j] - R[:j, j] @ w[:j]) / R[j, j]
    return w


@dataclass
class TransformMachinery:
    """Frozen tail-regression recursion, reusable across bootstrap replications.

    The backward sweep inserts the ordered design rows into a QR
    factorization by Givens rotations; the stored rotation sequence and the
    prediction-weight rows ``w_i`` (norm bounded by the leverage, hence by
    one) reproduce ``v_i = u_i - P_i' A(t_i)^+ C(t_i)`` for any input vector
    without forming the ill-conditioned tail pseudo-inverses.
    """

    P: np.ndarray            # (n, d) effective design rows, x-ordered
    w_rows: np.ndarray       # (n, d) prediction weights per observation
    rot_col: np.ndarray      # rotation column indices, flat
    rot_c: np.ndarray
    rot_s: np.ndarray
    rot_start: np.ndarray    # rotations of step k live in [rot_start[k], rot_end[k])
    rot_end: np.ndarray
    buckets: list            # buckets[t] lists observations evaluated at state t
    thresholds: np.ndarray
    n: int
    max_weight_norm: float

    def _replay(self, U: np.ndarray) -> np.ndarray:
        n, d = self.P.shape
        nb = U.shape[1]
        V = np.empty_like(U)
        z = np.zeros((d, nb))
        for i in self.buckets[n]:
            V[i] = U[i]
        for k in range(n - 1, -1, -1):
            r = U[k].copy()
            for m in range(self.rot_start[k], self.rot_end[k]):
                j, c, s = self.rot_col[m], self.rot_c[m], self.rot_s[m]
                zj = z[j]
                r_new = -s * zj + c * r
                z[j] = c * zj + s * r
                r = r_new
            for i in self.buckets[k]:
                V[i] = U[i] - self.w_rows[i] @ z
        return V

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Recursive residuals of a single x-ordered input vector."""
        u = np.asarray(u, dtype=float).ravel()
        if u.size != self.n:
            raise ValueError(f"expected {self.n} values, got {u.size}")
        return self._replay(u[:, None]).ravel()

    def apply_batch(self, U: np.ndarray) -> np.ndarray:
        """Recursive residuals of a batch, one column per replication."""
        return self._replay(np.asarray(U, dtype=float))


def build_machinery(P_sorted: np.ndarray, thresholds: np.ndarray) -> TransformMachinery:
    """Backward sweep preparing the recursion for repeated application."""
    P = np.asarray(P_sorted, dtype=float)
    n, d = P.shape
    thresholds = np.asarray(thresholds, dtype=int)
    buckets = [[] for _ in range(n + 1)]
    for i, t in enumerate(thresholds):
        buckets[t].append(i)
    R = np.zeros((d, d))
    rot_col, rot_c, rot_s = [], [], []
    rot_start = np.zeros(n, dtype=int)
    rot_end = np.zeros(n, dtype=int)
    w_rows = np.zeros((n, d))
    max_w = 0.0
    for k in range(n - 1, -1, -1):
        row = P[k].copy()
        rot_start[k] = len(rot_col)
        for j in range(d):
            rj = row[j]
            if rj == 0.0:
                continue
            h = np.hypot(R[j, j], rj)
            c, s = R[j, j] / h, rj / h
            Rj = R[j, j:].copy()
            R[j, j:] = c * Rj + s * row[j:]
            row[j:] = -s * Rj + c * row[j:]
            row[j] = 0.0
            rot_col.append(j)
            rot_c.append(c)
            rot_s.append(s)
        rot_end[k] = len(rot_col)
        for i in buckets[k]:
            w = _solve_rt(R, P[i])
            w_rows[i] = w
            max_w = max(max_w, float(np.linalg.norm(w)))
    return TransformMachinery(
        P=P,
        w_rows=w_rows,
        rot_col=np.asarray(rot_col, dtype=int),
        rot_c=np.asarray(rot_c, dtype=float),
        rot_s=np.asarray(rot_s, dtype=float),
        rot_start=rot_start,
        rot_end=rot_end,
        buckets=buckets,
        thresholds=thresholds,
        n=n,
        max_weight_norm=max_w,
    )


def pinv_chain(P_sorted: np.ndarray) -> tuple[np.ndarray, int, float]:
    """Tail pseudo-inverses ``A(k)^+`` maintained by the rank-one update.

    Returns the ``(n+1, d, d)`` chain (index ``n`` is the empty tail), the
    number of direct-recomputation fallbacks, and the worst defect of the
    identity ``P_k' A^+ A = P_k'`` across the sweep.  The rank-one formula
    is applied whenever ``P_k`` lies in the range of the previous tail
    matrix (its validity condition); otherwise the pseudo-inverse is
    recomputed from an SVD of the tail design block, whose halved condition
    exponent keeps the identity accurate.
    """
    P = np.asarray(P_sorted, dtype=float)
    n, d = P.shape
    chain = np.zeros((n + 1, d, d))
    A = np.zeros((d, d))
    A_plus = np.zeros((d, d))
    fallbacks = 0
    worst = 0.0
    for k in range(n - 1, -1, -1):
        p = P[k]
        scale = max(1.0, float(np.abs(p).max()))
        in_range = (
            k < n - 1
            and np.max(np.abs(A @ (A_plus @ p) - p)) <= 1e-12 * scale
        )
        A = A + np.outer(p, p) / n
        if in_range:
            A_plus = pinv_downdate(A_plus, p, n)
            if np.max(np.abs(A @ (A_plus @ p) - p)) > 1e-12 * scale:
                A_plus = _tail_design_pinv(P[k:], n)
                fallbacks += 1
        else:
            A_plus = _tail_design_pinv(P[k:], n)
            fallbacks += 1
        worst = max(worst, float(np.max(np.abs(A @ (A_plus @ p) - p))))
        chain[k] = A_plus
    return chain, fallbacks, worst


def _tail_design_pinv(slab: np.ndarray, n: int) -> np.ndarray:
    """Pseudo-inverse of ``slab'slab / n`` via an SVD of the slab itself.

    Working on the design block instead of its Gram matrix halves the
    condition exponent.  The cutoff sits on the Gram scale: directions with
    eigenvalue below ``max(n, d) * eps`` relative to the largest are null.
    """
    _, s, vt = np.linalg.svd(slab, full_matrices=False)
    cutoff = np.sqrt(max(slab.shape) * np.finfo(float).eps) * (s[0] if s.size else 0.0)
    keep = s > cutoff
    inv = np.zeros_like(s)
    inv[keep] = n / (s[keep] * s[keep])
    return (vt.T * inv) @ vt


def recursive_residuals_via_pinv_chain(
    P_sorted: np.ndarray, thresholds: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """Cross-check path: ``v_i = u_i - P_i' A(t_i)^+ C(t_i)`` from the chain.

    Mathematically identical to :meth:`TransformMachinery.apply`; kept as an
    independently computed reference for the rank-one update machinery.
    """
    P = np.asarray(P_sorted, dtype=float)
    u = np.asarray(u, dtype=float).ravel()
    n, d = P.shape
    chain, _, _ = pinv_chain(P)
    prods = P * u[:, None]
    C = np.vstack([np.cumsum(prods[::-1], axis=0)[::-1], np.zeros((1, d))]) / n
    W = np.einsum("ilm,im->il", chain[thresholds], P)
    return u - np.einsum("il,il->i", W, C[thresholds])


def recursive_residuals(os: OrderedSample, eff: EffectiveBasis, u: np.ndarray) -> np.ndarray:
    """Transform an x-ordered vector against the effective basis."""
    mach = build_machinery(os.P_sorted @ eff.M, os.thresholds)
    return mach.apply(u)


@dataclass
class TransformContext:
    """Everything the bootstrap needs, frozen from the observed-data run."""

    basis: object
    S: ConstraintSet
    penalty: tuple[np.ndarray, float] | None
    fit_constrained: FitResult
    fit_unconstrained: FitResult
    eff: EffectiveBasis
    os: OrderedSample
    mach: TransformMachinery
    scedastic: ScedasticFit | None
    direction: str
    sigma_x_sorted: np.ndarray | None  # sigma(x) at the ordered regressors


@dataclass
class TransformOutput:
    """Transformed residuals, their partial-sum path and the scale estimate."""

    v: np.ndarray
    path: np.ndarray
    sigma_hat: float
    n_tilde: int
    context: TransformContext = field(repr=False, default=None)

    def to_json_dict(self) -> dict:
        return {
            "v": self.v.tolist(),
            "path": self.path.tolist(),
            "sigma_hat": self.sigma_hat,
            "n_tilde": self.n_tilde,
        }


def transform(
    xs,
    ys,
    basis,
    S: ConstraintSet,
    penalty: tuple[np.ndarray, float] | None = None,
    varsigma: float | None = None,
    direction: str = "right",
    merge_binding: bool = True,
    binding_tol: float = BINDING_TOL,
    scedastic: ScedasticFit | None = None,
) -> TransformOutput:
    """Full pipeline: constrained fit, binding merge, transformation, path.

    ``direction="right"`` projects each residual on the sample to its right
    (the canonical form); ``"left"`` reflects the regressor and runs the
    same recursion, transforming from the other end of the support.  With a
    ``scedastic`` fit supplied, residuals are divided by ``sigma(x)`` before
    the transformation and the scale estimate uses the normalized residuals.
    ``merge_binding=False`` skips the binding-constraint incorporation
    (diagnostic use only; it voids the power guarantee).
    """
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if direction not in ("right", "left"):
        raise ValueError(f"direction must be 'right' or 'left', got {direction!r}")
    systems = _as_systems(basis)
    X = full_design(systems if len(systems) > 1 else systems[0], xs)
    n, L = X.shape

    fit_u = penalized_fit(X, ys, penalty[0], penalty[1]) if penalty else ols_fit(X, ys)
    fit_c = constrained_fit(X, ys, S, penalty=penalty, binding_tol=binding_tol)
    eff = effective_basis_from_fit(S, fit_c) if merge_binding else plain_basis(L)

    if direction == "left":
        lo = min(ks.domain[0] for ks in systems)
        hi = max(ks.domain[1] for ks in systems)
        x_order = lo + hi - xs
        knots = np.sort(lo + hi - combined_knots(systems))
    else:
        x_order = xs
        knots = combined_knots(systems)

    perm = np.argsort(x_order, kind="stable")
    x_sorted = x_order[perm]
    if varsigma is None:
        x_tilde = x_sorted.copy()
    else:
        if not 0.5 < varsigma < 1.0:
            raise ValueError(f"varsigma must lie in (1/2, 1), got {varsigma}")
        nxt = np.minimum(np.searchsorted(knots, x_sorted, side="left"), knots.size - 1)
        next_knot = knots[nxt]
        x_tilde = np.where(x_sorted + n ** (-varsigma) >= next_knot, next_knot, x_sorted)
    thresholds = np.searchsorted(x_sorted, x_tilde, side="left")
    os = OrderedSample(perm=perm, x_sorted=x_sorted, y_sorted=ys[perm],
                       P_sorted=X[perm], x_tilde=x_tilde, thresholds=thresholds)

    u_hat = fit_c.residuals.copy()
    sigma_x_sorted = None
    if scedastic is not None:
        sigma_x = scedastic.sigma(xs)
        u_hat = u_hat / sigma_x
        sigma_x_sorted = sigma_x[perm]
    sigma_hat = float(np.sqrt(np.mean(u_hat**2)))

    mach = build_machinery(os.P_sorted @ eff.M, thresholds)
    v = mach.apply(u_hat[perm])
    path = np.cumsum(v) / np.sqrt(n)
    n_tilde = n - L - 2
    if n_tilde < 1:
        raise ShapeTestError(f"sample too small: n - L - 2 = {n_tilde}")
    ctx = TransformContext(basis=basis, S=S, penalty=penalty, fit_constrained=fit_c,
                           fit_unconstrained=fit_u, eff=eff, os=os, mach=mach,
                           scedastic=scedastic, direction=direction,
                           sigma_x_sorted=sigma_x_sorted)
    return TransformOutput(v=v, path=path, sigma_hat=sigma_hat, n_tilde=n_tilde, context=ctx)
