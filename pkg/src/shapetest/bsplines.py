"""B-spline knot systems, basis evaluation and derivatives.

The basis of degree ``q`` on ``[x_lo, x_hi]`` is built from ``l_prime`` equal
subintervals with the boundary knots stacked to multiplicity ``q + 1``, giving
``L = l_prime + q`` basis functions.  Evaluation uses the Cox-de Boor
recursion; the domain is treated as closed, with the convention that at the
right endpoint the last basis function equals one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class KnotSystem:
    """Extended knot vector for a B-spline basis of degree ``q``.

    Attributes
    ----------
    q : int
        Polynomial degree (>= 0).
    l_prime : int
        Number of equal-length subintervals (>= 1).
    domain : tuple of float
        Closed interval ``(x_lo, x_hi)``.
    knots : ndarray
        Nondecreasing knot vector of length ``l_prime + 2q + 1`` with the
        boundary values repeated ``q + 1`` times.
    """

    q: int
    l_prime: int
    domain: tuple[float, float]
    knots: np.ndarray = field(repr=False)

    @property
    def L(self) -> int:
        """Number of basis functions, ``l_prime + q``."""
        return self.l_prime + self.q

    @property
    def unique_knots(self) -> np.ndarray:
        """The ``l_prime + 1`` distinct breakpoints, boundaries included."""
        return self.knots[self.q : self.q + self.l_prime + 1]

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.domain
        return (x >= lo) & (x <= hi)


def make_knot_system(q: int, l_prime: int, domain: tuple[float, float]) -> KnotSystem:
    """Build the equidistant knot system of degree ``q`` on ``domain``.

    Raises
    ------
    ValueError
        If ``q < 0``, ``l_prime < 1`` or the domain is empty.
    """
    if q < 0:
        raise ValueError(f"degree must be >= 0, got {q}")
    if l_prime < 1:
        raise ValueError(f"number of subintervals must be >= 1, got {l_prime}")
    x_lo, x_hi = float(domain[0]), float(domain[1])
    if not x_lo < x_hi:
        raise ValueError(f"empty domain [{x_lo}, {x_hi}]")
    interior = np.linspace(x_lo, x_hi, l_prime + 1)
    knots = np.concatenate([np.full(q, x_lo), interior, np.full(q, x_hi)])
    return KnotSystem(q=q, l_prime=l_prime, domain=(x_lo, x_hi), knots=knots)


def _knot_system_from_vector(q: int, knots: np.ndarray) -> KnotSystem:
    """Wrap an explicit extended knot vector (used for derivative systems)."""
    knots = np.asarray(knots, dtype=float)
    l_prime = knots.size - 2 * q - 1
    return KnotSystem(q=q, l_prime=l_prime, domain=(float(knots[0]), float(knots[-1])), knots=knots)


def _find_spans(ks: KnotSystem, xs: np.ndarray) -> np.ndarray:
    # span i satisfies t[i] <= x < t[i+1]; clipped so the right endpoint
    # falls into the last nonempty interval.
    spans = np.searchsorted(ks.knots, xs, side="right") - 1
    return np.clip(spans, ks.q, ks.L - 1)


def design_matrix(ks: KnotSystem, xs) -> np.ndarray:
    """Evaluate all basis functions at ``xs``; row ``i`` is the basis at ``xs[i]``.

    Every row sums to one and has at most ``q + 1`` nonzero entries.

    Raises
    ------
    ValueError
        If any evaluation point lies outside the closed domain.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    inside = ks.contains(xs)
    if not inside.all():
        bad = xs[~inside][0]
        raise ValueError(f"evaluation point {bad} outside domain {ks.domain}")
    n, q, L = xs.size, ks.q, ks.L
    t = ks.knots
    spans = _find_spans(ks, xs)

    # Cox-de Boor triangle, vectorized over points.  vals[:, r] holds the
    # value of basis function spans - j + r at stage j.
    vals = np.zeros((n, q + 1))
    vals[:, 0] = 1.0
    left = np.zeros((n, q + 1))
    right = np.zeros((n, q + 1))
    for j in range(1, q + 1):
        left[:, j] = xs - t[spans + 1 - j]
        right[:, j] = t[spans + j] - xs
        saved = np.zeros(n)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            # 0/0 convention: a vanishing denominator contributes nothing.
            temp = np.where(denom > 0.0, vals[:, r] / np.where(denom > 0.0, denom, 1.0), 0.0)
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved

    out = np.zeros((n, L))
    cols = spans[:, None] - q + np.arange(q + 1)[None, :]
    np.put_along_axis(out, cols, vals, axis=1)
    return out


def eval_basis(ks: KnotSystem, x: float) -> np.ndarray:
    """Basis vector ``(p_1(x), ..., p_L(x))`` at a single point."""
    return design_matrix(ks, [x])[0]


def eval_spline(ks: KnotSystem, beta, x):
    """Evaluate ``sum_l beta_l p_l(x)`` at scalar or array ``x``."""
    beta = np.asarray(beta, dtype=float)
    if beta.size != ks.L:
        raise ValueError(f"expected {ks.L} coefficients, got {beta.size}")
    vals = design_matrix(ks, x) @ beta
    return float(vals[0]) if np.isscalar(x) else vals


def derivative_matrix(ks: KnotSystem, r: int) -> tuple[KnotSystem, np.ndarray]:
    """Linear map from coefficients to the coefficients of the r-th derivative.

    Returns the knot system of degree ``q - r`` (boundary multiplicity drops
    by one per differentiation) together with the ``(L - r) x L`` matrix ``M``
    such that ``M @ beta`` are the derivative-spline coefficients.
    """
    if r < 0 or r > ks.q:
        raise ValueError(f"derivative order must be in [0, {ks.q}], got {r}")
    M = np.eye(ks.L)
    cur = ks
    for _ in range(r):
        q, L, t = cur.q, cur.L, cur.knots
        gaps = t[1 + q : L + q] - t[1:L]
        D = np.zeros((L - 1, L))
        idx = np.arange(L - 1)
        D[idx, idx] = -q / gaps
        D[idx, idx + 1] = q / gaps
        M = D @ M
        cur = _knot_system_from_vector(q - 1, t[1:-1])
    return cur, M


def derivative_coefficients(ks: KnotSystem, beta, r: int) -> tuple[KnotSystem, np.ndarray]:
    """Coefficients of the r-th derivative spline (degree ``q - r``)."""
    beta = np.asarray(beta, dtype=float)
    ks_r, M = derivative_matrix(ks, r)
    return ks_r, M @ beta


def derivative_design(ks: KnotSystem, xs, r: int) -> np.ndarray:
    """Matrix ``H`` with ``H @ beta = m^(r)(xs)`` for the spline ``m``."""
    ks_r, M = derivative_matrix(ks, r)
    return design_matrix(ks_r, xs) @ M


def partition_design(systems: list[KnotSystem], xs) -> np.ndarray:
    """Block design matrix for bases on consecutive intervals.

    Each point is assigned to the interval ``(tau_j, tau_{j+1}]`` containing
    it (the leftmost interval is closed at its left end), and its row holds
    that block's basis values, zeros elsewhere.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    taus = np.array([systems[0].domain[0]] + [ks.domain[1] for ks in systems])
    if np.any(xs < taus[0]) or np.any(xs > taus[-1]):
        raise ValueError("evaluation point outside the partitioned domain")
    block = np.clip(np.searchsorted(taus, xs, side="left") - 1, 0, len(systems) - 1)
    dims = [ks.L for ks in systems]
    offs = np.concatenate([[0], np.cumsum(dims)])
    out = np.zeros((xs.size, offs[-1]))
    for j, ks in enumerate(systems):
        mask = block == j
        if mask.any():
            out[np.ix_(mask, np.arange(offs[j], offs[j + 1]))] = design_matrix(ks, xs[mask])
    return out


def greville_abscissae(ks: KnotSystem) -> np.ndarray:
    """Knot averages ``(z^{l+1} + ... + z^{l+q}) / q`` used for interpolation.

    For degree 0 the cell midpoints are returned instead.
    """
    t, q, L = ks.knots, ks.q, ks.L
    if q == 0:
        return 0.5 * (t[:-1] + t[1:])
    return np.array([t[l + 1 : l + q + 1].mean() for l in range(L)])
