"""Constraint sets on spline coefficients for shape hypotheses.

Each builder turns a knot system plus hypothesis parameters into linear
inequalities ``A b >= c``, linear equalities ``E b = d`` and quadratic
inequalities ``b'Q b + q'b <= 0`` on the coefficient vector.  Constraint data
depend only on the knot system and the hypothesis, never on sample data, so
two calls with equal arguments produce identical matrices.

Supported hypotheses: signs of derivatives (with optional level ``c_r`` and
boundary refinement), partitioned domains with continuous or smooth joins
(U-/S-shapes), symmetry about a point, quasi-convexity via a family of
switch candidates, and the generalized-convexity families (power scale,
exponential scale, and the mean-convexity classes AG/AH/GA/GG/GH/HA/HG/HH).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsplines import KnotSystem, derivative_design, design_matrix

_KNOT_TOL = 1e-12


@dataclass
class QuadraticConstraint:
    """Single inequality ``b' Q b + lin' b <= 0`` with symmetric ``Q``."""

    Q: np.ndarray
    lin: np.ndarray
    label: str = ""

    def value(self, beta: np.ndarray) -> float:
        beta = np.asarray(beta, dtype=float)
        return float(beta @ self.Q @ beta + self.lin @ beta)

    def gradient(self, beta: np.ndarray) -> np.ndarray:
        return 2.0 * (self.Q @ beta) + self.lin


@dataclass
class ConstraintSet:
    """Constraints on a coefficient vector of length ``dim``.

    ``a_ineq @ b >= c_ineq`` and ``e_eq @ b = d_eq`` collect the linear part;
    ``quad`` holds quadratic inequalities; ``positivity`` additionally
    requires ``b >= positivity_margin`` coordinatewise.
    """

    dim: int
    a_ineq: np.ndarray
    c_ineq: np.ndarray
    e_eq: np.ndarray
    d_eq: np.ndarray
    quad: list[QuadraticConstraint] = field(default_factory=list)
    positivity: bool = False
    positivity_margin: float = 0.0
    ineq_labels: list[str] = field(default_factory=list)
    eq_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.a_ineq = np.atleast_2d(np.asarray(self.a_ineq, dtype=float))
        if self.a_ineq.size == 0:
            self.a_ineq = np.zeros((0, self.dim))
        self.c_ineq = np.asarray(self.c_ineq, dtype=float).ravel()
        self.e_eq = np.atleast_2d(np.asarray(self.e_eq, dtype=float))
        if self.e_eq.size == 0:
            self.e_eq = np.zeros((0, self.dim))
        self.d_eq = np.asarray(self.d_eq, dtype=float).ravel()
        for name, mat in (("a_ineq", self.a_ineq), ("e_eq", self.e_eq)):
            if mat.shape[1] != self.dim:
                raise ValueError(f"{name} has {mat.shape[1]} columns, expected {self.dim}")
        for qc in self.quad:
            if qc.Q.shape != (self.dim, self.dim):
                raise ValueError("quadratic constraint dimension mismatch")
        if not self.ineq_labels:
            self.ineq_labels = [f"ineq[{i}]" for i in range(self.a_ineq.shape[0])]
        if not self.eq_labels:
            self.eq_labels = [f"eq[{i}]" for i in range(self.e_eq.shape[0])]

    @property
    def n_ineq(self) -> int:
        return self.a_ineq.shape[0]

    @property
    def n_eq(self) -> int:
        return self.e_eq.shape[0]

    def is_linear(self) -> bool:
        return not self.quad

    def violation(self, beta: np.ndarray) -> float:
        """Largest constraint violation at ``beta`` (0 if feasible)."""
        beta = np.asarray(beta, dtype=float)
        worst = 0.0
        if self.n_ineq:
            worst = max(worst, float(np.max(self.c_ineq - self.a_ineq @ beta, initial=0.0)))
        if self.n_eq:
            worst = max(worst, float(np.max(np.abs(self.e_eq @ beta - self.d_eq), initial=0.0)))
        for qc in self.quad:
            worst = max(worst, qc.value(beta))
        if self.positivity:
            worst = max(worst, float(np.max(self.positivity_margin - beta, initial=0.0)))
        return worst

    def to_json_dict(self) -> dict:
        quads = []
        for qc in self.quad:
            ii, jj = np.nonzero(qc.Q)
            quads.append(
                {
                    "label": qc.label,
                    "triplets": [[int(i), int(j), float(qc.Q[i, j])] for i, j in zip(ii, jj)],
                    "lin": qc.lin.tolist(),
                }
            )
        return {
            "dim": self.dim,
            "a_ineq": self.a_ineq.tolist(),
            "c_ineq": self.c_ineq.tolist(),
            "e_eq": self.e_eq.tolist(),
            "d_eq": self.d_eq.tolist(),
            "quad": quads,
            "positivity": self.positivity,
            "positivity_margin": self.positivity_margin,
            "ineq_labels": self.ineq_labels,
            "eq_labels": self.eq_labels,
        }


def constraint_set_from_json(doc: dict) -> ConstraintSet:
    dim = doc["dim"]
    quads = []
    for entry in doc["quad"]:
        Q = np.zeros((dim, dim))
        for i, j, v in entry["triplets"]:
            Q[i, j] = v
        quads.append(QuadraticConstraint(Q=Q, lin=np.asarray(entry["lin"]), label=entry["label"]))
    return ConstraintSet(
        dim=dim,
        a_ineq=np.asarray(doc["a_ineq"]).reshape(-1, dim),
        c_ineq=np.asarray(doc["c_ineq"]),
        e_eq=np.asarray(doc["e_eq"]).reshape(-1, dim),
        d_eq=np.asarray(doc["d_eq"]),
        quad=quads,
        positivity=doc["positivity"],
        positivity_margin=doc["positivity_margin"],
        ineq_labels=list(doc["ineq_labels"]),
        eq_labels=list(doc["eq_labels"]),
    )


def combine(*sets: ConstraintSet) -> ConstraintSet:
    """Intersection of constraint sets on the same coefficient space."""
    dims = {s.dim for s in sets}
    if len(dims) != 1:
        raise ValueError("cannot combine constraint sets of different dimension")
    dim = dims.pop()
    return ConstraintSet(
        dim=dim,
        a_ineq=np.vstack([s.a_ineq for s in sets]),
        c_ineq=np.concatenate([s.c_ineq for s in sets]),
        e_eq=np.vstack([s.e_eq for s in sets]),
        d_eq=np.concatenate([s.d_eq for s in sets]),
        quad=[qc for s in sets for qc in s.quad],
        positivity=any(s.positivity for s in sets),
        positivity_margin=max(s.positivity_margin for s in sets),
        ineq_labels=[l for s in sets for l in s.ineq_labels],
        eq_labels=[l for s in sets for l in s.eq_labels],
    )


def derivative_sign_constraints(
    ks: KnotSystem,
    r: int,
    d_r: int,
    c_r: float = 0.0,
    boundary_refinement: bool = False,
) -> ConstraintSet:
    """Constraints encoding ``d_r * m^(r)(x) >= c_r``.

    For ``c_r = 0`` and ``r in {1, 2}`` the exact coefficient-difference form
    is used: all first differences for ``r = 1``, and for ``r = 2`` the
    equal-spacing second-difference rows on leading index ``l = q .. L-q-1``
    (1-based), optionally completed by the boundary inequalities that account
    for the stacked boundary knots.  Otherwise the derivative level is
    enforced at the unique knots.
    """
    if d_r not in (-1, 1):
        raise ValueError("d_r must be +1 or -1")
    # r = 1 is also meaningful for degree 0: coefficient differences order the cells.
    if r < 1 or (r > ks.q and not (r == 1 and ks.q == 0)):
        raise ValueError(f"derivative order must be in [1, {max(ks.q, 1)}], got {r}")
    L = ks.L
    rows, labels = [], []
    if c_r == 0.0 and r == 1:
        for l in range(L - 1):
            row = np.zeros(L)
            row[l], row[l + 1] = -d_r, d_r
            rows.append(row)
            labels.append(f"d1[{l}]")
    elif c_r == 0.0 and r == 2:
        if L < 2 * ks.q + r:
            raise ValueError(f"need L >= {2 * ks.q + r} for second-difference rows, got {L}")
        for l in range(ks.q - 1, L - ks.q - r + 1):
            row = np.zeros(L)
            row[l], row[l + 1], row[l + 2] = d_r, -2 * d_r, d_r
            rows.append(row)
            labels.append(f"d2[{l}]")
        if boundary_refinement:
            # Unequal knot gaps near the boundary make the plain second
            # differences insufficient there; these weighted rows complete
            # the exact characterization.
            for j in range(2, ks.q + 1):
                left = np.zeros(L)
                # (j-1) * (b[j+1]-b[j]) - j * (b[j]-b[j-1]) >= 0, 1-based
                left[j] = (j - 1) * d_r
                left[j - 1] = -(2 * j - 1) * d_r
                left[j - 2] = j * d_r
                rows.append(left)
                labels.append(f"d2-left[{j}]")
                right = np.zeros(L)
                # j * (b[L-j+2]-b[L-j+1]) - (j-1) * (b[L-j+1]-b[L-j]) >= 0
                right[L - j + 1] = j * d_r
                right[L - j] = -(2 * j - 1) * d_r
                right[L - j - 1] = (j - 1) * d_r
                rows.append(right)
                labels.append(f"d2-right[{j}]")
    else:
        H = derivative_design(ks, ks.unique_knots, r)
        for k, row in enumerate(H):
            rows.append(d_r * row)
            labels.append(f"d{r}@z[{k}]")
        c = np.full(len(rows), c_r)
        return ConstraintSet(
            dim=L, a_ineq=np.array(rows), c_ineq=c,
            e_eq=np.zeros((0, L)), d_eq=np.zeros(0), ineq_labels=labels,
        )
    return ConstraintSet(
        dim=L, a_ineq=np.array(rows), c_ineq=np.zeros(len(rows)),
        e_eq=np.zeros((0, L)), d_eq=np.zeros(0), ineq_labels=labels,
    )


def partition_constraints(
    specs: list[tuple[KnotSystem, int, int]],
    join: str = "none",
) -> ConstraintSet:
    """Block-diagonal derivative-sign constraints on a partitioned domain.

    ``specs`` lists ``(ks_j, r_j, d_j)`` per interval, left to right; the knot
    systems must tile the domain.  ``join`` adds equality rows tying adjacent
    blocks: "continuous" equates the endpoint values, "smooth" additionally
    equates the one-sided first derivatives (rescaled by the first-interval
    widths when the two sides have unequal knot spacing).
    """
    if join not in ("none", "continuous", "smooth"):
        raise ValueError(f"unknown join mode {join!r}")
    if not specs:
        raise ValueError("empty partition")
    for (ks_a, _, _), (ks_b, _, _) in zip(specs, specs[1:]):
        if abs(ks_a.domain[1] - ks_b.domain[0]) > _KNOT_TOL:
            raise ValueError("partition intervals do not tile the domain")
    dims = [ks_j.L for ks_j, _, _ in specs]
    dim = sum(dims)
    offs = np.concatenate([[0], np.cumsum(dims)])

    blocks, c_parts, labels = [], [], []
    for j, (ks_j, r_j, d_j) in enumerate(specs):
        cs_j = derivative_sign_constraints(ks_j, r_j, d_j)
        A = np.zeros((cs_j.n_ineq, dim))
        A[:, offs[j] : offs[j + 1]] = cs_j.a_ineq
        blocks.append(A)
        c_parts.append(cs_j.c_ineq)
        labels.extend(f"block{j}:{lab}" for lab in cs_j.ineq_labels)

    eq_rows, eq_labels = [], []
    for j in range(len(specs) - 1):
        ks_a, ks_b = specs[j][0], specs[j + 1][0]
        la, ob = offs[j] + dims[j] - 1, offs[j + 1]
        if join in ("continuous", "smooth"):
            row = np.zeros(dim)
            row[la], row[ob] = 1.0, -1.0
            eq_rows.append(row)
            eq_labels.append(f"join-cont[{j}]")
        if join == "smooth":
            h_a = (ks_a.domain[1] - ks_a.domain[0]) / ks_a.l_prime
            h_b = (ks_b.domain[1] - ks_b.domain[0]) / ks_b.l_prime
            row = np.zeros(dim)
            row[la], row[la - 1] = 1.0 / h_a, -1.0 / h_a
            row[ob + 1], row[ob] = -1.0 / h_b, 1.0 / h_b
            eq_rows.append(row)
            eq_labels.append(f"join-smooth[{j}]")

    return ConstraintSet(
        dim=dim,
        a_ineq=np.vstack(blocks),
        c_ineq=np.concatenate(c_parts),
        e_eq=np.array(eq_rows).reshape(-1, dim),
        d_eq=np.zeros(len(eq_rows)),
        ineq_labels=labels,
        eq_labels=eq_labels,
    )


def ushape_constraints(ks_left: KnotSystem, ks_right: KnotSystem, join: str = "smooth") -> ConstraintSet:
    """Decreasing-then-increasing constraints on a two-interval partition."""
    return partition_constraints([(ks_left, 1, -1), (ks_right, 1, +1)], join=join)


def symmetry_constraints(ks_left: KnotSystem, ks_right: KnotSystem, s0: float) -> ConstraintSet:
    """Equalities pairing mirror coefficients of two mirror-image bases."""
    if ks_left.L != ks_right.L or ks_left.q != ks_right.q:
        raise ValueError("symmetry requires equal basis size and degree on both sides")
    if abs(ks_left.domain[1] - s0) > _KNOT_TOL or abs(ks_right.domain[0] - s0) > _KNOT_TOL:
        raise ValueError("knot systems must meet at the symmetry point")
    mirrored = 2.0 * s0 - ks_right.knots[::-1]
    if not np.allclose(mirrored, ks_left.knots, atol=1e-9):
        raise ValueError("knot systems are not mirror images about s0")
    L, dim = ks_left.L, 2 * ks_left.L
    rows = np.zeros((L, dim))
    for l in range(L):
        rows[l, l] = 1.0
        rows[l, dim - 1 - l] = -1.0
    return ConstraintSet(
        dim=dim, a_ineq=np.zeros((0, dim)), c_ineq=np.zeros(0),
        e_eq=rows, d_eq=np.zeros(L),
        eq_labels=[f"sym[{l}]" for l in range(L)],
    )


def _knot_rows(ks: KnotSystem):
    """Basis and derivative rows at the unique knots, for quadratic builders."""
    z = ks.unique_knots
    B = design_matrix(ks, z)
    D1 = derivative_design(ks, z, 1)
    D2 = derivative_design(ks, z, 2)
    return z, B, D1, D2


def _sym(outer: np.ndarray) -> np.ndarray:
    return 0.5 * (outer + outer.T)


def rho_convexity_constraints(ks: KnotSystem, rho: float) -> ConstraintSet:
    """Power-scale generalized convexity: ``m m'' + (rho-1) (m')^2 >= 0``.

    ``rho = 1`` is ordinary convexity (emitted as the linear
    second-difference rows), ``rho = 0`` is log-convexity.  Positivity of the
    function is part of the class, so the positivity flag is set.
    """
    if ks.q < 2:
        raise ValueError("second-derivative shapes need degree >= 2")
    if rho == 1.0:
        cs = derivative_sign_constraints(ks, 2, +1)
        cs.positivity = True
        return cs
    z, B, D1, D2 = _knot_rows(ks)
    quads = []
    for k in range(z.size):
        Q = -_sym(np.outer(B[k], D2[k])) - (rho - 1.0) * np.outer(D1[k], D1[k])
        quads.append(QuadraticConstraint(Q=Q, lin=np.zeros(ks.L), label=f"rho_convex@z[{k}]"))
    return ConstraintSet(
        dim=ks.L, a_ineq=np.zeros((0, ks.L)), c_ineq=np.zeros(0),
        e_eq=np.zeros((0, ks.L)), d_eq=np.zeros(0), quad=quads, positivity=True,
    )


def log_convexity_constraints(ks: KnotSystem) -> ConstraintSet:
    """Log-convexity, i.e. the power-scale family at index 0."""
    return rho_convexity_constraints(ks, 0.0)


def exp_r_convexity_constraints(ks: KnotSystem, r: float) -> ConstraintSet:
    """Exponential-scale generalized convexity: ``r (m')^2 + m'' >= 0``.

    ``r = 0`` reduces to ordinary convexity enforced at the knots.  A
    function satisfies these rows exactly when its exponential satisfies the
    power-scale rows with the same index.
    """
    if ks.q < 2:
        raise ValueError("second-derivative shapes need degree >= 2")
    z, B, D1, D2 = _knot_rows(ks)
    if r == 0.0:
        rows = D2.copy()
        return ConstraintSet(
            dim=ks.L, a_ineq=rows, c_ineq=np.zeros(z.size),
            e_eq=np.zeros((0, ks.L)), d_eq=np.zeros(0), positivity=True,
            ineq_labels=[f"r_convex@z[{k}]" for k in range(z.size)],
        )
    quads = []
    for k in range(z.size):
        Q = -r * np.outer(D1[k], D1[k])
        quads.append(QuadraticConstraint(Q=Q, lin=-D2[k], label=f"r_convex@z[{k}]"))
    return ConstraintSet(
        dim=ks.L, a_ineq=np.zeros((0, ks.L)), c_ineq=np.zeros(0),
        e_eq=np.zeros((0, ks.L)), d_eq=np.zeros(0), quad=quads, positivity=True,
    )


_MN_TOKENS = ("AG", "AH", "GA", "GG", "GH", "HA", "HG", "HH")


def mn_convexity_constraints(ks: KnotSystem, token: str) -> ConstraintSet:
    """Mean-convexity classes for arithmetic/geometric/harmonic mean pairs.

    GA and HA reduce to linear rows (knot-wise monotonicity of ``x m'`` and
    ``x^2 m'``); the remaining classes produce one quadratic inequality per
    unique knot from the derivative characterization of the monotone ratio.
    """
    token = token.upper()
    if token not in _MN_TOKENS:
        raise ValueError(f"unknown mean-convexity token {token!r}")
    if ks.q < 2:
        raise ValueError("second-derivative shapes need degree >= 2")
    z, B, D1, D2 = _knot_rows(ks)
    L = ks.L

    if token in ("GA", "HA"):
        p = 1 if token == "GA" else 2
        w = z**p
        rows = w[1:, None] * D1[1:] - w[:-1, None] * D1[:-1]
        return ConstraintSet(
            dim=L, a_ineq=rows, c_ineq=np.zeros(rows.shape[0]),
            e_eq=np.zeros((0, L)), d_eq=np.zeros(0), positivity=True,
            ineq_labels=[f"{token}[{k}]" for k in range(rows.shape[0])],
        )

    quads = []
    for k in range(z.size):
        x, b, d1, d2 = z[k], B[k], D1[k], D2[k]
        if token == "AG":
            # (m'/m)' >= 0  <=>  (m')^2 - m m'' <= 0
            Q = np.outer(d1, d1) - _sym(np.outer(b, d2))
        elif token == "AH":
            # (m'/m^2)' >= 0  <=>  2 (m')^2 - m m'' <= 0
            Q = 2.0 * np.outer(d1, d1) - _sym(np.outer(b, d2))
        elif token == "GG":
            # (x m'/m)' >= 0  <=>  x (m')^2 - (m' + x m'') m <= 0
            Q = x * np.outer(d1, d1) - _sym(np.outer(d1 + x * d2, b))
        elif token == "GH":
            # (x m'/m^2)' >= 0  <=>  2 x (m')^2 - (m' + x m'') m <= 0
            Q = 2.0 * x * np.outer(d1, d1) - _sym(np.outer(d1 + x * d2, b))
        elif token == "HG":
            # (x^2 m'/m)' >= 0  <=>  x^2 (m')^2 - (2 x m' + x^2 m'') m <= 0
            Q = x * x * np.outer(d1, d1) - _sym(np.outer(2.0 * x * d1 + x * x * d2, b))
        else:  # HH
            # (x^2 m'/m^2)' >= 0  <=>  2 x^2 (m')^2 - (2 x m' + x^2 m'') m <= 0
            Q = 2.0 * x * x * np.outer(d1, d1) - _sym(np.outer(2.0 * x * d1 + x * x * d2, b))
        quads.append(QuadraticConstraint(Q=Q, lin=np.zeros(L), label=f"{token}@z[{k}]"))
    return ConstraintSet(
        dim=L, a_ineq=np.zeros((0, L)), c_ineq=np.zeros(0),
        e_eq=np.zeros((0, L)), d_eq=np.zeros(0), quad=quads, positivity=True,
    )


def quadratic_shape_constraints(ks: KnotSystem, shape: str, param: float | None = None) -> ConstraintSet:
    """Dispatch on a shape token: ``r_convex``, ``rho_convex`` or an MN pair.

    ``r_convex`` follows the convention in which index 1 is ordinary
    convexity and index 0 is log-convexity (the power scale); the
    exponential-scale rows are available via :func:`exp_r_convexity_constraints`.
    """
    shape = shape.strip()
    if shape == "r_convex" or shape == "rho_convex":
        if param is None:
            raise ValueError(f"{shape} requires a numeric parameter")
        return rho_convexity_constraints(ks, float(param))
    if shape.upper() in _MN_TOKENS:
        return mn_convexity_constraints(ks, shape)
    raise ValueError(f"unsupported shape token {shape!r}")


def quasiconvexity_candidates(ks: KnotSystem) -> list[ConstraintSet]:
    """One U-shape candidate per unique knot acting as the switch point.

    A first difference is constrained to be nonpositive when the support of
    the corresponding derivative basis function lies left of the switch and
    nonnegative when it lies right; differences straddling the switch are
    free.  The boundary knots yield the two pure monotonicity sets.
    """
    t, q, L = ks.knots, ks.q, ks.L
    candidates = []
    for s in ks.unique_knots:
        rows, labels = [], []
        for j in range(L - 1):
            lo, hi = t[j + 1], t[j + 1 + q]
            row = np.zeros(L)
            if hi <= s + _KNOT_TOL:
                row[j], row[j + 1] = 1.0, -1.0  # decreasing left of switch
                labels.append(f"dec[{j}]")
            elif lo >= s - _KNOT_TOL:
                row[j], row[j + 1] = -1.0, 1.0  # increasing right of switch
                labels.append(f"inc[{j}]")
            else:
                continue
            rows.append(row)
        candidates.append(
            ConstraintSet(
                dim=L, a_ineq=np.array(rows).reshape(-1, L), c_ineq=np.zeros(len(rows)),
                e_eq=np.zeros((0, L)), d_eq=np.zeros(0), ineq_labels=labels,
            )
        )
    return candidates
