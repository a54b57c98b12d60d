"""Functionals of the transformed partial-sum path.

The path behaves like a Brownian motion under the null hypothesis; the
Kolmogorov-Smirnov, Cramer-von Mises and Anderson-Darling statistics take
its supremum, mean square, and variance-weighted mean square over the first
``n - L - 2`` order statistics, scaled by the residual standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .khmaladze import TransformOutput

_DEGENERATE_SCALE = 1e-12


@dataclass
class TestStatistics:
    ks: float
    cvm: float
    ad: float
    n_tilde: int
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.ks, self.cvm, self.ad])

    def to_json_dict(self) -> dict:
        return {"ks": self.ks, "cvm": self.cvm, "ad": self.ad,
                "n_tilde": self.n_tilde, "degenerate": self.degenerate}


def statistics_from_path(path: np.ndarray, sigma_hat: float, n: int, n_tilde: int) -> TestStatistics:
    """Statistics from a raw partial-sum path (first ``n_tilde`` points used).

    The Anderson-Darling weight uses the grid ``q/n``, which never touches
    zero or one since ``q`` starts at 1 and ``n_tilde < n``.
    """
    if n_tilde < 1:
        raise ValueError(f"need at least one usable path point, got n_tilde={n_tilde}")
    if sigma_hat <= _DEGENERATE_SCALE:
        return TestStatistics(ks=0.0, cvm=0.0, ad=0.0, n_tilde=n_tilde, degenerate=True)
    head = np.asarray(path, dtype=float)[:n_tilde]
    sq = (head / sigma_hat) ** 2
    grid = np.arange(1, n_tilde + 1) / n
    ks = float(np.sqrt(sq.max()))
    cvm = float(sq.mean())
    ad = float(np.mean(sq / (grid * (1.0 - grid))))
    return TestStatistics(ks=ks, cvm=cvm, ad=ad, n_tilde=n_tilde)


def compute_statistics(t: TransformOutput) -> TestStatistics:
    return statistics_from_path(t.path, t.sigma_hat, t.v.size, t.n_tilde)


def batch_statistics(paths: np.ndarray, sigma_hats: np.ndarray, n: int, n_tilde: int) -> np.ndarray:
    """(B, 3) array of KS/CvM/AD for paths stored one per column."""
    head = paths[:n_tilde]
    grid = (np.arange(1, n_tilde + 1) / n)[:, None]
    sig2 = np.asarray(sigma_hats, dtype=float) ** 2
    degenerate = sig2 <= _DEGENERATE_SCALE**2
    sig2 = np.where(degenerate, 1.0, sig2)
    sq = head**2 / sig2[None, :]
    ks = np.sqrt(sq.max(axis=0))
    cvm = sq.mean(axis=0)
    ad = (sq / (grid * (1.0 - grid))).mean(axis=0)
    out = np.column_stack([ks, cvm, ad])
    out[degenerate] = 0.0
    return out
