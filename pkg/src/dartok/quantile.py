"""Piecewise-constant 1D distributions and their uniform quantiles.

A vector of bin masses ``m`` of length ``n`` defines a histogram density that
is constant (``m[i]``) on the unit interval ``(i, i + 1]``. Its CDF is
piecewise linear, so the inverse CDF is piecewise linear too and the uniform
quantiles have closed-form derivatives with respect to every bin mass.

All arithmetic is done in float64.
"""
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PiecewiseDistribution",
    "QuantileSet",
    "QuantileJacobian",
    "cdf_eval",
    "uniform_quantiles",
    "quantile_jacobian",
    "quantile_vjp",
]

BOUNDARY_TOL = 1e-12


class PiecewiseDistribution:
    """Histogram density with unit-width bins.

    Parameters
    ----------
    masses : array_like
        Nonnegative, finite bin masses. At least one bin; positive total.
    """

    def __init__(self, masses):
        m = np.asarray(masses, dtype=np.float64)
        if m.ndim != 1 or m.size < 1:
            raise ValueError(f"masses must be a non-empty 1D vector, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            bad = int(np.flatnonzero(~np.isfinite(m))[0])
            raise ValueError(f"non-finite mass at bin {bad}")
        if np.any(m < 0):
            bad = int(np.flatnonzero(m < 0)[0])
            raise ValueError(f"negative mass {m[bad]!r} at bin {bad}")
        self.masses = m
        # cum[j] = mass of bins 0..j inclusive
        self.cum = np.cumsum(m)
        self.total = float(self.cum[-1])
        if not self.total > 0:
            raise ValueError("total mass must be positive")

    @property
    def n(self):
        return self.masses.size

    def __len__(self):
        return self.masses.size

    def __repr__(self):
        return f"PiecewiseDistribution(n={self.n}, total={self.total:.6g})"


@dataclass(frozen=True)
class QuantileSet:
    """The ``K - 1`` interior uniform quantiles of a distribution.

    ``bins[k]`` is the index of the bin containing ``points[k]`` under the
    half-open scan convention ``cum[j-1] <= t < cum[j]``.
    """

    points: np.ndarray
    K: int
    bins: np.ndarray
    targets: np.ndarray


@dataclass(frozen=True)
class QuantileJacobian:
    matrix: np.ndarray
    boundary_subgradient: np.ndarray

    @property
    def flagged(self):
        return bool(self.boundary_subgradient.any())


def _as_dist(dist):
    if isinstance(dist, PiecewiseDistribution):
        return dist
    return PiecewiseDistribution(dist)


def cdf_eval(dist, x):
    """Evaluate the piecewise-linear CDF at ``x`` in ``[0, n]``."""
    dist = _as_dist(dist)
    x = float(x)
    if not 0.0 <= x <= dist.n:
        raise ValueError(f"x={x!r} outside [0, {dist.n}]")
    j = int(np.floor(x))
    if j >= dist.n:
        return dist.total
    below = dist.cum[j - 1] if j > 0 else 0.0
    return float(below + (x - j) * dist.masses[j])


def _locate(dist, K):
    if int(K) != K or K < 1:
        raise ValueError(f"segment count K must be a positive integer, got {K!r}")
    K = int(K)
    k = np.arange(1, K)
    t = k / K * dist.total
    # first j with cum[j] > t  <=>  cum[j-1] <= t < cum[j]
    j = np.searchsorted(dist.cum, t, side="right")
    j = np.minimum(j, dist.n - 1)
    # zero-mass bins can only be selected by the clip above; walk back to a
    # bin that actually carries mass
    for idx in np.flatnonzero(dist.masses[j] == 0):
        jj = j[idx]
        while jj > 0 and dist.masses[jj] == 0:
            jj -= 1
        j[idx] = jj
    below = np.where(j > 0, dist.cum[j - 1], 0.0)
    return K, t, j, below


def uniform_quantiles(dist, K):
    """Points splitting ``dist`` into ``K`` segments of equal mass.

    Returns a :class:`QuantileSet` with ``K - 1`` points ``q_k`` such that
    ``F(q_k) = k * M / K``.

    >>> uniform_quantiles([3.0, 1.0], 2).points
    array([0.66666667])
    """
    dist = _as_dist(dist)
    K, t, j, below = _locate(dist, K)
    q = j + (t - below) / dist.masses[j]
    return QuantileSet(points=q, K=K, bins=j, targets=t)


def _boundary_mask(qs):
    frac = qs.points - qs.bins
    return (np.abs(frac) < BOUNDARY_TOL) | (np.abs(frac - 1.0) < BOUNDARY_TOL)


def quantile_jacobian(dist, K):
    """Dense ``(K-1) x n`` matrix of d(quantile_k)/d(mass_i).

    Quantiles that sit on a bin edge (within 1e-12) are flagged in
    ``boundary_subgradient``; their rows hold the right-segment derivative.
    """
    dist = _as_dist(dist)
    qs = uniform_quantiles(dist, K)
    m = dist.masses
    n = dist.n
    j = qs.bins
    frac_k = np.arange(1, qs.K) / qs.K
    mj = m[j]
    below = np.where(j > 0, dist.cum[j - 1], 0.0)

    i = np.arange(n)
    jac = (frac_k[:, None] - (i[None, :] < j[:, None])) / mj[:, None]
    rows = np.arange(qs.K - 1)
    jac[rows, j] = frac_k / mj - (qs.targets - below) / mj**2
    return QuantileJacobian(matrix=jac, boundary_subgradient=_boundary_mask(qs))


def quantile_vjp(dist, K, upstream):
    """Contract ``upstream`` (length ``K-1``) with the quantile Jacobian.

    Runs in O(n + K) without building the dense matrix.
    """
    dist = _as_dist(dist)
    qs = uniform_quantiles(dist, K)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (qs.K - 1,):
        raise ValueError(f"upstream must have shape ({qs.K - 1},), got {u.shape}")
    m = dist.masses
    n = dist.n
    j = qs.bins
    mj = m[j]
    below = np.where(j > 0, dist.cum[j - 1], 0.0)
    frac_k = np.arange(1, qs.K) / qs.K

    out = np.full(n, np.sum(u * frac_k / mj))
    # subtract u_k / m_j from every bin strictly left of j_k
    c = np.zeros(n)
    np.add.at(c, j, u / mj)
    tail = np.cumsum(c[::-1])[::-1]  # tail[i] = sum over j_k >= i
    out[:-1] -= tail[1:]
    np.add.at(out, j, -u * (qs.targets - below) / mj**2)
    return out
