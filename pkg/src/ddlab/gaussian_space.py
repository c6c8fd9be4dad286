"""Finite-dimensional Gaussian reference space ``(R^d, N(0, I_d))``.

Integration against the standard Gaussian measure is done by one of three
policies:

* ``gauss_hermite`` -- tensor Gauss-Hermite grid, ``d <= 3``;
* ``monte_carlo``   -- plain Monte Carlo with a reported standard error;
* ``adaptive``      -- ``d == 1`` only, adaptive Gauss-Kronrod (QUADPACK)
  split at caller-supplied breakpoints.  Used for integrands with kinks or
  thin spikes that a Hermite grid cannot resolve.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import integrate

from ddlab import streams

METHODS = ("gauss_hermite", "monte_carlo", "adaptive")
TAIL = 38.0  # the Gaussian density is below 1e-313 beyond this radius


class EvaluationError(ValueError):
    """An integrand returned a non-finite value at a quadrature node."""


class NonIntegrabilityWarning(RuntimeWarning):
    """A Monte Carlo or adaptive integral did not look stable."""


@dataclass(frozen=True)
class SpaceConfig:
    """Dimension plus integration policy for the Gaussian measure.

    Parameters
    ----------
    d : int
        Dimension of ``E = H = R^d``.
    method : str
        One of ``gauss_hermite``, ``monte_carlo`` or ``adaptive``.
    order : int
        Hermite nodes per axis (``gauss_hermite`` only, at least 8).
    samples, seed : int
        Sample count and seed for ``monte_carlo``.
    tol : float
        Relative tolerance; the target for ``adaptive``, nominal otherwise.
    """

    d: int = 1
    method: str = "gauss_hermite"
    order: int = 64
    samples: int = 100_000
    seed: int = 0
    tol: float = 1e-8

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if self.method not in METHODS:
            raise ValueError(f"unknown integration method {self.method!r}; expected one of {METHODS}")
        if self.method == "gauss_hermite":
            if self.d > 3:
                raise ValueError("gauss_hermite integration is only permitted for d <= 3")
            if self.order < 8:
                raise ValueError(f"gauss_hermite order must be >= 8, got {self.order}")
        if self.method == "adaptive" and self.d != 1:
            raise ValueError("adaptive integration is only available for d == 1")
        if self.method == "monte_carlo" and self.samples < 2:
            raise ValueError("monte_carlo needs at least 2 samples")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    @classmethod
    def default(cls, d: int = 1) -> "SpaceConfig":
        if d <= 3:
            return cls(d=d, order=64 if d == 1 else (32 if d == 2 else 16))
        return cls(d=d, method="monte_carlo")

    def refined(self) -> "SpaceConfig":
        """The same policy at roughly doubled resolution."""
        if self.method == "gauss_hermite":
            return SpaceConfig(self.d, self.method, order=2 * self.order, tol=self.tol)
        if self.method == "monte_carlo":
            return SpaceConfig(self.d, self.method, samples=4 * self.samples, seed=self.seed + 1, tol=self.tol)
        return SpaceConfig(self.d, self.method, tol=self.tol * 1e-3)

    def to_dict(self) -> dict:
        out = {"d": self.d, "method": self.method}
        if self.method == "gauss_hermite":
            out["order"] = self.order
        elif self.method == "monte_carlo":
            out.update(samples=self.samples, seed=self.seed)
        out["tol"] = self.tol
        return out


@dataclass(frozen=True)
class GaussianSample:
    """``count`` points in ``R^d``; point ``i`` is a function of ``(seed, i)`` only."""

    points: np.ndarray
    seed: int
    count: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.count != len(self.points):
            raise ValueError("count must equal the number of points")


@dataclass(frozen=True)
class Estimate:
    """A real number with an error indicator (quadrature residual or MC standard error)."""

    value: float
    error: float
    method: str = ""

    def __float__(self):
        return float(self.value)


def sample_mu(space: SpaceConfig, n: int, seed: int, start: int = 0) -> GaussianSample:
    """Draw ``n`` i.i.d. points from ``N(0, I_d)``.

    Point ``k`` of the result is item ``start + k`` of the stream keyed by
    ``seed``, so overlapping requests agree bit-for-bit.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pts = mu_points(space.d, n, seed, start)
    return GaussianSample(points=pts, seed=seed, count=n)


def mu_points(d: int, n: int, seed: int, start: int = 0) -> np.ndarray:
    out = np.empty((n, d))
    for k in range(n):
        out[k] = streams.stream(seed, start + k, streams.MU).standard_normal(d)
    return out


@functools.lru_cache(maxsize=16)
def _cached_mu(d: int, n: int, seed: int) -> np.ndarray:
    pts = mu_points(d, n, seed)
    pts.setflags(write=False)
    return pts


@functools.lru_cache(maxsize=32)
def hermite_rule(order: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite nodes ``(n, d)`` and weights ``(n,)`` for ``N(0, I_d)``."""
    x, w = hermegauss(order)
    w = w / math.sqrt(2.0 * math.pi)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.ones(1)
    for _ in range(d):
        weights = np.outer(weights, w).ravel()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _check_finite(vals: np.ndarray, nodes: np.ndarray):
    bad = ~np.isfinite(vals)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise EvaluationError(f"integrand is {vals[k]} at point {nodes[k].tolist()}")


def _gh(f, order, d):
    nodes, weights = hermite_rule(order, d)
    vals = np.asarray(f(nodes), dtype=float)
    _check_finite(vals, nodes)
    return float(weights @ vals)


def expect_mu(
    space: SpaceConfig,
    f: Callable[[np.ndarray], np.ndarray],
    points: Sequence[float] = (),
) -> Estimate:
    """Integral of ``f`` against the standard Gaussian measure.

    ``f`` maps an ``(n, d)`` array of points to ``n`` values.  ``points`` are
    breakpoints (kinks, level crossings) honoured by the ``adaptive`` policy
    and ignored otherwise.
    """
    if space.method == "gauss_hermite":
        value = _gh(f, space.order, space.d)
        coarse = _gh(f, max(8, space.order // 2), space.d)
        return Estimate(value, abs(value - coarse), space.method)

    if space.method == "monte_carlo":
        pts = _cached_mu(space.d, space.samples, space.seed)
        vals = np.asarray(f(pts), dtype=float)
        _check_finite(vals, pts)
        n = len(vals)
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(n))
        total = np.abs(vals).sum()
        if total > 0 and np.abs(vals).max() > 0.5 * total:
            warnings.warn(
                "Monte Carlo integral dominated by a single sample; the integrand may not be integrable",
                NonIntegrabilityWarning,
                stacklevel=2,
            )
        return Estimate(mean, se, space.method)

    return _adaptive(f, points, space.tol)


def _adaptive(f, points, tol):
    def g(x):
        if abs(x) > TAIL:
            return 0.0
        v = float(np.asarray(f(np.array([[x]])), dtype=float).reshape(-1)[0])
        if not math.isfinite(v):
            raise EvaluationError(f"integrand is {v} at point [{x}]")
        return v * math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)

    cuts = sorted({float(p) for p in points if math.isfinite(p) and abs(p) < TAIL})
    edges = [-math.inf, *cuts, math.inf]
    value = 0.0
    error = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                v, e = integrate.quad(g, a, b, epsabs=tol * 1e-3, epsrel=tol, limit=400)
            except integrate.IntegrationWarning as exc:
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                v, e = integrate.quad(g, a, b, epsabs=tol * 1e-3, epsrel=tol, limit=400)
                warnings.warn(f"adaptive quadrature on [{a}, {b}]: {exc}", NonIntegrabilityWarning, stacklevel=3)
        value += v
        error += e
    return Estimate(value, error, "adaptive")


@dataclass(frozen=True)
class SobolevNorm:
    l2_sq: float
    grad_l2_sq: float
    norm_sq: float
    error: float = 0.0


def sobolev_norm_d12(space: SpaceConfig, phi) -> SobolevNorm:
    """Squared ``D^1_2`` norm ``int phi^2 dmu + int |grad phi|^2 dmu``."""
    pts = getattr(phi, "kinks", ())
    a = expect_mu(space, lambda x: phi.value(x) ** 2, pts)
    b = expect_mu(space, lambda x: np.sum(phi.grad(x) ** 2, axis=-1), pts)
    l2 = max(a.value, 0.0)
    g2 = max(b.value, 0.0)
    return SobolevNorm(l2, g2, l2 + g2, a.error + b.error)
