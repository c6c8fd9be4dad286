"""Exact Radon-Nikodym derivatives between Euler chains.

Both chains share the Gaussian transition ``N(x + b(x) h, 2h I)`` and differ
only in the drift ``b``, so the likelihood ratio of a path is a product of
Gaussian density ratios.  For one transition ``x -> x + dx``::

    log N(x + b1 h, 2h)(x+dx) - log N(x + b2 h, 2h)(x+dx)
        = (|dx - b2 h|^2 - |dx - b1 h|^2) / (4h)
        = (b1 - b2) . (2 dx - (b1 + b2) h) / 4

The second form is what gets evaluated: it is exactly antisymmetric in
``(b1, b2)`` and avoids the cancellation of the squared norms for small ``h``.
Summed over a path it is the Riemann-Ito sum of the continuous exponent
``(1/2) int (b1 - b2) . dX - (1/4) int (|b1|^2 - |b2|^2) dt`` for the
``sqrt(2)`` diffusion, but no time-discretization error enters the density
of the chain itself.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from ddlab.distortion import Distortion, distortion_term

if TYPE_CHECKING:
    from ddlab.sde_engine import MeasureSpec, PathSample, StoppingRecord

ESS_MIN = 10.0


class ReliabilityWarning(RuntimeWarning):
    """Importance weights are too degenerate to trust the estimate."""


def step_increment(dx: np.ndarray, b1: np.ndarray, b2: np.ndarray, h: float) -> np.ndarray:
    """Log ratio of the ``b1`` and ``b2`` Euler transition densities at ``x -> x + dx``."""
    return np.sum((b1 - b2) * (2.0 * dx - (b1 + b2) * h), axis=-1) / 4.0


@dataclass(frozen=True)
class LogDensityLedger:
    """``log dP1/dP2`` along one path, split into initial and per-step terms."""

    init_term: float
    step_terms: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.step_terms)

    def cumulative(self) -> np.ndarray:
        """``total(k)`` for ``k = 0..N``."""
        out = np.empty(self.n_steps + 1)
        acc = self.init_term
        out[0] = acc
        for k, s in enumerate(self.step_terms):
            acc = acc + s
            out[k + 1] = acc
        return out

    def total(self, k: int | None = None) -> float:
        k = self.n_steps if k is None else k
        return float(self.cumulative()[k])

    def stopped_total(self, k_stop: int | None, k: int | None = None) -> float:
        k = self.n_steps if k is None else k
        if k_stop is not None:
            k = min(k, k_stop)
        return self.total(k)


def _drifts_along(path: "PathSample", which, b_max: float) -> np.ndarray:
    """Drift of ``which`` (distortion, ``None`` or MeasureSpec) at every state but the last."""
    from ddlab.sde_engine import MeasureSpec

    x = path.states[:-1]
    if isinstance(which, MeasureSpec):
        term, _ = distortion_term(which.drift_distortion, x, b_max)
        if which.stop is not None:
            inside = which.stop.hit(path.states)
            if inside.any():
                k_star = int(np.argmax(inside))
                term[k_star:] = 0.0
        return -x + term
    term, _ = distortion_term(which, x, b_max)
    return -x + term


def _log_density0(which, x0):
    from ddlab.sde_engine import MeasureSpec

    if isinstance(which, MeasureSpec):
        return float(which.log_density0(x0[None, :])[0])
    if which is None or which.is_unit:
        return 0.0
    with np.errstate(divide="ignore"):
        return float(2.0 * np.log(which.value(x0)))


def log_rn(
    path: "PathSample",
    phi1: "Distortion | MeasureSpec | None",
    phi2: "Distortion | MeasureSpec | None",
    b_max: float,
    include_initial: bool = True,
) -> LogDensityLedger:
    """Ledger of ``log dP1/dP2`` evaluated on ``path``.

    ``phi1``/``phi2`` are distortions (``None`` = unit, stationary start) or
    full :class:`~ddlab.sde_engine.MeasureSpec` objects.  Both drifts use the
    same clip ``b_max`` as the simulation.
    """
    x0 = path.states[0]
    init = _log_density0(phi1, x0) - _log_density0(phi2, x0) if include_initial else 0.0
    if phi1 is phi2:
        return LogDensityLedger(0.0, np.zeros(path.n_steps))
    dx = np.diff(path.states, axis=0)
    b1 = _drifts_along(path, phi1, b_max)
    b2 = _drifts_along(path, phi2, b_max)
    return LogDensityLedger(init, step_increment(dx, b1, b2, path.h))


def stopped_log_rn(ledger: LogDensityLedger, stop: "StoppingRecord") -> float:
    """Ledger frozen at the grid stop index (the horizon if not stopped)."""
    return ledger.stopped_total(stop.index)


@dataclass(frozen=True)
class Reweighted:
    estimate: float
    se: float
    ess: float
    reliable: bool


def effective_sample_size(log_w: np.ndarray) -> float:
    """``(sum w)^2 / sum w^2``, computed stably from log weights."""
    log_w = np.asarray(log_w, dtype=float)
    if not np.isfinite(log_w).any():
        return 0.0
    w = np.exp(log_w - np.max(log_w[np.isfinite(log_w)]))
    s2 = float(np.sum(w * w))
    return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0


def reweight_expectation(values, log_weights, warn: bool = True) -> Reweighted:
    """Importance-sampling estimate ``mean(f * exp(log_w))`` of ``E_P1[f]`` from ``P2`` paths."""
    f = np.asarray(values, dtype=float)
    w = np.exp(np.asarray(log_weights, dtype=float))
    fw = f * w
    n = len(fw)
    est = float(fw.mean())
    se = float(fw.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    ess = effective_sample_size(log_weights)
    reliable = ess >= ESS_MIN
    if warn and not reliable:
        warnings.warn(f"effective sample size {ess:.1f} < {ESS_MIN:g}", ReliabilityWarning, stacklevel=2)
    return Reweighted(est, se, ess, reliable)
