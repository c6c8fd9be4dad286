"""Capacity upper bounds for sub-level sets and hitting-probability surrogates.

For ``F_n = {phi <= 1/n}`` the test function ``u_n = (1/n) / (phi ∨ 1/n)``
equals one on ``F_n`` and gives

    Cap_phi(F_n) <= int u_n^2 phi^2 dmu + int |grad u_n|^2 phi^2 dmu = I_n + II_n,

    I_n  = (1/n^2) int min(1, n phi)^2 dmu,
    II_n = (1/n^2) int_{phi >= 1/n} |grad phi|^2 / phi^2 dmu.

Both vanish as ``n -> inf`` whenever ``phi`` is in ``D^1_2``:
``I_n <= 1/n^2`` and the ``II_n`` integrand is dominated by ``|grad phi|^2``
and tends to zero pointwise.  The probabilistic counterpart is the chance
that the diffusion visits the good set ``G_m`` before ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ddlab.distortion import Distortion, GoodSetFamily, level_points
from ddlab.gaussian_space import SpaceConfig, expect_mu
from ddlab.sde_engine import GoodSetStop, MeasureSpec, SdeConfig, run_ensemble

__all__ = [
    "CapacityReport",
    "HitEstimate",
    "lemma24_bound",
    "hitting_probability",
    "capacity_decay_experiment",
]


@dataclass(frozen=True)
class HitEstimate:
    m: int
    t: float
    estimate: float
    se: float
    n_paths: int


@dataclass(frozen=True)
class CapacityReport:
    """``I_n``, ``II_n`` and their sum for one level ``n``.

    ``grad_sq`` is ``int |grad phi|^2 dmu``; the two ``ii_*`` flags compare
    ``II_n`` against the dominating bound ``grad_sq`` and against the
    stronger ``grad_sq / n^2``.
    """

    n: float
    I_n: float
    II_n: float
    I_err: float
    II_err: float
    grad_sq: float
    hit_prob: HitEstimate | None = None

    @property
    def bound(self) -> float:
        return self.I_n + self.II_n

    @property
    def i_ok(self) -> bool:
        return self.I_n <= 1.0 / self.n**2

    @property
    def ii_dominated(self) -> bool:
        return self.II_n <= self.grad_sq

    @property
    def ii_scaled_ok(self) -> bool:
        return self.II_n <= self.grad_sq / self.n**2


def lemma24_bound(phi: Distortion, n: float, space: SpaceConfig | None = None) -> CapacityReport:
    """``I_n`` and ``II_n`` for the level ``1/n``.

    ``I_n`` is evaluated as ``(1 - int (1 - min(1, n phi)^2) dmu) / n^2``:
    the deficit integrand is non-negative, so the inequality ``I_n <= 1/n^2``
    survives rounding exactly.
    """
    if not n >= 1:
        raise ValueError(f"n must be >= 1, got {n}")
    space = space or SpaceConfig.default(phi.d)
    cuts = tuple(phi.kinks)
    if phi.d == 1:
        cuts = cuts + tuple(level_points(phi, 1.0 / n))
    inv = 1.0 / n

    def deficit(x):
        return 1.0 - np.minimum(1.0, n * phi.value(x)) ** 2

    def ii(x):
        v = phi.value(x)
        on = v >= inv
        out = np.zeros_like(v)
        if on.any():
            out[on] = np.sum(phi.log_grad(x[on]) ** 2, axis=-1)
        return out

    dfc = expect_mu(space, deficit, cuts)
    I_n = (1.0 - max(0.0, dfc.value)) / (n * n)
    II = expect_mu(space, ii, cuts)
    II_n = max(0.0, II.value) / (n * n)
    gsq = expect_mu(space, lambda x: np.sum(phi.grad(x) ** 2, axis=-1), phi.kinks)
    return CapacityReport(
        n=n,
        I_n=I_n,
        II_n=II_n,
        I_err=dfc.error / (n * n),
        II_err=II.error / (n * n),
        grad_sq=max(0.0, gsq.value),
    )


def hitting_probability(
    phi: Distortion,
    G: GoodSetFamily,
    m: int,
    t: float,
    cfg: SdeConfig,
    n_paths: int,
    seed: int = 0,
    lanes: int = 1,
) -> HitEstimate:
    """Fraction of stationary ``P_phi`` paths whose grid hitting time of ``G_m`` is below ``t``."""
    return hitting_probabilities(phi, G, [m], t, cfg, n_paths, seed, lanes)[0]


def hitting_probabilities(
    phi: Distortion,
    G: GoodSetFamily,
    ms: Sequence[int],
    t: float,
    cfg: SdeConfig,
    n_paths: int,
    seed: int = 0,
    lanes: int = 1,
) -> list[HitEstimate]:
    """:func:`hitting_probability` for several ``m`` on one shared ensemble."""
    cfg_t = cfg.with_horizon(t)
    ens = run_ensemble(
        MeasureSpec(phi, cfg_t), n_paths, seed, stops=[GoodSetStop(G, m) for m in ms], lanes=lanes
    )
    out = []
    for j, m in enumerate(ms):
        hits = ens.stopped_before_horizon(j).astype(float)
        se = float(hits.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else math.inf
        out.append(HitEstimate(int(m), t, float(hits.mean()), se, n_paths))
    return out


def capacity_decay_experiment(
    phi: Distortion,
    n_schedule: Sequence[float],
    space: SpaceConfig | None = None,
) -> list[CapacityReport]:
    """:func:`lemma24_bound` for each ``n`` of the schedule, in order."""
    return [lemma24_bound(phi, n, space) for n in n_schedule]


def non_increasing(values: Sequence[float], tol: float = 0.0) -> bool:
    return all(b <= a + tol for a, b in zip(values, values[1:]))
