"""Total-variation and Kullback-Leibler estimates between discrete path laws.

Weights are exact discrete Radon-Nikodym derivatives, so

* ``TV(P1, P2) = 1/2 E_ref |w1 - w2|`` with ``w_i = dP_i/dref`` for any
  common reference (the default reference is ``Q_mu``; passing one of the
  compared laws as the reference gives the lowest variance);
* ``KL(P1 || P2) = E_P1 [log dP1/dP2]``.

Every inequality is checked with a 3-standard-error allowance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ddlab.distortion import (
    DistortionSequence,
    GoodSetFamily,
    d12_distance,
    d12_parts,
    truncate,
)
from ddlab.gaussian_space import SpaceConfig, expect_mu, mu_points
from ddlab.girsanov import ESS_MIN, effective_sample_size
from ddlab.sde_engine import GoodSetStop, MeasureSpec, SdeConfig, run_ensemble, unit_measure

__all__ = [
    "MeasureSpec",
    "DivergenceReport",
    "BoundChain",
    "estimate_tv",
    "estimate_kl",
    "compare",
    "pinsker_holds",
    "theorem_bound_chain",
    "convergence_experiment",
]

Z = 3.0  # confidence multiplier for every inequality check


class BoundChainError(RuntimeError):
    """The bound chain cannot be evaluated (e.g. no samples land off ``G_m``)."""


@dataclass
class BoundChain:
    """Decomposed terms of the localization bound for one ``(k, m)``."""

    k: int
    m: int
    lhs: float
    lhs_se: float
    tv_tilde: float
    tv_tilde_se: float
    hit_prob: float
    hit_se: float
    rhs_total: float
    kl_stopped: float
    kl_stopped_se: float
    sobolev_term: float
    uniform_term: float
    kl_bound: float
    initial_kl: float
    sup_deviation: float
    truncation_agreement: bool
    chain_ok: bool
    pinsker_stopped_ok: bool
    kl_bound_ok: bool

    @property
    def ok(self) -> bool:
        return self.chain_ok and self.pinsker_stopped_ok and self.kl_bound_ok


@dataclass
class DivergenceReport:
    tv_hat: float
    tv_se: float
    kl_hat: float = math.nan
    kl_se: float = math.nan
    n_paths: int = 0
    h: float = math.nan
    t: float = math.nan
    pinsker_ok: bool | None = None
    components: BoundChain | None = None
    ess: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def pinsker_holds(tv, tv_se, kl, kl_se) -> bool:
    """``tv^2 <= 2 kl + 3 * propagated se`` (delta method on ``tv^2 - 2 kl``)."""
    se = math.hypot(2.0 * tv * tv_se, 2.0 * kl_se)
    return tv * tv <= 2.0 * kl + Z * se


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    n = len(v)
    return float(v.mean()), (float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf)


def _ess_check(report, name, log_w):
    ess = effective_sample_size(log_w)
    report.ess[name] = ess
    if ess < ESS_MIN:
        report.warnings.append(f"effective sample size of {name} weights is {ess:.1f} (< {ESS_MIN:g})")


def _tv_from(ensemble, idx1, idx2, report):
    l1 = ensemble.log_rn[idx1] if idx1 is not None else np.zeros(ensemble.n_paths)
    l2 = ensemble.log_rn[idx2] if idx2 is not None else np.zeros(ensemble.n_paths)
    if idx1 is not None:
        _ess_check(report, "P1", l1)
    if idx2 is not None:
        _ess_check(report, "P2", l2)
    diff = np.abs(np.exp(l1) - np.exp(l2))
    tv, se = _mean_se(diff)
    return 0.5 * tv, 0.5 * se


def estimate_tv(
    p1: MeasureSpec,
    p2: MeasureSpec,
    ref: MeasureSpec | None = None,
    n_paths: int = 10_000,
    seed: int = 0,
    lanes: int = 1,
) -> DivergenceReport:
    """``1/2 E_ref |dP1/dref - dP2/dref|`` over ``n_paths`` reference paths."""
    cfg = p1.cfg
    ref = ref if ref is not None else unit_measure(cfg, p1.d)
    pairs = []
    idx = []
    for p in (p1, p2):
        if p is ref:
            idx.append(None)
        else:
            idx.append(len(pairs))
            pairs.append((p, ref))
    report = DivergenceReport(math.nan, math.nan, n_paths=n_paths, h=cfg.h, t=cfg.T)
    if p1 is p2:
        report.tv_hat, report.tv_se = 0.0, 0.0
        return report
    ens = run_ensemble(ref, n_paths, seed, pairs=pairs, lanes=lanes)
    report.tv_hat, report.tv_se = _tv_from(ens, idx[0], idx[1], report)
    return report


def estimate_kl(
    p1: MeasureSpec,
    p2: MeasureSpec,
    n_paths: int = 10_000,
    seed: int = 0,
    lanes: int = 1,
) -> DivergenceReport:
    """``E_P1 [log dP1/dP2]`` over ``n_paths`` paths of ``P1``."""
    cfg = p1.cfg
    report = DivergenceReport(math.nan, math.nan, n_paths=n_paths, h=cfg.h, t=cfg.T)
    if p1 is p2:
        report.kl_hat, report.kl_se = 0.0, 0.0
        return report
    ens = run_ensemble(p1, n_paths, seed, pairs=[(p1, p2)], lanes=lanes)
    report.kl_hat, report.kl_se = _mean_se(ens.log_rn[0])
    return report


def compare(
    p1: MeasureSpec,
    p2: MeasureSpec,
    ref: MeasureSpec | None = None,
    n_paths: int = 10_000,
    seed: int = 0,
    lanes: int = 1,
) -> DivergenceReport:
    """TV (under ``ref``, default ``p2``) and KL (under ``p1``) plus the Pinsker check."""
    ref = p2 if ref is None else ref
    tv = estimate_tv(p1, p2, ref, n_paths, seed, lanes)
    kl = estimate_kl(p1, p2, n_paths, seed, lanes)
    tv.kl_hat, tv.kl_se = kl.kl_hat, kl.kl_se
    tv.pinsker_ok = pinsker_holds(tv.tv_hat, tv.tv_se, tv.kl_hat, tv.kl_se)
    return tv


# ---------------------------------------------------------------------------
# the localization bound chain


def _sup_deviation_off(G, m, phi_k, phi, d, n_samples, seed):
    pts = [mu_points(d, n_samples, seed)]
    if d == 1:
        pts.append(np.linspace(-8.0, 8.0, 16001)[:, None])
    pts = np.concatenate(pts)
    keep = ~G.member(m, pts)
    if not keep.any():
        raise BoundChainError(f"no sample points fall outside G_{m}; cannot estimate the uniform deviation")
    inside = pts[keep]
    return float(np.max(np.abs(phi_k.value(inside) - phi.value(inside)))), inside


def _initial_kl(phi_k, phi, space):
    """``KL(phi_k^2 mu || phi^2 mu)``, the part of the stopped-pair KL fixed at time 0."""
    if phi_k is phi:
        return 0.0

    def f(x):
        a = phi_k.value(x) ** 2
        b = phi.value(x) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(a > 0, a * np.log(a / b), 0.0)

    return float(expect_mu(space, f, tuple(phi_k.kinks) + tuple(phi.kinks)).value)


def _truncation_agrees(phi, level, pts):
    psi = truncate(phi, level)
    return bool(
        np.array_equal(psi.value(pts), phi.value(pts)) and np.array_equal(psi.grad(pts), phi.grad(pts))
    )


def theorem_bound_chain(
    seq: DistortionSequence,
    k: int,
    G: GoodSetFamily,
    m: int,
    t: float,
    cfg: SdeConfig,
    n_paths: int,
    seed: int = 0,
    space: SpaceConfig | None = None,
    sup_samples: int = 100_000,
    lanes: int = 1,
) -> DivergenceReport:
    """Evaluate every term of the localization bound for ``phi_k`` against the limit.

    * ``lhs = TV(P_{phi_k}, P_phi)`` on ``[0, t]``;
    * ``tv_tilde`` between the stopped laws that follow the ``(m+2)``-truncated
      drifts until the first grid time in ``G_m`` and plain OU afterwards;
    * ``hit_prob = P_phi(tau_m < t)``;
    * ``kl_bound = t ||grad phi_k - grad phi||^2 + t m^2 ||grad phi||^2 sup_{G_m^c} |phi_k - phi|^2``,
      the sup being a maximum over ``mu`` samples (and a grid when ``d = 1``);
    * ``initial_kl = KL(phi_k^2 mu || phi^2 mu)``, reported separately: both
      stopped laws start from their stationary laws, so this time-zero term is
      part of the stopped-pair KL but not of ``kl_bound``.

    The checks ``lhs <= 3 tv_tilde + 4 hit_prob``, Pinsker for the stopped pair
    and ``KL(stopped pair) <= kl_bound`` are each made with a 3-se allowance.
    """
    cfg_t = cfg.with_horizon(t)
    phi = seq.limit
    phi_k = seq.term(k)
    d = phi.d
    space = space or SpaceConfig.default(d)
    level = m + 2
    stop = GoodSetStop(G, m)

    P = MeasureSpec(phi, cfg_t, space=space, label="P_phi")
    Pk = MeasureSpec(phi_k, cfg_t, space=space, label=f"P_phi_{k}")
    base = run_ensemble(P, n_paths, seed, pairs=[(Pk, P)], stops=[stop], lanes=lanes)
    report = DivergenceReport(math.nan, math.nan, n_paths=n_paths, h=cfg.h, t=t)
    lhs, lhs_se = _tv_from(base, 0, None, report)
    hit, hit_se = _mean_se(base.stopped_before_horizon(0).astype(float))

    unstopped_kl = estimate_kl(Pk, P, n_paths, seed, lanes)

    Pt = MeasureSpec(phi, cfg_t, truncation=level, stop=stop, space=space, label=f"P~({level})")
    Ptk = MeasureSpec(phi_k, cfg_t, truncation=level, stop=stop, space=space, label=f"P~({k},{level})")
    stopped = run_ensemble(Pt, n_paths, seed, pairs=[(Ptk, Pt)], record=32, lanes=lanes)
    tt, tt_se = _tv_from(stopped, 0, None, DivergenceReport(0, 0))
    kl_run = run_ensemble(Ptk, n_paths, seed, pairs=[(Ptk, Pt)], lanes=lanes)
    kl_s, kl_s_se = _mean_se(kl_run.log_rn[0])

    _, grad_diff, _ = d12_parts(phi_k, phi, space)
    grad_sq = expect_mu(space, lambda x: np.sum(phi.grad(x) ** 2, axis=-1), phi.kinks).value
    sup_dev, off_pts = _sup_deviation_off(G, m, phi_k, phi, d, sup_samples, seed)
    initial_kl = _initial_kl(phi_k, phi, space)
    sobolev_term = t * grad_diff
    uniform_term = t * m * m * grad_sq * sup_dev**2
    kl_bound = sobolev_term + uniform_term

    pre_stop = [off_pts]
    for path in stopped.paths:
        inside = G.member(m, path.states)
        k_star = int(np.argmax(inside)) if inside.any() else len(inside)
        pre_stop.append(path.states[:k_star])
    pre_stop = np.concatenate(pre_stop)
    agreement = _truncation_agrees(phi, level, pre_stop) and _truncation_agrees(phi_k, level, pre_stop)

    rhs = 3.0 * tt + 4.0 * hit
    chain_ok = lhs <= rhs + Z * math.sqrt(lhs_se**2 + 9 * tt_se**2 + 16 * hit_se**2)
    comp = BoundChain(
        k=k,
        m=m,
        lhs=lhs,
        lhs_se=lhs_se,
        tv_tilde=tt,
        tv_tilde_se=tt_se,
        hit_prob=hit,
        hit_se=hit_se,
        rhs_total=rhs,
        kl_stopped=kl_s,
        kl_stopped_se=kl_s_se,
        sobolev_term=sobolev_term,
        uniform_term=uniform_term,
        kl_bound=kl_bound,
        initial_kl=initial_kl,
        sup_deviation=sup_dev,
        truncation_agreement=agreement,
        chain_ok=chain_ok,
        pinsker_stopped_ok=pinsker_holds(tt, tt_se, kl_s, kl_s_se),
        kl_bound_ok=kl_s <= kl_bound + Z * kl_s_se,
    )
    report.tv_hat, report.tv_se = lhs, lhs_se
    report.kl_hat, report.kl_se = unstopped_kl.kl_hat, unstopped_kl.kl_se
    report.pinsker_ok = pinsker_holds(lhs, lhs_se, report.kl_hat, report.kl_se)
    report.components = comp
    if not agreement:
        report.warnings.append(
            f"truncation at level {level} changes phi or phi_{k} off G_{m}; k is not large enough for this m"
        )
    return report


# ---------------------------------------------------------------------------
# convergence along a sequence


@dataclass
class ConvergenceRow:
    n: int
    d12: float
    tv_hat: float
    tv_se: float
    kl_hat: float
    kl_se: float
    pinsker_ok: bool


@dataclass
class ConvergenceTable:
    rows: list
    warnings: list = field(default_factory=list)

    @property
    def monotone_ok(self) -> bool:
        return non_increasing_within(
            [r.tv_hat for r in self.rows], [r.tv_se for r in self.rows]
        )

    @property
    def pinsker_ok(self) -> bool:
        return all(r.pinsker_ok for r in self.rows)


def non_increasing_within(values: Sequence[float], ses: Sequence[float], z: float = Z) -> bool:
    """Each value is at most its predecessor plus ``z`` combined standard errors."""
    return all(
        b <= a + z * math.hypot(sa, sb) for a, b, sa, sb in zip(values, values[1:], ses, ses[1:])
    )


def convergence_experiment(
    seq: DistortionSequence,
    t: float,
    cfg: SdeConfig,
    n_paths: int,
    schedule: Sequence[int],
    seed: int = 0,
    space: SpaceConfig | None = None,
    lanes: int = 1,
) -> ConvergenceTable:
    """``TV(P_{phi_n}, P_phi)`` and ``KL`` for each ``n`` in ``schedule``.

    All TV estimates share one ensemble of ``P_phi`` paths (common random
    numbers); each KL uses paths of ``P_{phi_n}``.
    """
    cfg_t = cfg.with_horizon(t)
    phi = seq.limit
    space = space or SpaceConfig.default(phi.d)
    P = MeasureSpec(phi, cfg_t, space=space, label="P_phi")
    terms = [MeasureSpec(seq.term(n), cfg_t, space=space, label=f"P_phi_{n}") for n in schedule]
    ens = run_ensemble(P, n_paths, seed, pairs=[(Pn, P) for Pn in terms], lanes=lanes)
    table = ConvergenceTable(rows=[])
    for j, (n, Pn) in enumerate(zip(schedule, terms)):
        rep = DivergenceReport(math.nan, math.nan)
        tv, tv_se = _tv_from(ens, j, None, rep)
        table.warnings.extend(f"n={n}: {w}" for w in rep.warnings)
        kl = estimate_kl(Pn, P, n_paths, seed, lanes)
        dist = d12_distance(seq.term(n), phi, space)
        table.rows.append(
            ConvergenceRow(n, dist, tv, tv_se, kl.kl_hat, kl.kl_se, pinsker_holds(tv, tv_se, kl.kl_hat, kl.kl_se))
        )
    return table
