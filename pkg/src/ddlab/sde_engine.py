"""Euler-Maruyama simulation of distorted Ornstein-Uhlenbeck diffusions.

The dynamics are ``dX = sqrt(2) dW + (-X + 2 grad(phi)/phi (X)) dt`` so that
``phi^2 mu`` is invariant.  One step of the chain is::

    x[k+1] = x[k] + b(x[k]) h + sqrt(2h) xi[k],   xi[k] ~ N(0, I_d)

with the distortion part of ``b`` clipped to norm ``b_max``.  The noise of
path ``i`` comes from its own counter-based stream keyed by ``(seed, i)``,
so any path can be regenerated alone and results do not depend on the
number of lanes.

Large Monte Carlo runs go through :func:`run_ensemble`, which streams over
time and keeps only what the estimators need: final states, log
Radon-Nikodym ledgers for requested pairs of path laws, stopping indices,
clip counts and drift energies.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ddlab import streams
from ddlab.distortion import Distortion, GoodSetFamily, distortion_term, truncate
from ddlab.gaussian_space import GaussianSample, SpaceConfig, mu_points
from ddlab.girsanov import step_increment

BLOCK = 1024
CHUNK = 128
MALA_BURN_IN = 1000
MALA_THIN = 10
MALA_STEP = 0.2
REJECTION_BLOCK = 16
MIN_ACCEPTANCE = 1e-4


class StepSizeWarning(UserWarning):
    """``b_max * h > 1``: a clipped drift step can exceed unit scale."""


class SimulationError(RuntimeError):
    """A path left the finite floating-point range."""


class SamplerError(RuntimeError):
    """The initial-law sampler cannot produce draws efficiently."""


@dataclass(frozen=True)
class SdeConfig:
    """Step size ``h``, horizon ``T``, drift clip ``b_max``, scheme and seed."""

    h: float
    T: float
    b_max: float = 1e4
    scheme: str = "euler_maruyama"
    seed: int = 0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if not self.T > 0 or self.h > self.T * (1 + 1e-12):
            raise ValueError(f"need 0 < h <= T, got h={self.h}, T={self.T}")
        ratio = self.T / self.h
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"T/h must be an integer, got {ratio}")
        if not self.b_max > 0:
            raise ValueError("b_max must be positive")
        if self.scheme != "euler_maruyama":
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if self.b_max * self.h > 1.0:
            warnings.warn(
                f"b_max*h = {self.b_max * self.h:g} > 1: a clipped drift step can exceed unit scale",
                StepSizeWarning,
                stacklevel=3,
            )

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.h))

    def with_horizon(self, T: float) -> "SdeConfig":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StepSizeWarning)
            return SdeConfig(self.h, T, self.b_max, self.scheme, self.seed)


@dataclass(frozen=True)
class PathSample:
    """One discretized trajectory with its noise, clip count and drift-energy ledger."""

    times: np.ndarray
    states: np.ndarray  # (N+1, d)
    noise: np.ndarray  # (N, d)
    seed: int
    path_index: int
    clip_events: int
    drift_energy: np.ndarray  # (N+1,), running sum of |2 grad(phi)/phi|^2 h
    h: float

    @property
    def n_steps(self) -> int:
        return len(self.noise)


@dataclass(frozen=True)
class StoppingRecord:
    """Grid stopping time ``tau = index * h``; ``index is None`` means not stopped."""

    kind: str
    index: int | None
    time: float

    @property
    def stopped(self) -> bool:
        return self.index is not None


@dataclass(frozen=True, eq=False)
class GoodSetStop:
    """First grid time the path is in ``G_m``."""

    family: GoodSetFamily
    m: int

    def hit(self, x: np.ndarray) -> np.ndarray:
        return self.family.member(self.m, x)


@dataclass(frozen=True, eq=False)
class MeasureSpec:
    """A discrete path law: initial law, drift distortion, optional truncation and stop.

    Parameters
    ----------
    distortion
        ``phi``; ``None`` is the unit distortion (Ornstein-Uhlenbeck).
    cfg
        Shared discretization.
    initial
        ``"stationary"`` (``phi^2 mu``), ``"mu"``, or a fixed point in ``R^d``.
    truncation
        Level ``L``: the drift uses ``(1/L) v phi ^ L``.  The initial law stays
        ``phi^2 mu``.
    stop
        Stopped measure: after the first grid time in ``G_m`` the drift is the
        plain ``-x``, so the density against ``Q_mu`` freezes there.
    """

    distortion: Distortion | None
    cfg: SdeConfig
    initial: str | np.ndarray = "stationary"
    truncation: float | None = None
    stop: GoodSetStop | None = None
    space: SpaceConfig | None = None
    label: str = ""

    def __post_init__(self):
        if isinstance(self.initial, str) and self.initial not in ("stationary", "mu"):
            raise ValueError(f"initial must be 'stationary', 'mu' or a point, got {self.initial!r}")
        drift_phi = self.distortion
        if self.truncation is not None and drift_phi is not None:
            drift_phi = truncate(drift_phi, self.truncation)
        object.__setattr__(self, "drift_distortion", drift_phi)

    @property
    def d(self) -> int:
        if self.distortion is not None:
            return self.distortion.d
        if self.space is not None:
            return self.space.d
        if not isinstance(self.initial, str):
            return int(np.size(self.initial))
        return 1

    @property
    def fixed_start(self) -> np.ndarray | None:
        if isinstance(self.initial, str):
            return None
        return np.asarray(self.initial, dtype=float).reshape(self.d)

    def log_density0(self, x0: np.ndarray) -> np.ndarray:
        """Log density of the initial law against ``mu`` (0 for ``mu`` and fixed starts)."""
        phi = self.distortion
        if not isinstance(self.initial, str) or self.initial != "stationary" or phi is None or phi.is_unit:
            return np.zeros(x0.shape[:-1])
        with np.errstate(divide="ignore"):
            return 2.0 * np.log(phi._value(x0))

    def describe(self) -> str:
        if self.label:
            return self.label
        name = "unit()" if self.distortion is None else self.distortion.spec
        extra = []
        if self.truncation is not None:
            extra.append(f"trunc={self.truncation:g}")
        if self.stop is not None:
            extra.append(f"stopped@G_{self.stop.m}")
        return name + (f"[{','.join(extra)}]" if extra else "")


def unit_measure(cfg: SdeConfig, d: int = 1) -> MeasureSpec:
    """``Q_mu``: Ornstein-Uhlenbeck started from ``mu``."""
    return MeasureSpec(None, cfg, initial="mu", space=SpaceConfig.default(d), label="Q_mu")


# ---------------------------------------------------------------------------
# initial laws


def sample_initial(phi: Distortion | None, space: SpaceConfig, n: int, seed: int, start: int = 0) -> GaussianSample:
    """``n`` draws from ``phi^2 mu``.

    Exact when the family provides a map from Gaussian draws, rejection from
    ``mu`` when ``sup phi`` is finite, Metropolis-adjusted Langevin otherwise.
    Draw ``k`` depends only on ``(seed, start + k)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    d = space.d if phi is None else phi.d
    if phi is None or phi.is_unit:
        return GaussianSample(mu_points(d, n, seed, start), seed, n, {"sampler": "exact"})
    if phi.exact_from_normal(np.zeros((1, d))) is not None:
        z = mu_points(d, n, seed, start)
        return GaussianSample(phi.exact_from_normal(z), seed, n, {"sampler": "exact"})
    sup = phi.sup
    if math.isfinite(sup):
        return _rejection(phi, n, seed, start, sup)
    return _mala(phi, n, seed, start)


def _rejection(phi, n, seed, start, sup):
    acceptance = 1.0 / sup**2
    if acceptance < MIN_ACCEPTANCE:
        raise SamplerError(
            f"rejection sampler for {phi.spec} would accept {acceptance:.2e} of proposals (< {MIN_ACCEPTANCE:g})"
        )
    d = phi.d
    out = np.empty((n, d))
    gens = [streams.stream(seed, start + k, streams.INIT) for k in range(n)]
    pending = np.arange(n)
    rounds = 0
    while len(pending):
        rounds += 1
        z = np.empty((len(pending), REJECTION_BLOCK, d))
        u = np.empty((len(pending), REJECTION_BLOCK))
        for j, k in enumerate(pending):
            z[j] = gens[k].standard_normal((REJECTION_BLOCK, d))
            u[j] = gens[k].random(REJECTION_BLOCK)
        ratio = phi._value(z) ** 2 / sup**2
        ok = u < ratio
        any_ok = ok.any(axis=1)
        first = ok.argmax(axis=1)
        done = pending[any_ok]
        out[done] = z[any_ok, first[any_ok]]
        pending = pending[~any_ok]
        if rounds > 10_000:
            raise SamplerError(f"rejection sampler for {phi.spec} did not terminate")
    return GaussianSample(out, seed, n, {"sampler": "rejection", "acceptance": acceptance})


def _mala(phi, n, seed, start):
    d = phi.d
    eps = MALA_STEP
    steps = MALA_BURN_IN + MALA_THIN
    out = np.empty((n, d))
    accepted = 0

    def log_target(x):
        with np.errstate(divide="ignore"):
            return 2.0 * np.log(phi._value(x)) - 0.5 * np.sum(x * x, axis=-1)

    def grad_log_target(x):
        term, _ = distortion_term(phi, x, 1e6)
        return term - x

    for b0 in range(0, n, BLOCK):
        idx = range(b0, min(n, b0 + BLOCK))
        gens = [streams.stream(seed, start + k, streams.MALA) for k in idx]
        x = np.stack([g.standard_normal(d) for g in gens])
        xi = np.stack([g.standard_normal((steps, d)) for g in gens])
        uu = np.stack([g.random(steps) for g in gens])
        lp = log_target(x)
        gx = grad_log_target(x)
        for s in range(steps):
            y = x + eps * gx + math.sqrt(2 * eps) * xi[:, s]
            lpy = log_target(y)
            gy = grad_log_target(y)
            fwd = -np.sum((y - x - eps * gx) ** 2, axis=-1) / (4 * eps)
            bwd = -np.sum((x - y - eps * gy) ** 2, axis=-1) / (4 * eps)
            with np.errstate(invalid="ignore"):
                acc = np.log(uu[:, s]) < (lpy - lp + bwd - fwd)
            x = np.where(acc[:, None], y, x)
            lp = np.where(acc, lpy, lp)
            gx = np.where(acc[:, None], gy, gx)
            accepted += int(acc.sum())
        out[b0 : b0 + len(idx)] = x
    meta = {
        "sampler": "mala",
        "burn_in": MALA_BURN_IN,
        "thin": MALA_THIN,
        "step": eps,
        "acceptance": accepted / (n * steps),
    }
    return GaussianSample(out, seed, n, meta)


# ---------------------------------------------------------------------------
# the streaming engine


@dataclass
class Ensemble:
    """Per-path summaries of a Monte Carlo run under ``law``."""

    law: MeasureSpec
    seed: int
    n_paths: int
    x_final: np.ndarray
    log_rn: np.ndarray  # (n_pairs, n_paths): log d(P1)/d(P2) for each requested pair
    stop_index: np.ndarray  # (n_stops, n_paths); -1 = not stopped
    clip_events: np.ndarray
    drift_energy: np.ndarray
    paths: list = field(default_factory=list)
    sampler_meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.law.cfg.n_steps

    def stopped_before_horizon(self, j: int = 0) -> np.ndarray:
        """``tau < T`` per path for the ``j``-th stopping rule."""
        s = self.stop_index[j]
        return (s >= 0) & (s < self.n_steps)


def _initial_block(law: MeasureSpec, start: int, count: int, seed: int):
    fixed = law.fixed_start
    if fixed is not None:
        return np.tile(fixed, (count, 1)), {"sampler": "fixed"}
    d = law.d
    if law.initial == "mu" or law.distortion is None or law.distortion.is_unit:
        return mu_points(d, count, seed, start), {"sampler": "exact"}
    space = law.space or SpaceConfig.default(d)
    s = sample_initial(law.distortion, space, count, seed, start)
    return np.array(s.points), s.meta


def _simulate_block(law, start, count, seed, pairs, rules, thresholds, record, noise_override=None):
    cfg = law.cfg
    h = cfg.h
    n_steps = cfg.n_steps
    sq = math.sqrt(2.0 * h)
    x, meta = _initial_block(law, start, count, seed)
    d = x.shape[1]

    measures = [law]
    for p in pairs:
        for q in p:
            if not any(q is r for r in measures):
                measures.append(q)
    pos = {id(q): j for j, q in enumerate(measures)}
    all_rules = list(rules)
    for q in measures:
        if q.stop is not None and not any(q.stop is r for r in all_rules):
            all_rules.append(q.stop)
    rpos = {id(r): j for j, r in enumerate(all_rules)}

    hit = np.full((len(all_rules), count), -1, dtype=np.int64)
    e_hit = np.full((len(thresholds), count), -1, dtype=np.int64)
    ledger = np.zeros((len(pairs), count))
    for j, (p1, p2) in enumerate(pairs):
        if p1 is not p2:
            ledger[j] = p1.log_density0(x) - p2.log_density0(x)
    energy = np.zeros(count)
    clips = np.zeros(count, dtype=np.int64)

    if record:
        states = np.empty((count, n_steps + 1, d))
        states[:, 0] = x
        noise_rec = np.empty((count, n_steps, d))
        energy_rec = np.zeros((count, n_steps + 1))

    gens = None
    if noise_override is None:
        gens = [streams.stream(seed, start + i, streams.NOISE) for i in range(count)]
    buf = None

    def update_rules(k, xk):
        for r, rule in enumerate(all_rules):
            open_ = hit[r] < 0
            if open_.any():
                idx = np.flatnonzero(open_)
                inside = rule.hit(xk[idx])
                hit[r, idx[inside]] = k

    for k in range(n_steps):
        update_rules(k, x)
        if noise_override is not None:
            xi = noise_override[:, k]
        else:
            c = k % CHUNK
            if c == 0:
                width = min(CHUNK, n_steps - k)
                buf = np.stack([g.standard_normal((width, d)) for g in gens])
            xi = buf[:, c]

        terms = []
        for q in measures:
            term, clipped = distortion_term(q.drift_distortion, x, cfg.b_max)
            if q.stop is not None:
                frozen = hit[rpos[id(q.stop)]] >= 0
                if frozen.any():
                    term = np.where(frozen[:, None], 0.0, term)
                    clipped = clipped & ~frozen
            terms.append((term, clipped))
        law_term, law_clipped = terms[0]
        clips += law_clipped
        energy = energy + np.sum(law_term * law_term, axis=-1) * h
        for j, thr in enumerate(thresholds):
            newly = (e_hit[j] < 0) & (energy / 4.0 > thr)
            e_hit[j, newly] = k

        x_new = x + (-x + law_term) * h + sq * xi
        if not np.isfinite(x_new).all():
            bad = int(np.flatnonzero(~np.isfinite(x_new).all(axis=1))[0])
            raise SimulationError(f"non-finite state at step {k + 1} of path {start + bad}")
        dx = x_new - x
        for j, (p1, p2) in enumerate(pairs):
            if p1 is p2:
                continue
            b1 = -x + terms[pos[id(p1)]][0]
            b2 = -x + terms[pos[id(p2)]][0]
            ledger[j] = ledger[j] + step_increment(dx, b1, b2, h)
        x = x_new
        if record:
            states[:, k + 1] = x
            noise_rec[:, k] = xi
            energy_rec[:, k + 1] = energy
    update_rules(n_steps, x)

    out = {
        "x": x,
        "ledger": ledger,
        "hit": np.concatenate([hit[: len(rules)], e_hit]) if thresholds else hit[: len(rules)],
        "clips": clips,
        "energy": energy,
        "meta": meta,
    }
    if record:
        out["states"] = states
        out["noise"] = noise_rec
        out["energy_rec"] = energy_rec
    return out


def run_ensemble(
    law: MeasureSpec,
    n_paths: int,
    seed: int | None = None,
    pairs: Sequence[tuple[MeasureSpec, MeasureSpec]] = (),
    stops: Sequence[GoodSetStop] = (),
    energy_thresholds: Sequence[float] = (),
    record: int = 0,
    lanes: int = 1,
) -> Ensemble:
    """Simulate ``n_paths`` paths of ``law`` and collect per-path summaries.

    Parameters
    ----------
    pairs
        ``(P1, P2)`` path laws sharing ``law.cfg``; for each, the exact
        discrete ``log dP1/dP2`` is accumulated along every path.
    stops
        Good-set stopping rules; ``stop_index`` rows follow their order, then
        one row per drift-energy threshold.
    record
        Keep full :class:`PathSample` objects for the first ``record`` paths.
    lanes
        Worker threads.  Output is identical for every value.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    seed = law.cfg.seed if seed is None else seed
    for p in pairs:
        for q in p:
            if q.cfg.h != law.cfg.h or q.cfg.T != law.cfg.T or q.cfg.b_max != law.cfg.b_max:
                raise ValueError("all compared measures must share h, T and b_max")
    blocks = [(s, min(BLOCK, n_paths - s)) for s in range(0, n_paths, BLOCK)]

    def work(b):
        s, c = b
        return _simulate_block(law, s, c, seed, pairs, stops, energy_thresholds, record=s < record)

    if lanes > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=lanes) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]

    paths = []
    for (s, c), part in zip(blocks, parts):
        if "states" not in part:
            continue
        for i in range(min(c, record - s)):
            paths.append(_path_from(part, i, s + i, seed, law.cfg))
    return Ensemble(
        law=law,
        seed=seed,
        n_paths=n_paths,
        x_final=np.concatenate([p["x"] for p in parts]),
        log_rn=np.concatenate([p["ledger"] for p in parts], axis=1),
        stop_index=np.concatenate([p["hit"] for p in parts], axis=1),
        clip_events=np.concatenate([p["clips"] for p in parts]),
        drift_energy=np.concatenate([p["energy"] for p in parts]),
        paths=paths,
        sampler_meta=parts[0]["meta"],
    )


def _path_from(part, i, index, seed, cfg):
    n = cfg.n_steps
    return PathSample(
        times=np.arange(n + 1) * cfg.h,
        states=part["states"][i],
        noise=part["noise"][i],
        seed=seed,
        path_index=index,
        clip_events=int(part["clips"][i]),
        drift_energy=part["energy_rec"][i],
        h=cfg.h,
    )


def simulate_path(
    phi: Distortion | None,
    x0,
    cfg: SdeConfig,
    seed: int | None = None,
    path_index: int = 0,
    noise: np.ndarray | None = None,
) -> PathSample:
    """One Euler-Maruyama path from ``x0``.

    ``noise`` (shape ``(N, d)``) replaces the stream draws, e.g. to force a
    deterministic step.
    """
    seed = cfg.seed if seed is None else seed
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    law = MeasureSpec(phi, cfg, initial=x0)
    if noise is not None:
        noise = np.asarray(noise, dtype=float).reshape(1, cfg.n_steps, x0.size)
    part = _simulate_block(law, path_index, 1, seed, (), (), (), record=True, noise_override=noise)
    return _path_from(part, 0, path_index, seed, cfg)


# ---------------------------------------------------------------------------
# stopping times on recorded paths


def first_hit(path: PathSample, G: GoodSetFamily, m: int) -> StoppingRecord:
    """``tau_m = h * min{k >= 0 : x_k in G_m}`` on the grid."""
    inside = G.member(m, path.states)
    kind = f"hit_good_set({m})"
    if not inside.any():
        return StoppingRecord(kind, None, math.inf)
    k = int(np.argmax(inside))
    return StoppingRecord(kind, k, k * path.h)


def drift_energy_stop(path: PathSample, n: float) -> StoppingRecord:
    """First grid time whose step pushes ``(1/4) int |2 grad(phi)/phi|^2`` above ``n``.

    The stop index is the start of the offending step, so the energy
    accumulated strictly before ``tau`` never exceeds ``n``.
    """
    scaled = path.drift_energy[1:] / 4.0
    over = scaled > n
    kind = f"drift_energy_exceeds({n:g})"
    if not over.any():
        return StoppingRecord(kind, None, math.inf)
    k = int(np.argmax(over))
    return StoppingRecord(kind, k, k * path.h)
