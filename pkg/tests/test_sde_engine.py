import math

import numpy as np
import pytest
from scipy import stats

from ddlab.distortion import Distortion, GoodSetFamily, Tanh, Tilt, good_sets, tanh_seq, unit
from ddlab.gaussian_space import SpaceConfig, expect_mu
from ddlab.sde_engine import (
    GoodSetStop,
    MeasureSpec,
    SamplerError,
    SdeConfig,
    StepSizeWarning,
    drift_energy_stop,
    first_hit,
    run_ensemble,
    sample_initial,
    simulate_path,
    unit_measure,
)


class WideGaussian(Distortion):
    """``phi^2 mu = N(0, 2)``; unbounded, so the sampler falls back to MALA."""

    family = "wide"

    def __init__(self):
        super().__init__(1, {})

    def _value(self, x):
        return 2 ** -0.25 * np.exp(x[..., 0] ** 2 / 8)

    def _grad(self, x):
        return self._value(x)[..., None] * x / 4


class Tall(Distortion):
    family = "tall"

    def __init__(self):
        super().__init__(1, {})

    @property
    def sup(self):
        return 1e3

    def _value(self, x):
        return np.ones(x.shape[:-1])

    def _grad(self, x):
        return np.zeros_like(x)


def test_config_validation():
    with pytest.raises(ValueError):
        SdeConfig(h=0.3, T=1.0)
    with pytest.raises(ValueError):
        SdeConfig(h=-1, T=1.0)
    with pytest.raises(ValueError):
        SdeConfig(h=0.1, T=1.0, scheme="milstein")
    with pytest.warns(StepSizeWarning):
        SdeConfig(h=0.01, T=1.0, b_max=1e3)
    assert SdeConfig(h=0.01, T=1.0, b_max=100).n_steps == 100


def test_forced_zero_noise_step():
    cfg = SdeConfig(h=0.01, T=0.01, b_max=100)
    p = simulate_path(Tilt(1.0), [0.0], cfg, noise=np.zeros((1, 1)))
    assert p.states[1, 0] == 0.01
    p = simulate_path(unit(), [2.0], cfg, noise=np.zeros((1, 1)))
    assert p.states[1, 0] == 2.0 - 2.0 * 0.01


def test_euler_step_uses_scaled_noise():
    cfg = SdeConfig(h=0.04, T=0.04, b_max=25)
    p = simulate_path(unit(), [0.0], cfg, noise=np.ones((1, 1)))
    assert p.states[1, 0] == pytest.approx(math.sqrt(0.08), rel=1e-15)


def test_ensemble_is_lane_and_size_invariant():
    cfg = SdeConfig(h=0.01, T=0.5, b_max=100)
    law = MeasureSpec(Tanh(1.0), cfg)
    pair = (MeasureSpec(Tanh(1.5), cfg), law)
    a = run_ensemble(law, 2500, seed=9, pairs=[pair], lanes=1)
    b = run_ensemble(law, 2500, seed=9, pairs=[pair], lanes=3)
    c = run_ensemble(law, 7, seed=9, pairs=[pair], lanes=1)
    assert np.array_equal(a.x_final, b.x_final)
    assert np.array_equal(a.log_rn, b.log_rn)
    assert np.array_equal(a.x_final[:7], c.x_final)
    assert np.array_equal(a.log_rn[:, :7], c.log_rn)


def test_recorded_path_matches_single_path():
    cfg = SdeConfig(h=0.01, T=0.3, b_max=100)
    law = MeasureSpec(unit(), cfg, initial=np.array([0.5]))
    ens = run_ensemble(law, 4, seed=3, record=4)
    p = simulate_path(unit(), [0.5], cfg, seed=3, path_index=2)
    assert np.array_equal(ens.paths[2].states, p.states)
    assert np.array_equal(ens.paths[2].noise, p.noise)


def test_seeds_change_paths():
    cfg = SdeConfig(h=0.1, T=1.0, b_max=10)
    a = run_ensemble(unit_measure(cfg), 10, seed=1).x_final
    b = run_ensemble(unit_measure(cfg), 10, seed=2).x_final
    assert not np.array_equal(a, b)


def test_discrete_ou_variance_recursion():
    # v_{k+1} = (1-h)^2 v_k + 2h from v_0 = 1; fixed point 1/(1 - h/2)
    h, T, n = 0.1, 3.0, 20_000
    cfg = SdeConfig(h=h, T=T, b_max=10)
    x = run_ensemble(unit_measure(cfg), n, seed=5).x_final[:, 0]
    v = 1.0
    for _ in range(cfg.n_steps):
        v = (1 - h) ** 2 * v + 2 * h
    assert v == pytest.approx(1 / (1 - h / 2), rel=1e-3)
    se = v * math.sqrt(2 / n)
    assert abs(x.var() - v) < 3.5 * se


def test_tilt_mean_is_preserved():
    cfg = SdeConfig(h=0.05, T=2.0, b_max=20)
    x = run_ensemble(MeasureSpec(Tilt(1.2), cfg), 20_000, seed=6).x_final[:, 0]
    assert abs(x.mean() - 1.2) < 4 * x.std() / math.sqrt(len(x))


def test_rejection_sampler_matches_stationary_moments():
    phi = Tanh(1.0)
    s = sample_initial(phi, SpaceConfig(), 20_000, seed=2)
    assert s.meta["sampler"] == "rejection"
    m2 = expect_mu(SpaceConfig(method="adaptive"), lambda x: x[:, 0] ** 2 * phi.value(x) ** 2, (0.0,)).value
    x2 = s.points[:, 0] ** 2
    assert abs(x2.mean() - m2) < 4 * x2.std() / math.sqrt(len(x2))
    cdf = lambda t: stats.norm.cdf(t)  # noqa: E731
    assert stats.kstest(s.points[:, 0], cdf).pvalue < 1e-6  # genuinely not mu


def test_initial_draws_are_prefix_stable():
    phi = Tanh(1.0)
    a = sample_initial(phi, SpaceConfig(), 50, seed=4).points
    b = sample_initial(phi, SpaceConfig(), 20, seed=4, start=30).points
    assert np.array_equal(a[30:], b)


def test_mala_fallback():
    s = sample_initial(WideGaussian(), SpaceConfig(), 3000, seed=1)
    assert s.meta["sampler"] == "mala"
    assert 0.2 < s.meta["acceptance"] <= 1.0
    assert stats.kstest(s.points[:, 0], stats.norm(scale=math.sqrt(2)).cdf).pvalue > 0.001


def test_rejection_refuses_hopeless_acceptance():
    with pytest.raises(SamplerError):
        sample_initial(Tall(), SpaceConfig(), 10, seed=0)


def test_first_hit_trivial_families():
    cfg = SdeConfig(h=0.1, T=1.0, b_max=10)
    p = simulate_path(unit(), [0.0], cfg)
    r = first_hit(p, GoodSetFamily.everything(), 3)
    assert r.index == 0 and r.time == 0.0
    r = first_hit(p, GoodSetFamily.empty(), 3)
    assert not r.stopped and r.time == math.inf


def test_drift_energy_stop_tilt():
    # |a|^2 h per step for tilt(a); a = 2 gives (1/4) energy = k h
    cfg = SdeConfig(h=0.01, T=1.0, b_max=100)
    p = simulate_path(Tilt(2.0), [0.0], cfg)
    assert drift_energy_stop(p, 0.0).time == 0.0
    assert drift_energy_stop(p, 0.505).time == pytest.approx(0.50)
    assert not drift_energy_stop(p, 2.0).stopped


def test_ensemble_stops_match_first_hit():
    cfg = SdeConfig(h=0.01, T=1.0, b_max=100)
    phi = Tanh(1.0)
    G = good_sets(phi, tanh_seq(1.0))
    ens = run_ensemble(MeasureSpec(phi, cfg), 40, seed=2, stops=[GoodSetStop(G, 3)], record=40)
    for i, p in enumerate(ens.paths):
        r = first_hit(p, G, 3)
        assert ens.stop_index[0, i] == (r.index if r.stopped else -1)


def test_stopped_measure_follows_ou_after_stop():
    cfg = SdeConfig(h=0.01, T=1.0, b_max=100)
    law = MeasureSpec(Tilt(5.0), cfg, initial=np.array([0.0]), stop=GoodSetStop(GoodSetFamily.everything(), 1))
    ou = run_ensemble(MeasureSpec(unit(), cfg, initial=np.array([0.0])), 50, seed=3).x_final
    assert np.array_equal(run_ensemble(law, 50, seed=3).x_final, ou)


def test_clip_events_counted_at_zero():
    cfg = SdeConfig(h=0.01, T=0.01, b_max=100)
    p = simulate_path(Tanh(1.0), [0.0], cfg)
    assert p.clip_events == 1
