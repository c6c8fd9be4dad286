import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddlab.distortion import Tanh, Tilt, unit
from ddlab.girsanov import (
    LogDensityLedger,
    ReliabilityWarning,
    effective_sample_size,
    log_rn,
    reweight_expectation,
    step_increment,
    stopped_log_rn,
)
from ddlab.sde_engine import MeasureSpec, SdeConfig, StoppingRecord, run_ensemble, simulate_path, unit_measure
from scipy import stats

CFG = SdeConfig(h=0.01, T=0.5, b_max=100)


@given(
    st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(1e-4, 0.5)
)
def test_step_increment_is_gaussian_log_ratio(dx, b1, b2, h):
    direct = (stats.norm.logpdf(dx, b1 * h, math.sqrt(2 * h)) - stats.norm.logpdf(dx, b2 * h, math.sqrt(2 * h)))
    got = step_increment(np.array([dx]), np.array([b1]), np.array([b2]), h)
    assert got == pytest.approx(direct, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_antisymmetry_and_chain_rule_exact(seed):
    p = simulate_path(Tanh(1.0), [0.8], CFG, seed=seed)
    phis = [Tanh(1.0), Tanh(1.4), Tilt(0.3), unit()]
    led = {(i, j): log_rn(p, phis[i], phis[j], CFG.b_max) for i in range(4) for j in range(4)}
    for (i, j), L in led.items():
        back = led[(j, i)]
        assert np.array_equal(L.step_terms, -back.step_terms)
        assert L.init_term == -back.init_term
    # chain rule: per-step terms add exactly for drift-difference factorization
    a, b, c = 0, 1, 2
    lhs = led[(a, c)].step_terms
    rhs = led[(a, b)].step_terms + led[(b, c)].step_terms
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-13)
    assert np.array_equal(led[(1, 1)].step_terms, np.zeros(p.n_steps))


def test_one_step_fixed_start_kl_oracle():
    # KL of N(x0 + b1 h, 2h) from N(x0 + b2 h, 2h) = |b1 - b2|^2 h / 4
    cfg = SdeConfig(h=0.05, T=0.05, b_max=100)
    x0 = np.array([0.4])
    P1 = MeasureSpec(Tilt(1.0), cfg, initial=x0)
    P2 = MeasureSpec(unit(), cfg, initial=x0)
    ens = run_ensemble(P1, 200_000, seed=1, pairs=[(P1, P2)])
    kl = ens.log_rn[0]
    assert abs(kl.mean() - 1.0 * 0.05 / 4) < 3 * kl.std() / math.sqrt(len(kl))


def test_ensemble_ledger_matches_single_path():
    P1 = MeasureSpec(Tanh(1.3), CFG)
    P2 = MeasureSpec(Tanh(1.0), CFG)
    ens = run_ensemble(P2, 6, seed=4, pairs=[(P1, P2)], record=6)
    for i, p in enumerate(ens.paths):
        assert log_rn(p, P1, P2, CFG.b_max).total() == ens.log_rn[0, i]


def test_stationary_initial_term():
    p = simulate_path(Tilt(0.5), [0.3], CFG)
    L = log_rn(p, Tilt(0.5), None, CFG.b_max)
    assert L.init_term == pytest.approx(2 * (0.5 * 0.3 / 2 - 0.25 / 4), rel=1e-14)
    assert log_rn(p, Tilt(0.5), None, CFG.b_max, include_initial=False).init_term == 0.0


def test_normalization_small():
    ens = run_ensemble(unit_measure(CFG), 20_000, seed=2, pairs=[(MeasureSpec(Tilt(0.5), CFG), unit_measure(CFG))])
    w = np.exp(ens.log_rn[0])
    assert abs(w.mean() - 1) < 3 * w.std() / math.sqrt(len(w))


def test_ledger_totals_and_stopping():
    L = LogDensityLedger(0.5, np.array([1.0, -2.0, 0.25]))
    assert np.array_equal(L.cumulative(), [0.5, 1.5, -0.5, -0.25])
    assert L.total() == -0.25 and L.total(1) == 1.5
    assert stopped_log_rn(L, StoppingRecord("x", 2, 0.2)) == -0.5
    assert stopped_log_rn(L, StoppingRecord("x", None, math.inf)) == -0.25


def test_ess_and_reweighting():
    assert effective_sample_size(np.zeros(50)) == pytest.approx(50)
    lw = np.full(100, -np.inf)
    lw[0] = 0.0
    assert effective_sample_size(lw) == pytest.approx(1.0)
    with pytest.warns(ReliabilityWarning):
        r = reweight_expectation(np.ones(100), lw)
    assert not r.reliable
    r = reweight_expectation(np.arange(4.0), np.zeros(4), warn=False)
    assert r.estimate == 1.5 and r.reliable is False  # 4 samples < ESS floor
