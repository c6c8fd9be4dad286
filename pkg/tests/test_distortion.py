import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddlab.distortion import (
    Bump,
    FamilySpecError,
    GoodSetFamily,
    Tanh,
    Tilt,
    d12_distance,
    d12_parts,
    distortion_term,
    drift,
    good_sets,
    level_points,
    parse_family,
    parse_sequence,
    tanh_seq,
    tilt_seq,
    trunc,
    truncate,
    unit,
)
from ddlab.gaussian_space import SpaceConfig, expect_mu, sample_mu

ADAPTIVE = SpaceConfig(method="adaptive", tol=1e-11)
TANH_C = 1.59253741972283142777  # 1/sqrt(E tanh^2 X), 30-digit quadrature


def test_tilt_drift_term_is_constant():
    x = np.linspace(-5, 5, 11)[:, None]
    term, clipped = distortion_term(Tilt(0.7), x, 1e4)
    assert np.allclose(term, 0.7, rtol=0, atol=1e-15)
    assert not clipped.any()


def test_tilt_multidim_direction():
    phi = Tilt([0.3, -0.4], d=2)
    x = sample_mu(SpaceConfig(d=2), 5, 0).points
    assert np.allclose(2 * phi.log_grad(x), [0.3, -0.4])
    with pytest.raises(FamilySpecError):
        Tilt([1.0, 2.0, 3.0], d=2)


def test_tanh_normalization_oracle():
    phi = Tanh(1.0)
    assert phi.c == pytest.approx(TANH_C, rel=1e-13)
    assert expect_mu(ADAPTIVE, lambda x: phi.value(x) ** 2, (0.0,)).value == pytest.approx(1.0, rel=1e-11)


@pytest.mark.parametrize("phi", [Tilt(0.5), Tanh(1.3), Bump(4.0), Bump(math.inf, radius=1.5)], ids=str)
def test_gradient_matches_finite_difference(phi):
    x = np.array([[-2.1], [-0.7], [0.33], [0.9], [1.7]])
    eps = 1e-6
    fd = (phi.value(x + eps) - phi.value(x - eps)) / (2 * eps)
    assert np.allclose(phi.grad(x)[:, 0], fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("phi", [Tilt(0.5), Tanh(0.8), Bump(4.0)], ids=str)
def test_log_grad_is_grad_over_value(phi):
    x = np.array([[-1.5], [-0.2], [0.4], [2.2]])
    assert np.allclose(phi.log_grad(x), phi.grad(x) / phi.value(x)[:, None], rtol=1e-12)


@pytest.mark.parametrize("phi", [Bump(2.0), Bump(16.0), Bump(math.inf), trunc(Tanh(1.0), 4)], ids=str)
def test_families_are_normalized(phi):
    val = expect_mu(ADAPTIVE, lambda x: phi.value(x) ** 2, phi.kinks).value
    assert val == pytest.approx(1.0, rel=1e-9)


def test_bump_limit_vanishes_at_origin_only():
    phi = Bump(math.inf)
    assert phi.value(np.zeros((1, 1)))[0] == 0.0
    assert phi.zero_set == "{0}"
    assert np.all(phi.value(np.array([[0.05], [-0.3], [2.0]])) > 0)
    assert Bump(8.0).zero_set is None


def test_zero_of_distortion_gives_zero_term_and_clip_flag():
    term, clipped = distortion_term(Tanh(1.0), np.zeros((1, 1)), 100.0)
    assert term[0, 0] == 0.0 and clipped[0]


@given(
    st.floats(-6, 6, allow_nan=False),
    st.floats(0.1, 3.0),
    st.floats(1.0, 1e4),
)
def test_distortion_term_is_clipped(x, kappa, b_max):
    term, clipped = distortion_term(Tanh(kappa), np.array([[x]]), b_max)
    assert abs(term[0, 0]) <= b_max
    if not clipped[0]:
        assert term[0, 0] == pytest.approx(4 * kappa / math.sinh(2 * kappa * x), rel=1e-12)


def test_drift_rejects_bad_clip():
    with pytest.raises(ValueError):
        drift(unit(), 0.0)
    b = drift(Tilt(1.0))
    assert np.allclose(b(np.array([[2.0]])), -1.0)


def test_truncate_range_exhaustive():
    pts = sample_mu(SpaceConfig(), 10_000, seed=4).points
    for base in (Tanh(1.0), Tilt(3.0), Bump(math.inf)):
        for m in (1.5, 2, 10):
            v = truncate(base, m).value(pts)
            assert v.min() >= 1 / m and v.max() <= m


def test_truncation_gradient_vanishes_outside_levels():
    psi = truncate(Tanh(1.0), 4)
    x = np.array([[0.01], [0.5]])  # first below 1/4, second inside
    g = psi.grad(x)
    assert g[0, 0] == 0.0
    assert g[1, 0] == Tanh(1.0).grad(x)[1, 0]


def test_level_points_tanh():
    phi = Tanh(1.0)
    pts = sorted(level_points(phi, 0.25))
    expected = math.atanh(0.25 / TANH_C)
    assert pts == pytest.approx([-expected, expected], abs=1e-12)


def test_d12_distance_tilt_closed_form():
    a, b = 0.6, 0.2
    l2, g2, _ = d12_parts(Tilt(a), Tilt(b), SpaceConfig())
    overlap = math.exp(-((a - b) ** 2) / 8)
    assert l2 == pytest.approx(2 - 2 * overlap, rel=1e-10)
    assert g2 == pytest.approx(a * a / 4 + b * b / 4 - a * b / 2 * overlap, rel=1e-10)
    phi = Tilt(a)
    assert d12_distance(phi, phi, SpaceConfig()) == 0.0


def test_sequences_converge_in_d12():
    for seq in (tilt_seq(1.0), tanh_seq(1.0)):
        dist = [d12_distance(seq.term(n), seq.limit, ADAPTIVE) for n in (1, 2, 4, 8)]
        assert all(b < a for a, b in zip(dist, dist[1:]))


def test_good_sets_decrease_on_samples():
    pts = sample_mu(SpaceConfig(), 1000, seed=8).points
    seq = tanh_seq(1.0)
    G = good_sets(seq.limit, seq)
    members = [G.member(m, pts) for m in range(1, 21)]
    for big, small in zip(members, members[1:]):
        assert not np.any(small & ~big)


def test_off_good_set_phi_is_trapped_and_close():
    pts = np.linspace(-6, 6, 20001)[:, None]
    seq = tanh_seq(1.0)
    G = good_sets(seq.limit, seq)
    for m in (2, 5, 10):
        off = ~G.member(m, pts)
        v = seq.limit.value(pts[off])
        assert v.min() >= 1 / m and v.max() <= m
        for j in range(m, 17):
            assert np.max(np.abs(seq.term(j).value(pts[off]) - v)) <= 1 / (j * (j + 2))


def test_trivial_good_set_families():
    x = np.zeros((3, 1))
    assert not GoodSetFamily.empty().member(4, x).any()
    assert GoodSetFamily.everything().member(4, x).all()


@pytest.mark.parametrize(
    "text",
    ["unit()", "tilt(a=0.5)", "tanh(kappa=2)", "bump(n=8)", "bump(n=inf)", "trunc(base=tanh(kappa=1),n=4)"],
)
def test_family_grammar_roundtrip(text):
    phi = parse_family(text)
    again = parse_family(phi.spec)
    x = np.linspace(-3, 3, 7)[:, None]
    assert np.array_equal(phi.value(x), again.value(x))


@pytest.mark.parametrize("text", ["nope()", "tilt(b=1)", "tanh(kappa=1", "trunc(n=3)", "tilt(a=1) extra"])
def test_family_grammar_errors(text):
    with pytest.raises(FamilySpecError):
        parse_family(text)


def test_sequence_grammar():
    seq = parse_sequence("tanh_seq(kappa=1)")
    assert seq.term(3).kappa == pytest.approx(1.125)
    assert parse_sequence("const(base=tilt(a=0.3))").term(5) is parse_sequence("const(base=tilt(a=0.3))").limit
    with pytest.raises(FamilySpecError):
        parse_sequence("tanh(kappa=1)")
