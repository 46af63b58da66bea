import math

import numpy as np
import pytest

from utils.errors import ArgumentError
from utils.geometry import Domain, LinearBand, QuadraticForm, TightBinding3D, sample_fermi_surface
from utils.overlap import (
    OverlapSpec, default_q_points, epsilon_from_kappa, estimate_I2, estimate_W, exceptional_fraction,
    fit_overlap_exponent, i2_table, scan_eps3, scan_zeta, surface_weights, triple_shell_volume, w_table,
)


@pytest.fixture(scope="module")
def cone3():
    return QuadraticForm([1.0, 1.0, 1.0], m=1, radius=1.0)


@pytest.fixture(scope="module")
def cone_surface(cone3):
    return sample_fermi_surface(cone3, 1500, rng_seed=21, h_surf=1e-2)


@pytest.mark.parametrize("d, kappa, epsilon, final", [
    (3, 1.0, 0.5, 0.1),
    (4, 2.0, 2 / 3, 2 / 9),
])
def test_epsilon_from_kappa(d, kappa, epsilon, final):
    exponent = epsilon_from_kappa(d, kappa)
    assert exponent.epsilon == pytest.approx(epsilon)
    assert exponent.epsilon_final == pytest.approx(final)


def test_vanishing_kappa_gives_vanishing_exponent():
    assert epsilon_from_kappa(3, 1e-12).epsilon_final == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("d, kappa", [(2, 1.0), (3, 0.0), (3, -1.0)])
def test_epsilon_from_kappa_rejects_bad_input(d, kappa):
    with pytest.raises(ArgumentError):
        epsilon_from_kappa(d, kappa)


@pytest.mark.parametrize("kwargs", [
    {'v1': 2},
    {'eps1': 0.0},
    {'eps1': 1.5, 'eps3': 1.5},
    {'eps3': 0.01},
    {'delta': -0.1},
    {'q_points': np.zeros((1, 2))},
])
def test_invalid_overlap_specs_are_rejected(cone3, kwargs):
    params = {'q_points': np.zeros(3), 'eps1': 0.1, 'eps2': 0.1, 'eps3': 0.2, **kwargs}
    with pytest.raises(ArgumentError):
        OverlapSpec(cone3, **params)


def test_bound_applicability_follows_the_gradient_floor(cone3):
    eps = 2.0 ** -8
    assert OverlapSpec(cone3, np.zeros(3), eps, eps, eps, delta=0.5).bound_applicable
    assert not OverlapSpec(cone3, np.zeros(3), eps, eps, eps, delta=0.2).bound_applicable


def test_default_q_points_start_at_the_origin(cone3):
    q = default_q_points(cone3, n_q=8, seed=1)
    assert q.shape == (8, 3)
    assert np.allclose(q[0], 0.0)
    assert np.all(cone3.domain.contains(q[1:]))


def test_all_thresholds_covering_gives_the_product_volume():
    model = LinearBand(2)
    quarter = Domain.box([-0.25, -0.25], [0.25, 0.25])
    spec = OverlapSpec(model, np.zeros(2), 1.0, 1.0, 1.0, delta=0.5, k_region=quarter, p_region=quarter)
    estimate = estimate_I2(spec, 1000, seed=3)
    assert estimate.value == pytest.approx(0.0625)
    assert estimate.stderr == 0.0


def test_unreachable_third_shell_reports_an_upper_bound():
    model = LinearBand(2)
    quarter = Domain.box([-0.25, -0.25], [0.25, 0.25])
    spec = OverlapSpec(model, [[1.9, 0.0]], 0.5, 0.5, 0.5, k_region=quarter, p_region=quarter)
    estimate = estimate_I2(spec, 1000, seed=4)
    assert estimate.value == 0.0
    assert estimate.hits == 0
    assert "upper bound" in estimate.note


def test_cone_overlap_exponent_clears_the_final_bound(cone3):
    eps = 2.0 ** -8
    spec = OverlapSpec(cone3, default_q_points(cone3, n_q=8, seed=2), eps, eps, eps, delta=0.2)
    estimates = scan_eps3(spec, [2.0 ** j for j in range(-8, -2)], 40_000, seed=5)
    assert all(estimate.hits > 0 for _, estimate in estimates)
    fit = fit_overlap_exponent(estimates)
    assert fit.exponent >= epsilon_from_kappa(3, 1.0).epsilon_final - 0.02
    assert fit.j_min == pytest.approx(-8.0) and fit.j_max == pytest.approx(-3.0)


def test_raising_delta_never_increases_the_overlap(cone3):
    eps = 2.0 ** -6
    q = default_q_points(cone3, n_q=4, seed=6)
    values = [estimate_I2(OverlapSpec(cone3, q, eps, eps, 2.0 ** -4, delta=delta), 5000, seed=7).value
              for delta in (0.0, 0.1, 0.2, 0.4)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_triple_volume_is_symmetric_under_relabelling():
    # t = k + p + q turns T(a, b, c; +, +; q) into T(c, b, a; +, −; −q) for an even band
    model = TightBinding3D(1.0, -2.0)
    q = np.array([0.3, 0.7, -0.4])
    direct = triple_shell_volume(model, (0.25, 0.125, 0.5), q, 200_000, seed=8)
    swapped = triple_shell_volume(model, (0.5, 0.125, 0.25), -q, 200_000, seed=9, v1=1, v2=-1)
    assert direct.hits > 0 and swapped.hits > 0
    assert abs(direct.value - swapped.value) <= 4 * math.hypot(direct.stderr, swapped.stderr)


def test_wide_window_returns_the_full_product_measure(cone3, cone_surface):
    weights = surface_weights(cone3, cone_surface, 0.0)
    estimate = estimate_W(cone3, 100.0, np.zeros(3), 0.0, seed=0, samples=cone_surface)
    assert estimate.value == pytest.approx(weights.sum() ** 2, rel=1e-9)


def test_w_never_exceeds_the_product_measure(cone3, cone_surface):
    ceiling = surface_weights(cone3, cone_surface, 0.0).sum() ** 2
    q = default_q_points(cone3, n_q=4, seed=10)
    for _, estimate in scan_zeta(cone3, [2.0 ** j for j in range(-8, 2)], q, 0.0, seed=0, samples=cone_surface):
        assert estimate.value <= ceiling * (1 + 1e-12)


def test_cone_w_decays_at_least_like_the_square_root(cone3, cone_surface):
    q = default_q_points(cone3, n_q=4, seed=11)
    estimates = scan_zeta(cone3, [2.0 ** j for j in range(-10, -3)], q, 0.0, seed=0, samples=cone_surface)
    fit = fit_overlap_exponent(estimates)
    assert 0.4 <= fit.exponent <= 1.1


def test_exceptional_fraction_scales_with_the_flatness_exponent(cone_surface):
    zetas = [2.0 ** j for j in range(-12, -3)]
    fractions = [exceptional_fraction(cone_surface, zeta, kappa=1.0) for zeta in zetas]
    assert all(0 < f < 1 for f in fractions)
    slope = np.polyfit(np.log2(zetas), np.log2(fractions), 1)[0]
    assert slope == pytest.approx(0.5, abs=0.1)


def test_tables(cone3):
    spec = OverlapSpec(cone3, np.zeros(3), 0.1, 0.1, 0.2)
    estimates = scan_eps3(spec, [0.2, 0.4], 2000, seed=12)
    i2 = i2_table(spec, estimates)
    assert list(i2.columns) == ['model_id', 'eps1', 'eps2', 'eps3', 'delta', 'I2', 'stderr']
    assert list(i2['eps3']) == [0.2, 0.4]
    w = w_table(cone3, [(0.5, estimates[0][1])])
    assert list(w.columns) == ['model_id', 'zeta', 'W', 'stderr']
