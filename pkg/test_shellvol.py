import math

import numpy as np
import pytest

from utils.errors import ArgumentError
from utils.geometry import Domain, LinearBand, QuadraticForm, TightBinding3D
from utils.shellvol import (
    ShellSpec, VolumeEstimate, estimate_ball_shell_volume, estimate_shell_volume,
    fit_scaling_exponent, grid_shell_volume, sample_shell, scan_scales, volumes_table,
)


@pytest.fixture(scope="module")
def saddle2():
    return QuadraticForm([1.0, 1.0], m=1, domain=Domain.box([-1.0, -1.0], [1.0, 1.0]))


@pytest.fixture(scope="module")
def cone3():
    return QuadraticForm([1.0, 1.0, 1.0], m=1, radius=1.0)


def test_shell_covering_the_region_returns_its_volume():
    model = QuadraticForm([1.0, 1.0], m=1, domain=Domain.box([-0.5, -0.5], [0.5, 0.5]))
    estimate = estimate_shell_volume(ShellSpec(model, M=2.0, j=-1), 10000, seed=1)
    assert estimate.value == pytest.approx(1.0)
    assert estimate.stderr == 0.0
    assert estimate.hits == 10000


@pytest.mark.parametrize("kwargs", [
    {'M': 1.0, 'j': -3},
    {'M': 2.0, 'j': 0},
    {'M': 2.0, 'j': -3, 'center': [0.0, 0.0], 'epsilon': 0.5},
    {'M': 2.0, 'j': -3, 'center': [0.0, 0.0]},
])
def test_invalid_shell_specs_are_rejected(saddle2, kwargs):
    with pytest.raises(ArgumentError):
        ShellSpec(saddle2, **kwargs)


def test_estimator_is_unbiased_on_a_known_volume():
    # |k₁| ≤ 1/8 inside [-1, 1]²
    spec = ShellSpec(LinearBand(2), M=2.0, j=-3)
    inside = 0
    for seed in range(100):
        estimate = estimate_shell_volume(spec, 2000, seed=1000 * seed)
        inside += abs(estimate.value - 0.5) <= 3 * estimate.stderr
    assert inside >= 97


def test_saddle_volume_matches_dense_grid(saddle2):
    spec = ShellSpec(saddle2, M=2.0, j=-7)
    oracle = grid_shell_volume(spec)
    estimate = estimate_shell_volume(spec, 1_000_000, seed=7)
    assert oracle.method == 'grid' and oracle.n_samples == 4096 ** 2
    assert abs(estimate.value - oracle.value) <= 3 * estimate.stderr + 1e-4


def test_cone_volume_halves_per_scale(cone3):
    deep = estimate_shell_volume(ShellSpec(cone3, M=2.0, j=-8), 1_000_000, seed=3)
    shallow = estimate_shell_volume(ShellSpec(cone3, M=2.0, j=-7), 1_000_000, seed=4)
    assert deep.value / shallow.value == pytest.approx(0.5, abs=0.05)


def test_grid_volumes_are_monotone_in_scale(saddle2):
    volumes = [grid_shell_volume(ShellSpec(saddle2, M=2.0, j=j), resolution=512).value for j in range(-3, -9, -1)]
    assert all(a >= b for a, b in zip(volumes, volumes[1:]))


def test_sampling_is_independent_of_thread_count(cone3):
    spec = ShellSpec(cone3, M=2.0, j=-4)
    one = estimate_shell_volume(spec, 600_000, seed=5, threads=1)
    many = estimate_shell_volume(spec, 600_000, seed=5, threads=3)
    assert one == many


def test_cone_scaling_has_no_log_correction(cone3):
    estimates = scan_scales(ShellSpec(cone3, M=2.0, j=-1), range(-12, -4), 2_000_000, seed=11)
    fit = fit_scaling_exponent(estimates, form='power', weighted=True)
    assert fit.exponent == pytest.approx(1.0, abs=0.05)
    assert (fit.j_min, fit.j_max) == (-12, -5)


def test_saddle_volume_is_affine_in_scale_index(saddle2):
    estimates = scan_scales(ShellSpec(saddle2, M=2.0, j=-1), range(-12, -4), 2_000_000, seed=13)
    fit = fit_scaling_exponent(estimates, form='log')
    assert fit.params['b'] > 0
    assert fit.relative_residual < 0.05


def test_tight_binding_3d_saddle_energy_scales_linearly():
    model = TightBinding3D(1.0, -2.0)
    estimates = scan_scales(ShellSpec(model, M=2.0, j=-1), range(-10, -4), 4_000_000, seed=17)
    fit = fit_scaling_exponent(estimates, form='power', weighted=True)
    assert fit.exponent == pytest.approx(1.0, abs=0.05)


def test_ball_restricted_cone_constant_is_stable(cone3):
    spec = ShellSpec(cone3, M=2.0, j=-6, center=np.zeros(3), epsilon=0.25)
    constants = []
    for j, estimate in scan_scales(spec, range(-10, -5), 200_000, seed=19):
        constants.append(estimate.value / (2.0 ** j * 2.0 ** (0.25 * j)))
    mean = np.mean(constants)
    assert all(abs(c / mean - 1) <= 0.25 for c in constants)


def test_ball_restricted_saddle_slope_follows_epsilon(saddle2):
    epsilon = 0.25
    spec = ShellSpec(saddle2, M=2.0, j=-7, center=np.zeros(2), epsilon=epsilon)
    estimates = scan_scales(spec, range(-14, -6), 200_000, seed=23)
    fit = fit_scaling_exponent(estimates, form='log')
    assert fit.params['b'] == pytest.approx(2 * (1 - 2 * epsilon) * math.log(2), rel=0.15)


def test_ball_away_from_the_surface_is_empty(cone3):
    spec = ShellSpec(cone3, M=2.0, j=-10, center=np.array([0.5, 0.0, 0.0]), epsilon=0.25)
    estimate = estimate_ball_shell_volume(spec, 50_000, seed=2)
    assert estimate.value == 0.0
    assert estimate.hits == 0
    assert "upper bound" in estimate.note


def test_ball_estimator_requires_restriction(cone3):
    with pytest.raises(ArgumentError):
        estimate_ball_shell_volume(ShellSpec(cone3, M=2.0, j=-3), 100, seed=0)


def test_exact_power_law_is_recovered():
    estimates = [(j, 3.0 * 2.0 ** j) for j in range(-10, -3)]
    fit = fit_scaling_exponent(estimates, form='power', M=2.0)
    assert fit.exponent == pytest.approx(1.0, abs=1e-10)
    assert fit.params['log_C'] == pytest.approx(math.log(3.0))
    assert fit.rss < 1e-20


def test_exact_log_corrected_law_is_recovered():
    estimates = [(j, 2.0 ** j * (2 + 0.5 * abs(j))) for j in range(-10, -3)]
    fit = fit_scaling_exponent(estimates, form='log', M=2.0)
    assert fit.params['a'] == pytest.approx(2.0)
    assert fit.params['b'] == pytest.approx(0.5)


def test_fit_lists_nonpositive_scales():
    estimates = [(-8, 1e-3), (-7, 0.0), (-6, 4e-3), (-5, VolumeEstimate(0.0, 0.0, 100))]
    with pytest.raises(ArgumentError, match=r"\[-7, -5\]"):
        fit_scaling_exponent(estimates)


def test_fit_needs_four_scales():
    with pytest.raises(ArgumentError):
        fit_scaling_exponent([(-3, 1.0), (-2, 2.0), (-1, 4.0)])


def test_shell_sampler_points_lie_in_the_shell(cone3):
    sample = sample_shell(cone3, 2.0 ** -6, 5000, seed=29)
    assert len(sample) == 5000
    assert np.all(np.abs(cone3.energy(sample.points)) <= 2.0 ** -6)
    reference = estimate_shell_volume(ShellSpec(cone3, M=2.0, j=-6), 1_000_000, seed=31)
    combined = math.hypot(sample.volume.stderr, reference.stderr)
    assert abs(sample.volume.value - reference.value) <= 4 * combined


def test_volumes_table_columns(cone3):
    spec = ShellSpec(cone3, M=2.0, j=-3)
    table = volumes_table(spec, [(-3, VolumeEstimate(0.5, 0.01, 1000))], seed=4)
    assert list(table.columns) == ['model_id', 'M', 'j', 'epsilon_ball', 'value', 'stderr', 'n_samples', 'seed']
    assert table.loc[0, 'model_id'] == cone3.model_id


@pytest.mark.parametrize("j", [0, 1])
def test_scales_above_minus_one_are_rejected(j):
    with pytest.raises(ArgumentError, match="≤ -1"):
        ShellSpec(LinearBand(2), M=2.0, j=j)
