import math

import numpy as np
import pytest

from utils.errors import ArgumentError, DomainError
from utils.geometry import LinearBand, QuadraticForm
from utils.multiscale import (
    Interaction, ScalePropagator, classify_quotients, cutoff_profile, eval_scale_propagator, frequency_derivative,
    holder_probe, partition_sum, probe_function, probe_table, second_order_self_energy,
    self_energy_sequence, self_energy_table, smooth_step, uv_cutoff,
)

Q_ON_SURFACE = [0.0, 0.3, 0.3, 0.0]


@pytest.fixture(scope="module")
def band():
    return LinearBand(2)


@pytest.fixture(scope="module")
def cone3():
    return QuadraticForm([1.0, 1.0, 1.0], m=1, radius=1.0)


def _log_uniform(rng, lo, hi, n):
    return 2.0 ** rng.uniform(math.log2(lo), math.log2(hi), n)


def test_smooth_step_limits():
    values = smooth_step([-1.0, 0.0, 0.5, 1.0, 2.0])
    assert list(values) == [0.0, 0.0, pytest.approx(0.5), 1.0, 1.0]


def test_profile_support_and_plateau():
    x = [0.999 * 2.0 ** -4, 2.0 ** -4, 2.0 ** -2, 1.0, 1.001]
    assert list(cutoff_profile(x, 2.0)) == [0.0, 0.0, 1.0, 0.0, 0.0]
    inside = cutoff_profile(np.linspace(0.07, 0.9, 50), 2.0)
    assert np.all((inside > 0) & (inside <= 1))


def test_propagator_vanishes_above_its_support(band):
    j = -3
    sp = ScalePropagator(band, j)
    assert eval_scale_propagator(sp, 0.0, [2.0 ** (j + 1), 0.1]) == 0
    assert eval_scale_propagator(sp, 0.0, [0.99 * 2.0 ** (j - 2), 0.1]) == 0


def test_propagator_on_the_plateau_is_the_bare_propagator(band):
    j = -3
    sp = ScalePropagator(band, j)
    e = 2.0 ** (j - 1)
    assert eval_scale_propagator(sp, 0.0, [e, 0.1]) == 1 / complex(-e)


def test_zero_denominator_gives_zero(band):
    assert eval_scale_propagator(ScalePropagator(band, -2), 0.0, [0.0, 0.5]) == 0


def test_scale_propagator_rejects_nonnegative_scales(band):
    with pytest.raises(ArgumentError):
        ScalePropagator(band, 0)
    with pytest.raises(ArgumentError):
        ScalePropagator(band, -2, M=1.0)


def test_partition_of_unity_over_propagators(band):
    rng = np.random.default_rng(0)
    r = _log_uniform(rng, 2.0 ** -13, 2.0 ** -2, 10_000)
    theta = rng.uniform(0, 2 * math.pi, len(r))
    k0 = r * np.sin(theta)
    k = np.column_stack([r * np.cos(theta), np.zeros(len(r))])
    z = 1j * k0 - k[:, 0]
    total = sum(eval_scale_propagator(ScalePropagator(band, j), k0, k) for j in range(-12, 0))
    assert np.max(np.abs(total * z - 1)) < 1e-10


def test_uv_cutoff_completes_the_partition():
    z = _log_uniform(np.random.default_rng(1), 2.0 ** -13, 4.0, 5000)
    assert np.allclose(partition_sum(z, 2.0, -12, -1) + uv_cutoff(z, 2.0), 1.0, atol=1e-12)
    assert uv_cutoff(0.5, 2.0) == 1.0
    assert uv_cutoff(0.25, 2.0) == 0.0


def test_at_most_two_scales_and_the_sum_bound(band):
    rng = np.random.default_rng(2)
    r = _log_uniform(rng, 2.0 ** -12, 0.5, 2000)
    k = np.column_stack([r, np.zeros(len(r))])
    terms = np.array([eval_scale_propagator(ScalePropagator(band, j), np.zeros(len(r)), k)
                      for j in range(-12, 0)])
    assert np.all(np.count_nonzero(terms, axis=0) <= 2)
    assert np.all(np.abs(terms).sum(axis=0) <= (1 + 1e-12) / r)


def test_partition_window_is_validated():
    with pytest.raises(ArgumentError):
        partition_sum(0.1, 2.0, -2, 0)


def test_zero_interaction_gives_zero(cone3):
    estimate = second_order_self_energy(cone3, Interaction(0.0), Q_ON_SURFACE, 1000, seed=0, j_floor=-6)
    assert estimate.value == 0
    assert estimate.stderr == 0.0


def test_self_energy_preconditions(cone3):
    with pytest.raises(DomainError):
        second_order_self_energy(cone3, Interaction(), [0.0, 2.0, 0.0, 0.0], 1000, seed=0)
    with pytest.raises(ArgumentError):
        second_order_self_energy(cone3, Interaction(), Q_ON_SURFACE, 1000, seed=0, j_floor=-3)
    with pytest.raises(ArgumentError):
        second_order_self_energy(cone3, Interaction(), [0.3, 0.3, 0.0], 1000, seed=0)
    with pytest.raises(ArgumentError):
        Interaction(1.0, width=0.0)


def test_self_energy_is_reproducible_across_threads(cone3):
    kwargs = dict(j_floor=-5, pool_size=256, shard_size=1000)
    a = second_order_self_energy(cone3, Interaction(), Q_ON_SURFACE, 4000, seed=3, **kwargs)
    b = second_order_self_energy(cone3, Interaction(), Q_ON_SURFACE, 4000, seed=3, threads=3, **kwargs)
    assert a.value == b.value
    assert a.stderr == b.stderr
    assert math.isfinite(a.stderr) and a.stderr > 0


def test_even_model_is_symmetric_under_spatial_reflection(cone3):
    q = np.array(Q_ON_SURFACE)
    minus_q = q * np.array([1.0, -1.0, -1.0, -1.0])
    interaction = Interaction(1.0, width=0.8)
    a = second_order_self_energy(cone3, interaction, q, 20_000, seed=4, j_floor=-6, pool_size=512)
    b = second_order_self_energy(cone3, interaction, minus_q, 20_000, seed=4, j_floor=-6, pool_size=512)
    assert abs(a.value - b.value) <= 3 * math.hypot(a.stderr, b.stderr)


def test_deeper_floors_change_the_value_less(cone3):
    sequence = self_energy_sequence(cone3, Interaction(), Q_ON_SURFACE, [-6, -8, -10], 20_000, seed=5,
                                    pool_size=512)
    assert [e.j_floor for e in sequence.estimates] == [-6, -8, -10]
    assert all(math.isfinite(abs(e.value)) for e in sequence.estimates)
    d1, d2 = sequence.differences
    s1, s2 = sequence.difference_stderrs
    assert d2 <= d1 + 4 * math.hypot(s1, s2)


def test_sequence_needs_two_floors(cone3):
    with pytest.raises(ArgumentError):
        self_energy_sequence(cone3, Interaction(), Q_ON_SURFACE, [-6], 1000, seed=0)


def test_probe_flags_a_step_function():
    probe = probe_function(lambda q: float(q[1] > 0), np.zeros(2), 0.5, 2.0 ** -np.arange(1, 7))
    assert probe.status == 'growth'
    assert probe.quotients[-1] == pytest.approx(2.0 ** 3)


def test_probe_passes_a_smooth_function():
    probe = probe_function(lambda q: math.sin(q[1]) + q[0] ** 2, np.zeros(2), 0.5, 2.0 ** -np.arange(1, 9))
    assert probe.status == 'bounded'
    assert probe.sup_derivative == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("s, displacements", [
    (1.5, 2.0 ** -np.arange(1, 7)),
    (0.5, 2.0 ** -np.arange(1, 3)),
    (0.5, [0.5, 0.2, 0.1, 0.01]),
    (0.5, [0.1, 0.2, 0.4, 0.8]),
])
def test_probe_rejects_bad_displacements(s, displacements):
    with pytest.raises(ArgumentError):
        probe_function(lambda q: 0.0, np.zeros(2), s, displacements)


def test_displacement_beyond_the_domain_is_an_error(cone3):
    with pytest.raises(ArgumentError):
        holder_probe(cone3, Interaction(), Q_ON_SURFACE, 0.5, 4.0 * 2.0 ** -np.arange(0, 6), n_samples=100)


def test_noisy_quotients_are_inconclusive():
    quotients = np.array([1.0, 2.0, 3.0, 4.0, 9.0])
    assert classify_quotients(quotients, np.zeros(5)) == 'growth'
    assert classify_quotients(quotients, quotients) == 'inconclusive'


def test_sunset_stays_holder_near_the_surface(cone3):
    probe = holder_probe(cone3, Interaction(), Q_ON_SURFACE, 0.5, n_samples=20_000, seed=6, j_floor=-6,
                         pool_size=512)
    assert probe.status in ('bounded', 'inconclusive')
    assert len(probe.quotients) == 8
    assert np.all(np.isfinite(probe.quotients))
    assert math.isfinite(probe.sup_value) and math.isfinite(probe.sup_derivative)
    assert "status:" in probe.to_text()
    assert list(probe_table(probe).columns) == ['displacement', 'quotient', 'stderr', 'status']


def test_self_energy_table(cone3):
    estimate = second_order_self_energy(cone3, Interaction(0.0), Q_ON_SURFACE, 100, seed=0)
    table = self_energy_table(cone3, [estimate])
    assert list(table.columns) == ['model_id', 'q0', 'q1', 'q2', 'q3', 'j_floor', 're_value', 'im_value', 'stderr']
    assert table['j_floor'].iloc[0] == -8


def test_frequency_derivative_preconditions(cone3):
    with pytest.raises(ArgumentError):
        frequency_derivative(cone3, Interaction(), Q_ON_SURFACE, 0.0, 1000, seed=0)
    estimate = frequency_derivative(cone3, Interaction(0.0), Q_ON_SURFACE, 1e-3, 1000, seed=0, j_floor=-5)
    assert estimate.value == 0
    assert estimate.note == "zero interaction"


def test_frequency_derivative_uses_common_draws(cone3):
    kwargs = dict(j_floor=-5, pool_size=256, shard_size=1000)
    a = frequency_derivative(cone3, Interaction(), Q_ON_SURFACE, 1e-2, 4000, seed=5, **kwargs)
    b = frequency_derivative(cone3, Interaction(), Q_ON_SURFACE, 1e-2, 4000, seed=5, threads=2, **kwargs)
    assert a.value == b.value
    assert math.isfinite(a.value.real) and math.isfinite(a.value.imag)
    assert math.isfinite(a.stderr)


def test_default_window_reaches_one_only_up_to_the_second_top_scale():
    assert partition_sum(2.0 ** -2, 2.0) == pytest.approx(1.0)
    assert partition_sum(2.0 ** -1, 2.0) == 0.0
    assert 0.0 < partition_sum(2.0 ** -1.5, 2.0) < 1.0
