import numpy as np
import pytest

from utils.sampling import ShardDraw, draw_until, run_sharded, shard_seeds, shard_sizes


def _uniform_sum(rng, n):
    return rng.random(n).sum()


def _below_half(rng, n):
    x = rng.random(n)
    positions = np.flatnonzero(x < 0.5)
    return ShardDraw(payload=(x[positions],), positions=positions)


def test_shard_layout():
    assert shard_sizes(10, 4) == [4, 4, 2]
    assert shard_sizes(8, 4) == [4, 4]
    assert shard_sizes(0, 4) == []
    assert shard_seeds(7, 3) == [7, 8, 9]


def test_sharded_results_do_not_depend_on_threads():
    serial = run_sharded(_uniform_sum, 10_000, seed=11, threads=1, shard_size=1000)
    parallel = run_sharded(_uniform_sum, 10_000, seed=11, threads=4, shard_size=1000)
    assert serial == parallel
    assert len(serial) == 10
    assert serial[0] == np.random.default_rng(11).random(1000).sum()


@pytest.mark.parametrize("threads", [1, 3])
def test_rejection_stream_stops_at_target(threads):
    result = draw_until(_below_half, 2500, seed=2, threads=threads, shard_size=1000)
    assert result.n_accepted == 2500
    assert not result.exhausted
    assert result.payload[0].shape == (2500,)
    assert np.all(result.payload[0] < 0.5)
    assert 2500 < result.n_drawn <= 6000


def test_rejection_stream_is_thread_invariant():
    a = draw_until(_below_half, 1234, seed=9, threads=1, shard_size=500)
    b = draw_until(_below_half, 1234, seed=9, threads=4, shard_size=500)
    assert a.n_drawn == b.n_drawn
    np.testing.assert_array_equal(a.payload[0], b.payload[0])


def test_rejection_stream_reports_exhaustion():
    result = draw_until(_below_half, 10_000, seed=1, shard_size=100, max_draws=1000)
    assert result.exhausted
    assert result.n_drawn == 1000
    assert result.n_accepted < 10_000
