"""Seeded-shard execution shared by every Monte Carlo estimator.

A sample budget is split into fixed-size shards; shard ``i`` draws from
``numpy.random.default_rng(seed + i)``. The shard layout depends only on the
budget and the shard size, so results merged in shard order do not depend on
the number of worker threads.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from config import Config

logger = logging.getLogger(__name__)


def get_rng(seed: int) -> np.random.Generator:
    """Numpy generator for one shard"""
    return np.random.default_rng(seed)


def shard_sizes(n_samples: int, shard_size: int | None = None) -> list[int]:
    """Sizes of the shards covering ``n_samples`` draws"""
    shard_size = shard_size or Config.SHARD_SIZE
    if n_samples <= 0:
        return []
    full, rest = divmod(int(n_samples), shard_size)
    return [shard_size] * full + ([rest] if rest else [])


def shard_seeds(seed: int, n_shards: int) -> list[int]:
    return [seed + i for i in range(n_shards)]


def run_sharded(worker: Callable[[np.random.Generator, int], object], n_samples: int,
                seed: int, threads: int = 1, shard_size: int | None = None) -> list:
    """Run ``worker(rng, n)`` on every shard and return results in shard order"""
    sizes = shard_sizes(n_samples, shard_size)
    seeds = shard_seeds(seed, len(sizes))
    if threads <= 1 or len(sizes) <= 1:
        return [worker(get_rng(s), n) for s, n in zip(seeds, sizes)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda args: worker(get_rng(args[0]), args[1]), zip(seeds, sizes)))


@dataclass(frozen=True)
class ShardDraw:
    """Accepted items of one rejection shard.

    ``positions`` holds the index of each accepted draw inside the shard, so a
    stream truncated mid-shard still knows how many draws it consumed.
    """
    payload: tuple
    positions: np.ndarray


@dataclass(frozen=True)
class DrawResult:
    payload: tuple
    n_drawn: int
    n_accepted: int
    exhausted: bool


def draw_until(worker: Callable[[np.random.Generator, int], ShardDraw], target: int, seed: int,
               threads: int = 1, shard_size: int | None = None,
               max_draws: int = 1 << 31) -> DrawResult:
    """Stream rejection shards until ``target`` items are accepted.

    Shards run in rounds of ``threads``; surplus shards of the last round are
    discarded so the stream is identical for every thread count.
    """
    shard_size = shard_size or Config.SHARD_SIZE
    max_shards = max(1, math.ceil(max_draws / shard_size))
    kept: list[ShardDraw] = []
    accepted = 0
    shard = 0

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while accepted < target and shard < max_shards:
            batch = list(range(shard, min(shard + max(threads, 1), max_shards)))
            if pool is None:
                results = [worker(get_rng(seed + i), shard_size) for i in batch]
            else:
                results = list(pool.map(lambda i: worker(get_rng(seed + i), shard_size), batch))
            shard += len(batch)
            for res in results:
                if accepted >= target:
                    break
                kept.append(res)
                accepted += len(res.positions)
    finally:
        if pool is not None:
            pool.shutdown()

    n_drawn = 0
    pieces: list[Sequence[np.ndarray]] = []
    remaining = target
    for res in kept:
        count = len(res.positions)
        if count >= remaining:
            if remaining > 0:
                n_drawn += int(res.positions[remaining - 1]) + 1
                pieces.append(tuple(np.asarray(p)[:remaining] for p in res.payload))
            else:
                n_drawn += shard_size
            remaining = 0
            break
        n_drawn += shard_size
        pieces.append(tuple(np.asarray(p) for p in res.payload))
        remaining -= count

    exhausted = remaining > 0
    if exhausted:
        logger.warning(f"Rejection stream exhausted after {n_drawn} draws "
                       f"with {target - remaining}/{target} accepted")

    if pieces:
        payload = tuple(np.concatenate(parts, axis=0) for parts in zip(*pieces))
    else:
        payload = ()
    return DrawResult(payload=payload, n_drawn=n_drawn,
                      n_accepted=target - remaining, exhausted=exhausted)
