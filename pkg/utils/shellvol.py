"""Shell volumes vol{k : |e(k)| ≤ M^j}, optionally restricted to a small ball, and scaling fits across j"""
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from config import Config
from utils.errors import ArgumentError, DomainError
from utils.geometry import DispersionModel, Domain, ball_volume, sample_ball
from utils.sampling import ShardDraw, draw_until, run_sharded

logger = logging.getLogger(__name__)

DEFAULT_GRID = {2: 4096, 3: 512}


@dataclass(frozen=True, eq=False)
class ShellSpec:
    """One shell {|e| ≤ M^j} inside ``region``, optionally cut to |k − center| ≤ M^{εj}"""
    model: DispersionModel
    M: float = Config.SCALE_BASE
    j: int = -1
    center: np.ndarray | None = None
    epsilon: float | None = None
    region: Domain | None = None

    def __post_init__(self):
        if self.M <= 1:
            raise ArgumentError(f"scale base M must exceed 1, got {self.M}")
        if int(self.j) != self.j or self.j > -1:
            raise ArgumentError(f"scale index j must be an integer ≤ -1 (shell volume bounds hold only for M^j < 1), got {self.j}")
        if (self.center is None) != (self.epsilon is None):
            raise ArgumentError("a ball restriction needs both center and epsilon")
        if self.epsilon is not None:
            if not 0 < self.epsilon < 0.5:
                raise ArgumentError(f"ball exponent epsilon must lie in (0, 1/2), got {self.epsilon}")
            center = np.asarray(self.center, dtype=float)
            if center.shape != (self.model.dimension,):
                raise ArgumentError(f"ball center must be a {self.model.dimension}-vector")
            object.__setattr__(self, 'center', center)
        if self.region is None:
            object.__setattr__(self, 'region', self.model.domain)
        elif self.region.dimension != self.model.dimension:
            raise ArgumentError("region dimension does not match the model")

    @property
    def threshold(self) -> float:
        return float(self.M) ** self.j

    @property
    def restricted(self) -> bool:
        return self.epsilon is not None

    @property
    def ball_radius(self) -> float | None:
        if not self.restricted:
            return None
        return float(self.M) ** (self.epsilon * self.j)

    def at_scale(self, j: int) -> "ShellSpec":
        return ShellSpec(self.model, self.M, j, self.center, self.epsilon, self.region)

    def in_shell(self, k: np.ndarray) -> np.ndarray:
        """Shell indicator including region, model domain and ball restriction"""
        inside = np.asarray(self.region.contains(k)) & np.asarray(self.model.domain.contains(k))
        if self.restricted:
            inside &= np.linalg.norm(k - self.center, axis=1) <= self.ball_radius
        hit = np.zeros(len(k), dtype=bool)
        if inside.any():
            hit[inside] = np.abs(self.model.energy(k[inside])) <= self.threshold
        return hit


@dataclass(frozen=True)
class VolumeEstimate:
    value: float
    stderr: float
    n_samples: int
    method: str = 'mc'
    hits: int = 0
    note: str = ''

    def __post_init__(self):
        if self.value < 0:
            raise ArgumentError(f"volume estimate must be nonnegative, got {self.value}")

    @property
    def relative_error(self) -> float:
        return self.stderr / self.value if self.value > 0 else math.inf


def binomial_estimate(volume: float, hits: int, n_samples: int, method: str = 'mc') -> VolumeEstimate:
    """Hit-or-miss estimate volume·p̂ with stderr volume·sqrt(p̂(1−p̂)/n)"""
    if n_samples <= 0:
        raise ArgumentError(f"n_samples must be positive, got {n_samples}")
    p = hits / n_samples
    note = ''
    if hits == 0:
        note = f"no hits; one-sided 95% upper bound {3.0 * volume / n_samples:.3e}"
    return VolumeEstimate(value=volume * p, stderr=volume * math.sqrt(p * (1 - p) / n_samples),
                          n_samples=int(n_samples), method=method, hits=int(hits), note=note)


def _region_volume(region: Domain) -> float:
    volume = region.volume
    if not math.isfinite(volume) or volume <= 0:
        raise DomainError("shell region must have finite positive volume")
    return volume


def estimate_shell_volume(spec: ShellSpec, n_samples: int, seed: int, threads: int = 1) -> VolumeEstimate:
    """Uniform sampling of the region; a hit is a draw inside the shell (and the ball, if any)"""
    volume = _region_volume(spec.region)

    def worker(rng, n):
        return int(np.count_nonzero(spec.in_shell(spec.region.sample(rng, n))))

    hits = sum(run_sharded(worker, n_samples, seed, threads=threads))
    estimate = binomial_estimate(volume, hits, n_samples)
    logger.debug(f"Shell j={spec.j} on {spec.model.model_id}: {hits}/{n_samples} hits")
    return estimate


def estimate_ball_shell_volume(spec: ShellSpec, n_samples: int, seed: int, threads: int = 1) -> VolumeEstimate:
    """Sampling inside the ball |k − q| ≤ M^{εj} only, scaled by the ball volume"""
    if not spec.restricted:
        raise ArgumentError("estimate_ball_shell_volume needs a ball restriction")
    if not spec.model.domain.contains(spec.center) or not spec.region.contains(spec.center):
        raise DomainError(f"ball center {spec.center.tolist()} lies outside the domain")
    radius = spec.ball_radius

    def worker(rng, n):
        return int(np.count_nonzero(spec.in_shell(sample_ball(rng, n, spec.center, radius))))

    hits = sum(run_sharded(worker, n_samples, seed, threads=threads))
    return binomial_estimate(ball_volume(spec.model.dimension, radius), hits, n_samples)


def grid_shell_volume(spec: ShellSpec, resolution: int | None = None, chunk_points: int = 1 << 20) -> VolumeEstimate:
    """Midpoint-rule count of shell cells on a regular grid over the region (or ball) bounding box"""
    d = spec.model.dimension
    resolution = resolution or DEFAULT_GRID.get(d, 64)
    if spec.restricted:
        lower, upper = spec.center - spec.ball_radius, spec.center + spec.ball_radius
    else:
        lower, upper = spec.region.bounding_box()
    axes = [lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution for lo, hi in zip(lower, upper)]
    cell = float(np.prod((upper - lower) / resolution))

    rest = np.stack(np.meshgrid(*axes[1:], indexing='ij'), axis=-1).reshape(-1, d - 1)
    rows = max(1, chunk_points // len(rest))
    count = 0
    for start in range(0, resolution, rows):
        first = axes[0][start:start + rows]
        k = np.concatenate([np.repeat(first, len(rest))[:, None], np.tile(rest, (len(first), 1))], axis=1)
        count += int(np.count_nonzero(spec.in_shell(k)))
    n_cells = resolution ** d
    return VolumeEstimate(value=count * cell, stderr=0.0, n_samples=n_cells, method='grid', hits=count)


@dataclass(frozen=True, eq=False)
class ShellSample:
    """Uniform points of {|e| ≤ threshold} ∩ region and the volume they represent"""
    points: np.ndarray
    volume: VolumeEstimate
    threshold: float
    n_drawn: int
    exhausted: bool = False

    def __len__(self) -> int:
        return len(self.points)


def sample_shell(model: DispersionModel, threshold: float, n_samples: int, seed: int,
                 region: Domain | None = None, threads: int = 1, max_draws: int | None = None) -> ShellSample:
    """Rejection sampler for the shell; the draw count yields the shell-volume estimate"""
    if threshold <= 0:
        raise ArgumentError(f"shell threshold must be positive, got {threshold}")
    region = region or model.domain
    volume = _region_volume(region)
    max_draws = max_draws or max(200 * n_samples, 1 << 24)

    def worker(rng, n):
        k = region.sample(rng, n)
        ok = np.asarray(region.contains(k)) & np.asarray(model.domain.contains(k))
        idx = np.flatnonzero(ok & (np.abs(model.energy(k)) <= threshold))
        return ShardDraw(payload=(k[idx],), positions=idx)

    draw = draw_until(worker, n_samples, seed, threads=threads, max_draws=max_draws)
    points = draw.payload[0] if draw.payload else np.zeros((0, model.dimension))
    return ShellSample(points=points, volume=binomial_estimate(volume, draw.n_accepted, draw.n_drawn),
                       threshold=threshold, n_drawn=draw.n_drawn, exhausted=draw.exhausted)


def scan_scales(spec: ShellSpec, js: Sequence[int], n_samples: int, seed: int,
                threads: int = 1, method: str = 'mc') -> list[tuple[int, VolumeEstimate]]:
    """Estimates at every scale in ``js``; scale i uses seed + i·2¹⁶"""
    results = []
    for i, j in enumerate(js):
        at_j = spec.at_scale(int(j))
        if method == 'grid':
            estimate = grid_shell_volume(at_j)
        elif spec.restricted:
            estimate = estimate_ball_shell_volume(at_j, n_samples, seed + (i << 16), threads=threads)
        else:
            estimate = estimate_shell_volume(at_j, n_samples, seed + (i << 16), threads=threads)
        logger.info(f"Scale j={j}: volume {estimate.value:.6e} ± {estimate.stderr:.2e} ({estimate.hits} hits)")
        results.append((int(j), estimate))
    return results


@dataclass(frozen=True)
class ScalingFit:
    j_min: float
    j_max: float
    form: str
    params: dict
    param_stderr: dict
    rss: float
    relative_residual: float
    n_scales: int
    weighted: bool = False
    residuals: tuple = field(default=())

    @property
    def exponent(self) -> float | None:
        return self.params.get('alpha')


def _unpack(estimates) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    js, values, errors = [], [], []
    for j, estimate in estimates:
        js.append(float(j))
        if isinstance(estimate, VolumeEstimate):
            values.append(estimate.value)
            errors.append(estimate.stderr)
        else:
            values.append(float(estimate))
            errors.append(0.0)
    return np.array(js), np.array(values, dtype=float), np.array(errors, dtype=float)


def fit_scaling_exponent(estimates, form: str = 'power', M: float | None = None,
                         weighted: bool = False) -> ScalingFit:
    """Least squares on log data.

    ``power``: log V = α·j·log M + log C. ``log``: V/M^j = a + b|j|.
    With ``weighted`` the Monte Carlo standard errors set the weights.
    """
    M = M or Config.SCALE_BASE
    if form not in ('power', 'log'):
        raise ArgumentError(f"unknown fit form '{form}'")
    js, values, errors = _unpack(estimates)
    if len(js) < 4:
        raise ArgumentError(f"scaling fit needs at least 4 scales, got {len(js)}")
    bad = js[values <= 0]
    if len(bad):
        raise ArgumentError(f"nonpositive volume at scales [{', '.join(f'{j:g}' for j in bad)}]")

    weights = None
    if form == 'power':
        x, y = js * math.log(M), np.log(values)
        if weighted and np.all(errors > 0):
            weights = values / errors
    else:
        x, y = np.abs(js).astype(float), values / M ** js
        if weighted and np.all(errors > 0):
            weights = 1.0 / (errors / M ** js)

    coeffs, cov = np.polyfit(x, y, 1, w=weights, cov='unscaled' if weights is not None else True)
    residuals = y - np.polyval(coeffs, x)
    rss = float(np.sum(residuals ** 2))
    stderr = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    if form == 'power':
        params = {'alpha': float(coeffs[0]), 'log_C': float(coeffs[1])}
        param_stderr = {'alpha': float(stderr[0]), 'log_C': float(stderr[1])}
        relative = math.sqrt(rss / len(x))
    else:
        params = {'b': float(coeffs[0]), 'a': float(coeffs[1])}
        param_stderr = {'b': float(stderr[0]), 'a': float(stderr[1])}
        relative = math.sqrt(rss / len(x)) / float(np.mean(np.abs(y)))

    return ScalingFit(j_min=float(js.min()), j_max=float(js.max()), form=form, params=params,
                      param_stderr=param_stderr, rss=rss, relative_residual=relative,
                      n_scales=len(js), weighted=weights is not None, residuals=tuple(residuals.tolist()))


def volumes_table(spec: ShellSpec, estimates, seed: int) -> pd.DataFrame:
    """CSV rows for a scale scan"""
    rows = []
    for j, estimate in estimates:
        rows.append({
            'model_id': spec.model.model_id,
            'M': spec.M,
            'j': int(j),
            'epsilon_ball': spec.epsilon,
            'value': estimate.value,
            'stderr': estimate.stderr,
            'n_samples': estimate.n_samples,
            'seed': seed,
        })
    return pd.DataFrame(rows, columns=['model_id', 'M', 'j', 'epsilon_ball', 'value', 'stderr', 'n_samples', 'seed'])
