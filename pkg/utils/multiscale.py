"""Smooth scale decomposition of the propagator and a Monte Carlo probe of the second-order self-energy.

The cutoff profile is built from the C^∞ step σ(v) = s(v) / (s(v) + s(1 − v)),
s(v) = exp(−1/v) for v > 0. With u = log_M |z| − j the single-scale weight is
σ(1 − |u + 1|): it vanishes for |z| outside [M^{j−2}, M^j], equals one at
|z| = M^{j−1}, and the weights of consecutive scales telescope to
σ(log_M|z| − j_min + 2) − σ(log_M|z| + 2).
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from config import Config
from utils.errors import ArgumentError, ConvergenceError, DomainError
from utils.geometry import DispersionModel
from utils.sampling import run_sharded
from utils.shellvol import ShellSample, sample_shell

logger = logging.getLogger(__name__)

SCALE_SEED_OFFSET = 1 << 16
PAIR_SEED_OFFSET = 1 << 24
GROWTH_FACTOR = 2.0
GROWTH_OCTAVES = 4


def smooth_step(v):
    """C^∞ step, 0 for v ≤ 0 and 1 for v ≥ 1"""
    v = np.asarray(v, dtype=float)
    with np.errstate(divide='ignore', over='ignore'):
        a = np.where(v > 0, np.exp(-1.0 / np.where(v > 0, v, 1.0)), 0.0)
        b = np.where(v < 1, np.exp(-1.0 / np.where(v < 1, 1.0 - v, 1.0)), 0.0)
    return a / (a + b)


def _base(M):
    M = Config.SCALE_BASE if M is None else float(M)
    if M <= 1:
        raise ArgumentError(f"scale base must exceed 1, got {M}")
    return M


def cutoff_profile(x, M: float | None = None):
    """f(x) with x = M^{−2j}|ik₀ − e(k)|²; supported on [M⁻⁴, 1], plateau at x = M⁻²"""
    M = _base(M)
    x = np.asarray(x, dtype=float)
    positive = x > 0
    u = np.log(np.where(positive, x, 1.0)) / (2.0 * math.log(M))
    return np.where(positive, smooth_step(1.0 - np.abs(u + 1.0)), 0.0)


def partition_sum(abs_z, M: float | None = None, j_min: int = -12, j_max: int = -1):
    """Σ_{j_min ≤ j ≤ j_max} f(M^{−2j}|z|²); equals 1 for |z| ∈ [M^{j_min−1}, M^{j_max−1}].

    Scale j covers |z| ∈ [M^{j−2}, M^j], so with the default j_max = −1 the sum
    is 1 only up to |z| = M⁻² and falls to 0 at M⁻¹. The weight above M^{j_max−1}
    is ``uv_cutoff(abs_z, M)``.
    """
    M = _base(M)
    if not j_min <= j_max < 0:
        raise ArgumentError(f"need j_min ≤ j_max < 0, got {j_min}, {j_max}")
    abs_z = np.asarray(abs_z, dtype=float)
    total = np.zeros_like(abs_z)
    for j in range(j_min, j_max + 1):
        total = total + cutoff_profile(M ** (-2 * j) * abs_z ** 2, M)
    return total


def uv_cutoff(abs_z, M: float | None = None):
    """Weight left above the top scale; partition_sum + uv_cutoff = 1 for |z| ≥ M^{j_min−1}"""
    M = _base(M)
    abs_z = np.asarray(abs_z, dtype=float)
    x = np.log(np.where(abs_z > 0, abs_z, 1.0)) / math.log(M)
    return np.where(abs_z > 0, smooth_step(x + 2.0), 0.0)


def _propagator(model: DispersionModel, k0, k, M: float, j_min: int, j_max: int = -1):
    z = 1j * np.asarray(k0, dtype=float) - model.energy(k)
    abs_z = np.abs(z)
    weight = partition_sum(abs_z, M, j_min, j_max)
    safe = np.where(abs_z > 0, z, 1.0)
    return np.where(weight > 0, weight / safe, 0.0 + 0.0j)


@dataclass(frozen=True)
class ScalePropagator:
    """C_j(k₀, k) = f(M^{−2j}|ik₀ − e(k)|²) / (ik₀ − e(k))"""
    model: DispersionModel
    j: int
    M: float = Config.SCALE_BASE

    def __post_init__(self):
        if self.j >= 0:
            raise ArgumentError(f"scale j must be negative, got {self.j}")
        _base(self.M)

    @property
    def support(self) -> tuple[float, float]:
        return self.M ** (self.j - 2), self.M ** self.j


def eval_scale_propagator(sp: ScalePropagator, k0, k):
    """Single-scale propagator at (k₀, k); exactly zero outside the support annulus"""
    out = _propagator(sp.model, k0, k, sp.M, sp.j, sp.j)
    return complex(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Interaction:
    """Even interaction kernel: constant, or g·exp(−(|k|² + |p|²)/(2w²))"""
    strength: float = 1.0
    width: float | None = None

    def __post_init__(self):
        if self.width is not None and self.width <= 0:
            raise ArgumentError(f"interaction width must be positive, got {self.width}")

    @property
    def is_zero(self) -> bool:
        return self.strength == 0

    def value(self, k: np.ndarray, p: np.ndarray) -> np.ndarray:
        if self.width is None:
            return np.full(len(k), float(self.strength))
        r2 = np.sum(k ** 2, axis=1) + np.sum(p ** 2, axis=1)
        return self.strength * np.exp(-r2 / (2.0 * self.width ** 2))


@dataclass(frozen=True)
class SelfEnergyEstimate:
    value: complex
    stderr: float
    n_samples: int
    j_floor: int
    q: tuple
    note: str = ''


class _ScaleMixture:
    """Proposal for (k₀, k): pick scale j with probability ∝ shell volume, then k from
    the shell pool {|e| ≤ M^j} and k₀ uniform in [−M^j, M^j]"""

    def __init__(self, model: DispersionModel, M: float, j_floor: int, pool_size: int, seed: int,
                 threads: int = 1):
        self.model = model
        self.scales = list(range(j_floor, 0))
        self.widths = np.array([M ** j for j in self.scales])
        self.pools: list[ShellSample] = []
        for i, width in enumerate(self.widths):
            pool = sample_shell(model, width, pool_size, seed + i * SCALE_SEED_OFFSET, threads=threads)
            self.pools.append(pool)
            logger.debug(f"Pool j={self.scales[i]}: {len(pool)} points, volume {pool.volume.value:.4e}")
        volumes = np.array([pool.volume.value if len(pool) else 0.0 for pool in self.pools])
        self.volumes = volumes
        total = volumes.sum()
        self.probs = volumes / total if total > 0 else volumes

    @property
    def empty(self) -> bool:
        return not np.any(self.probs > 0)

    def draw(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        which = rng.choice(len(self.scales), size=n, p=self.probs)
        k = np.empty((n, self.model.dimension))
        k0 = np.empty(n)
        for i, pool in enumerate(self.pools):
            rows = np.flatnonzero(which == i)
            if len(rows) == 0:
                continue
            k[rows] = pool.points[rng.integers(len(pool), size=len(rows))]
            k0[rows] = rng.uniform(-self.widths[i], self.widths[i], size=len(rows))
        return k0, k

    def density(self, k0: np.ndarray, k: np.ndarray) -> np.ndarray:
        e = np.abs(self.model.energy(k))
        out = np.zeros(len(k))
        for i, width in enumerate(self.widths):
            if self.probs[i] == 0:
                continue
            inside = (e <= width) & (np.abs(k0) <= width)
            out += np.where(inside, self.probs[i] / (2.0 * width * self.volumes[i]), 0.0)
        return out


def _check_q(model: DispersionModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (model.dimension + 1,):
        raise ArgumentError(f"q must be (q₀, q₁..q_{model.dimension}), got shape {q.shape}")
    if not model.domain.contains(q[1:]):
        raise DomainError(f"q = {q[1:]} lies outside the model domain")
    return q


def _sunset_values(model: DispersionModel, interaction: Interaction, q_points: np.ndarray,
                   floors: Sequence[int], n_samples: int, seed: int, M: float, pool_size: int,
                   threads: int, shard_size: int | None, v1: int, v2: int) -> np.ndarray | None:
    """Per-sample integrand values (n, n_q, n_floors) on one common set of (k, p) draws"""
    mixture = _ScaleMixture(model, M, min(floors), pool_size, seed, threads)
    if mixture.empty:
        return None

    def worker(rng, n):
        k0, k = mixture.draw(rng, n)
        p0, p = mixture.draw(rng, n)
        weight = np.abs(interaction.value(k, p)) ** 2 / (mixture.density(k0, k) * mixture.density(p0, p))
        out = np.empty((n, len(q_points), len(floors)), dtype=complex)
        for a, floor in enumerate(floors):
            base = _propagator(model, k0, k, M, floor) * _propagator(model, p0, p, M, floor) * weight
            for i, q in enumerate(q_points):
                t = model.domain.wrap(q[1:] + v1 * k + v2 * p)
                t0 = q[0] + v1 * k0 + v2 * p0
                third = np.where(model.domain.contains(t), _propagator(model, t0, t, M, floor), 0.0)
                out[:, i, a] = base * third
        return out

    return np.concatenate(run_sharded(worker, n_samples, seed + PAIR_SEED_OFFSET, threads, shard_size), axis=0)


def _complex_stderr(values: np.ndarray) -> np.ndarray:
    n = len(values)
    if n < 2:
        return np.full(values.shape[1:], math.inf)
    var = np.var(values.real, axis=0, ddof=1) + np.var(values.imag, axis=0, ddof=1)
    return np.sqrt(var / n)


def _check_variance(values: np.ndarray, limit: float):
    """Abort when the variance of the full run dwarfs that of its first half"""
    half = len(values) // 2
    if half < 2:
        return
    first = np.var(np.abs(values[:half]), axis=0, ddof=1)
    full = np.var(np.abs(values), axis=0, ddof=1)
    ratio = np.where(first > 0, full / np.where(first > 0, first, 1.0), 0.0)
    worst = float(np.max(ratio))
    if worst > limit:
        raise ConvergenceError(f"running variance grew {worst:.1f}× between n={half} and n={len(values)} "
                               f"(limit {limit}); the estimator variance looks divergent")


def second_order_self_energy(model: DispersionModel, interaction: Interaction, q, n_samples: int, seed: int,
                             j_floor: int = Config.J_FLOOR, M: float | None = None,
                             pool_size: int | None = None, threads: int = 1, shard_size: int | None = None,
                             v1: int = 1, v2: int = 1) -> SelfEnergyEstimate:
    """Sunset value ∫∫ C(k) C(p) C(q + v₁k + v₂p) |v̂|² dk dp with C = Σ_{j_floor ≤ j < 0} C_j"""
    q = _check_q(model, q)
    if j_floor > -4:
        raise ArgumentError(f"j_floor must be ≤ −4, got {j_floor}")
    if interaction.is_zero:
        return SelfEnergyEstimate(0j, 0.0, 0, j_floor, tuple(q), note="zero interaction")
    M = _base(M)
    values = _sunset_values(model, interaction, q[None, :], [j_floor], n_samples, seed, M,
                            pool_size or Config.POOL_SIZE, threads, shard_size, v1, v2)
    if values is None:
        return SelfEnergyEstimate(0j, 0.0, 0, j_floor, tuple(q), note="no shell points at any scale")
    values = values[:, 0, 0]
    _check_variance(values[:, None], Config.VARIANCE_RATIO)
    estimate = SelfEnergyEstimate(value=complex(values.mean()), stderr=float(_complex_stderr(values[:, None])[0]),
                                  n_samples=len(values), j_floor=j_floor, q=tuple(q))
    logger.info(f"Sunset at q={tuple(np.round(q, 6))}, j_floor={j_floor}: "
                f"{estimate.value:.6e} ± {estimate.stderr:.2e}")
    return estimate


@dataclass(frozen=True, eq=False)
class SelfEnergySequence:
    """Estimates at decreasing infrared floors on common draws, with successive differences"""
    estimates: list
    differences: np.ndarray
    difference_stderrs: np.ndarray

    @property
    def shrink_factors(self) -> np.ndarray:
        d = self.differences
        with np.errstate(divide='ignore', invalid='ignore'):
            return d[:-1] / d[1:]

    @property
    def contracting(self) -> bool:
        return bool(np.all(self.shrink_factors >= 2.0))


def self_energy_sequence(model: DispersionModel, interaction: Interaction, q, j_floors: Sequence[int],
                         n_samples: int, seed: int, M: float | None = None, pool_size: int | None = None,
                         threads: int = 1, shard_size: int | None = None) -> SelfEnergySequence:
    """Sunset values for several infrared floors; every floor reuses the draws of the deepest one"""
    q = _check_q(model, q)
    floors = sorted({int(j) for j in j_floors}, reverse=True)
    if len(floors) < 2 or floors[0] > -4:
        raise ArgumentError(f"need at least two floors, all ≤ −4, got {list(j_floors)}")
    M = _base(M)
    values = _sunset_values(model, interaction, q[None, :], floors, n_samples, seed, M,
                            pool_size or Config.POOL_SIZE, threads, shard_size, 1, 1)
    if values is None or interaction.is_zero:
        zeros = [SelfEnergyEstimate(0j, 0.0, 0, j, tuple(q)) for j in floors]
        return SelfEnergySequence(zeros, np.zeros(len(floors) - 1), np.zeros(len(floors) - 1))
    values = values[:, 0, :]
    stderrs = _complex_stderr(values)
    estimates = [SelfEnergyEstimate(complex(values[:, a].mean()), float(stderrs[a]), len(values), j, tuple(q))
                 for a, j in enumerate(floors)]
    steps = values[:, 1:] - values[:, :-1]
    differences = np.abs(steps.mean(axis=0))
    sequence = SelfEnergySequence(estimates, differences, _complex_stderr(steps))
    logger.info(f"Floors {floors}: successive differences {np.array2string(differences, precision=3)}")
    return sequence


def frequency_derivative(model: DispersionModel, interaction: Interaction, q, h: float, n_samples: int,
                         seed: int, j_floor: int = Config.J_FLOOR, M: float | None = None,
                         pool_size: int | None = None, threads: int = 1,
                         shard_size: int | None = None) -> SelfEnergyEstimate:
    """Central difference ∂_{q₀}G with common draws at q ± h·e₀"""
    q = _check_q(model, q)
    if h <= 0:
        raise ArgumentError(f"step must be positive, got {h}")
    if interaction.is_zero:
        return SelfEnergyEstimate(0j, 0.0, 0, j_floor, tuple(q), note="zero interaction")
    M = _base(M)
    shift = np.zeros_like(q)
    shift[0] = h
    values = _sunset_values(model, interaction, np.stack([q + shift, q - shift]), [j_floor], n_samples, seed,
                            M, pool_size or Config.POOL_SIZE, threads, shard_size, 1, 1)
    if values is None:
        return SelfEnergyEstimate(0j, 0.0, 0, j_floor, tuple(q), note="zero integrand")
    slope = (values[:, 0, 0] - values[:, 1, 0]) / (2.0 * h)
    return SelfEnergyEstimate(complex(slope.mean()), float(_complex_stderr(slope[:, None])[0]),
                              len(slope), j_floor, tuple(q))


@dataclass(frozen=True, eq=False)
class RegularityProbe:
    q: tuple
    s: float
    displacements: np.ndarray
    quotients: np.ndarray
    stderrs: np.ndarray
    status: str
    sup_value: float
    sup_derivative: float
    derivative_stderr: float = 0.0
    note: str = ''

    def to_text(self) -> str:
        lines = [f"q: {self.q}", f"s: {self.s}", f"status: {self.status}",
                 f"sup |G|: {self.sup_value:.6e}",
                 f"sup |dG/dq0|: {self.sup_derivative:.6e} ± {self.derivative_stderr:.2e}"]
        for p, value, err in zip(self.displacements, self.quotients, self.stderrs):
            lines.append(f"  |p|={p:.6g}  quotient={value:.6e} ± {err:.2e}")
        if self.note:
            lines.append(f"note: {self.note}")
        return "\n".join(lines)


def default_displacements(n: int = 8) -> np.ndarray:
    return 2.0 ** -np.arange(1, n + 1)


def _check_displacements(displacements, s: float, max_displacement: float | None = None) -> np.ndarray:
    if not 0 < s < 1:
        raise ArgumentError(f"Hölder exponent must lie in (0, 1), got {s}")
    p = np.asarray(displacements, dtype=float)
    if p.ndim != 1 or len(p) < GROWTH_OCTAVES:
        raise ArgumentError(f"need at least {GROWTH_OCTAVES} displacements")
    if np.any(p <= 0) or np.any(np.diff(p) >= 0):
        raise ArgumentError("displacements must be positive and strictly decreasing")
    ratios = p[1:] / p[:-1]
    if not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise ArgumentError("displacements must form a geometric sequence")
    if max_displacement is not None and p[0] > max_displacement:
        raise ArgumentError(f"displacement {p[0]} exceeds the domain diameter {max_displacement}")
    return p


def _direction(size: int, direction) -> np.ndarray:
    if direction is None:
        out = np.zeros(size)
        out[1 if size > 1 else 0] = 1.0
        return out
    out = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(out)
    if out.shape != (size,) or norm == 0:
        raise ArgumentError(f"direction must be a nonzero {size}-vector")
    return out / norm


def classify_quotients(quotients: np.ndarray, stderrs: np.ndarray,
                       noise_limit: float = Config.NOISE_LIMIT) -> str:
    """'growth' when the last four quotients rise monotonically by more than 2×,
    'inconclusive' when noise exceeds the limit there, 'bounded' otherwise"""
    tail = np.asarray(quotients[-GROWTH_OCTAVES:], dtype=float)
    tail_err = np.asarray(stderrs[-GROWTH_OCTAVES:], dtype=float)
    if np.any(tail_err > noise_limit * tail):
        return 'inconclusive'
    rising = bool(np.all(np.diff(tail) > 0))
    if rising and tail[-1] > GROWTH_FACTOR * tail[0]:
        return 'growth'
    return 'bounded'


def probe_function(func: Callable[[np.ndarray], float], q, s: float, displacements,
                   direction=None) -> RegularityProbe:
    """Hölder quotients |F(q + p) − F(q)| / |p|^s of a deterministic function"""
    q = np.asarray(q, dtype=float)
    p = _check_displacements(displacements, s)
    u = _direction(len(q), direction)
    base = complex(func(q))
    shifted = np.array([complex(func(q + r * u)) for r in p])
    quotients = np.abs(shifted - base) / p ** s
    h = p[-1]
    e0 = np.zeros_like(q)
    e0[0] = 1.0
    derivative = abs(complex(func(q + h * e0)) - complex(func(q - h * e0))) / (2.0 * h)
    status = classify_quotients(quotients, np.zeros_like(quotients))
    return RegularityProbe(q=tuple(q), s=s, displacements=p, quotients=quotients, stderrs=np.zeros_like(quotients),
                           status=status, sup_value=float(np.max(np.abs(np.append(shifted, base)))),
                           sup_derivative=derivative)


def holder_probe(model: DispersionModel, interaction: Interaction, q, s: float, displacements=None,
                 n_samples: int = 20000, seed: int = 0, j_floor: int = Config.J_FLOOR, direction=None,
                 M: float | None = None, pool_size: int | None = None, threads: int = 1,
                 shard_size: int | None = None) -> RegularityProbe:
    """Hölder quotients of the sunset with common random numbers across all displaced points"""
    q = _check_q(model, q)
    p = _check_displacements(default_displacements() if displacements is None else displacements, s,
                             model.domain.diameter)
    if j_floor > -4:
        raise ArgumentError(f"j_floor must be ≤ −4, got {j_floor}")
    u = _direction(len(q), direction)
    M = _base(M)
    e0 = np.zeros_like(q)
    e0[0] = p[-1]
    points = np.vstack([q[None, :], q + p[:, None] * u, q + e0, q - e0])
    values = _sunset_values(model, interaction, points, [j_floor], n_samples, seed, M,
                            pool_size or Config.POOL_SIZE, threads, shard_size, 1, 1)
    if values is None or interaction.is_zero:
        zeros = np.zeros(len(p))
        return RegularityProbe(tuple(q), s, p, zeros, zeros, 'bounded', 0.0, 0.0, note="zero integrand")
    values = values[:, :, 0]
    means = values.mean(axis=0)
    diffs = values[:, 1:len(p) + 1] - values[:, :1]
    quotients = np.abs(diffs.mean(axis=0)) / p ** s
    stderrs = _complex_stderr(diffs) / p ** s
    slope = (values[:, -2] - values[:, -1]) / (2.0 * p[-1])
    status = classify_quotients(quotients, stderrs)
    note = ''
    if status == 'inconclusive':
        note = "Monte Carlo noise exceeds half the quotient at small displacements"
        logger.warning(f"Hölder probe at q={tuple(np.round(q, 6))} inconclusive: {note}")
    else:
        logger.info(f"Hölder probe at q={tuple(np.round(q, 6))}, s={s}: {status}")
    return RegularityProbe(q=tuple(q), s=s, displacements=p, quotients=quotients, stderrs=stderrs, status=status,
                           sup_value=float(np.max(np.abs(means[:len(p) + 1]))),
                           sup_derivative=float(abs(slope.mean())),
                           derivative_stderr=float(_complex_stderr(slope[:, None])[0]), note=note)


def self_energy_table(model: DispersionModel, estimates: Sequence[SelfEnergyEstimate]) -> pd.DataFrame:
    rows = []
    for estimate in estimates:
        row = {'model_id': model.model_id}
        row.update({f"q{i}": float(x) for i, x in enumerate(estimate.q)})
        row.update({'j_floor': estimate.j_floor, 're_value': estimate.value.real,
                    'im_value': estimate.value.imag, 'stderr': estimate.stderr})
        rows.append(row)
    return pd.DataFrame(rows)


def probe_table(probe: RegularityProbe) -> pd.DataFrame:
    return pd.DataFrame({'displacement': probe.displacements, 'quotient': probe.quotients,
                         'stderr': probe.stderrs, 'status': probe.status})
