"""Overlapping-loop volume I₂ and the surface–surface integral W(ζ)"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from config import Config
from utils.errors import ArgumentError
from utils.geometry import DispersionModel, Domain, SurfaceSampleSet, find_singular_points, sample_fermi_surface, sin_angle
from utils.sampling import get_rng
from utils.shellvol import ScalingFit, ShellSample, VolumeEstimate, fit_scaling_exponent, sample_shell

logger = logging.getLogger(__name__)

POOL_SEED_OFFSET = 1 << 24
Q_SEED_OFFSET = 1 << 25


@dataclass(frozen=True, eq=False)
class OverlapSpec:
    """I₂(ε₁, ε₂, ε₃) = sup_q ∫_{K_k}∫_{K_p} 1(|e(k)| ≤ ε₁) 1(|e(p)| ≤ ε₂) 1(|e(v₁k + v₂p + q)| ≤ ε₃)"""
    model: DispersionModel
    q_points: np.ndarray
    eps1: float
    eps2: float
    eps3: float
    delta: float = 0.0
    v1: int = 1
    v2: int = 1
    k_region: Domain | None = None
    p_region: Domain | None = None
    c_delta: float = Config.C_DELTA

    def __post_init__(self):
        if self.v1 not in (1, -1) or self.v2 not in (1, -1):
            raise ArgumentError(f"signs must be ±1, got v1={self.v1}, v2={self.v2}")
        for name in ('eps1', 'eps2', 'eps3'):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ArgumentError(f"{name} must lie in (0, 1], got {value}")
        if self.eps3 < max(self.eps1, self.eps2):
            raise ArgumentError(f"eps3={self.eps3} must be at least max(eps1, eps2)")
        if self.delta < 0:
            raise ArgumentError(f"gradient floor delta must be nonnegative, got {self.delta}")
        q_points = np.atleast_2d(np.asarray(self.q_points, dtype=float))
        if q_points.shape[1] != self.model.dimension or len(q_points) == 0:
            raise ArgumentError(f"q_points must be a nonempty (n, {self.model.dimension}) array")
        object.__setattr__(self, 'q_points', q_points)
        object.__setattr__(self, 'k_region', self.k_region or self.model.domain)
        object.__setattr__(self, 'p_region', self.p_region or self.model.domain)

    @property
    def bound_applicable(self) -> bool:
        """δ ≥ C_δ·max(√ε₁, √ε₂)"""
        return self.delta >= self.c_delta * math.sqrt(max(self.eps1, self.eps2))


@dataclass(frozen=True)
class OverlapExponent:
    epsilon: float
    epsilon_final: float
    d: int
    kappa: float
    fitted: float | None = None
    fitted_stderr: float | None = None
    window: tuple | None = None

    def with_fit(self, fit: ScalingFit) -> "OverlapExponent":
        return replace(self, fitted=fit.exponent, fitted_stderr=fit.param_stderr['alpha'],
                       window=(2.0 ** fit.j_min, 2.0 ** fit.j_max))


def epsilon_from_kappa(d: int, kappa: float) -> OverlapExponent:
    """ε = κ/(1+κ) and the final exponent ((d−2)/(d+2))·κ/(1+κ)"""
    if d < 3:
        raise ArgumentError(f"overlap exponents are defined for d ≥ 3, got d={d}")
    if kappa <= 0:
        raise ArgumentError(f"kappa must be positive, got {kappa}")
    epsilon = kappa / (1.0 + kappa)
    return OverlapExponent(epsilon=epsilon, epsilon_final=(d - 2) / (d + 2) * epsilon, d=d, kappa=kappa)


def default_q_points(model: DispersionModel, n_q: int | None = None, seed: int = 0,
                     region: Domain | None = None) -> np.ndarray:
    """q = 0, q = 2×each singular point, then uniform draws from the region up to ``n_q``"""
    n_q = n_q or Config.N_Q
    region = region or model.domain
    candidates = [np.zeros(model.dimension)]
    for point in find_singular_points(model):
        candidates.append(model.domain.wrap(2.0 * point.location))
    unique = []
    for q in candidates:
        if not any(np.allclose(q, u) for u in unique):
            unique.append(q)
    unique = unique[:n_q]
    extra = n_q - len(unique)
    if extra > 0:
        unique.extend(region.sample(get_rng(seed + Q_SEED_OFFSET), extra))
    return np.array(unique)


def _gradient_ok(model: DispersionModel, points: np.ndarray, delta: float) -> np.ndarray:
    if delta <= 0 or len(points) == 0:
        return np.ones(len(points), dtype=bool)
    return np.linalg.norm(model.gradient(points), axis=1) >= delta


def _pair_estimate(pool_k: ShellSample, pool_p: ShellSample, hits: int, n_pairs: int) -> VolumeEstimate:
    """V_k·V_p·(hits/n) with pool and pair errors combined in quadrature"""
    if n_pairs == 0 or hits == 0:
        bound = pool_k.volume.value * pool_p.volume.value * 3.0 / max(n_pairs, 1)
        return VolumeEstimate(value=0.0, stderr=0.0, n_samples=n_pairs, hits=0,
                              note=f"no hits; one-sided 95% upper bound {bound:.3e}")
    frac = hits / n_pairs
    value = pool_k.volume.value * pool_p.volume.value * frac
    rel = math.sqrt(pool_k.volume.relative_error ** 2 + pool_p.volume.relative_error ** 2
                    + (1.0 - frac) / (frac * n_pairs))
    return VolumeEstimate(value=value, stderr=value * rel, n_samples=n_pairs, hits=int(hits))


def draw_pools(model: DispersionModel, eps1: float, eps2: float, n_samples: int, seed: int,
               k_region: Domain | None = None, p_region: Domain | None = None,
               threads: int = 1) -> tuple[ShellSample, ShellSample]:
    pool_k = sample_shell(model, eps1, n_samples, seed, region=k_region, threads=threads)
    pool_p = sample_shell(model, eps2, n_samples, seed + POOL_SEED_OFFSET, region=p_region, threads=threads)
    return pool_k, pool_p


def _triple_hits(model, pool_k, pool_p, v1, v2, q_points, thresholds, delta) -> tuple[np.ndarray, int]:
    """Hit counts (n_q, n_thresholds) of the third shell over aligned pool pairs"""
    n = min(len(pool_k), len(pool_p))
    counts = np.zeros((len(q_points), len(thresholds)), dtype=np.int64)
    if n == 0:
        return counts, 0
    k, p = pool_k.points[:n], pool_p.points[:n]
    pair_ok = _gradient_ok(model, k, delta) & _gradient_ok(model, p, delta)
    for i, q in enumerate(q_points):
        t = model.domain.wrap(v1 * k + v2 * p + q)
        e = np.abs(model.energy(t))
        ok = pair_ok.copy()
        if delta > 0:
            ok &= np.linalg.norm(model.gradient(t), axis=1) >= delta
        for c, threshold in enumerate(thresholds):
            counts[i, c] = int(np.count_nonzero(ok & (e <= threshold)))
    return counts, n


def triple_shell_volume(model: DispersionModel, thresholds: Sequence[float], q, n_samples: int, seed: int,
                        v1: int = 1, v2: int = 1, delta: float = 0.0, k_region: Domain | None = None,
                        p_region: Domain | None = None, threads: int = 1) -> VolumeEstimate:
    """∫∫ 1(|e(k)| ≤ a) 1(|e(p)| ≤ b) 1(|e(v₁k + v₂p + q)| ≤ c) dk dp at a single q, thresholds unordered"""
    a, b, c = thresholds
    pool_k, pool_p = draw_pools(model, a, b, n_samples, seed, k_region, p_region, threads)
    counts, n = _triple_hits(model, pool_k, pool_p, v1, v2, np.atleast_2d(q), [c], delta)
    return _pair_estimate(pool_k, pool_p, int(counts[0, 0]), n)


def scan_eps3(spec: OverlapSpec, eps3_values: Sequence[float], n_samples: int, seed: int,
              threads: int = 1) -> list[tuple[float, VolumeEstimate]]:
    """I₂ for several third thresholds on one pair of pools, max over q per threshold"""
    if any(e < max(spec.eps1, spec.eps2) for e in eps3_values):
        raise ArgumentError("every eps3 must be at least max(eps1, eps2)")
    pool_k, pool_p = draw_pools(spec.model, spec.eps1, spec.eps2, n_samples, seed,
                                spec.k_region, spec.p_region, threads)
    counts, n = _triple_hits(spec.model, pool_k, pool_p, spec.v1, spec.v2, spec.q_points,
                             list(eps3_values), spec.delta)
    results = []
    for c, eps3 in enumerate(eps3_values):
        best = int(np.argmax(counts[:, c]))
        estimate = _pair_estimate(pool_k, pool_p, int(counts[best, c]), n)
        if estimate.hits:
            estimate = replace(estimate, note=f"max at q[{best}]")
        results.append((float(eps3), estimate))
    return results


def estimate_I2(spec: OverlapSpec, n_samples: int, seed: int, threads: int = 1) -> VolumeEstimate:
    """Shell pools for k and p, aligned pairs, third-shell indicator, δ-excision as an indicator, max over q"""
    estimate = scan_eps3(spec, [spec.eps3], n_samples, seed, threads)[0][1]
    logger.info(f"I2(eps1={spec.eps1:.3e}, eps2={spec.eps2:.3e}, eps3={spec.eps3:.3e}, delta={spec.delta}) "
                f"= {estimate.value:.4e} ± {estimate.stderr:.2e}")
    return estimate


def _w_rows(model, points, weights, q, zetas, v1, v2, chunk_points=1 << 20) -> np.ndarray:
    """rows[z, i] = Σ_{j≠i} w_j 1(|e(v₁ωᵢ + v₂ω_j + q)| ≤ ζ_z)"""
    n, d = points.shape
    rows = np.zeros((len(zetas), n))
    chunk = max(1, chunk_points // n)
    for start in range(0, n, chunk):
        block = v1 * points[start:start + chunk, None, :] + v2 * points[None, :, :] + q
        size = block.shape[0]
        e = np.abs(model.energy(model.domain.wrap(block.reshape(-1, d)))).reshape(size, n)
        for z, zeta in enumerate(zetas):
            rows[z, start:start + size] = (e <= zeta) @ weights
    diagonal = np.abs(model.energy(model.domain.wrap(v1 * points + v2 * points + q)))
    for z, zeta in enumerate(zetas):
        rows[z] -= weights * (diagonal <= zeta)
    return rows


def surface_weights(model: DispersionModel, samples: SurfaceSampleSet, delta: float) -> np.ndarray:
    """Sample measures with the |∇e| < δ part of the surface removed"""
    grad_norm = 1.0 / samples.coarea_weights
    return np.where(grad_norm >= delta, samples.measures, 0.0)


def _off_diagonal_scale(weights: np.ndarray) -> float:
    """(Σw)² / ((Σw)² − Σw²), so that an all-ones integrand returns (Σw)² exactly"""
    total = float(weights.sum()) ** 2
    off = total - float(np.dot(weights, weights))
    return total / off if off > 0 else 0.0


def scan_zeta(model: DispersionModel, zetas: Sequence[float], q_points, delta: float, seed: int,
              n_samples: int = 2000, v1: int = 1, v2: int = 1, samples: SurfaceSampleSet | None = None,
              threads: int = 1) -> list[tuple[float, VolumeEstimate]]:
    """W(ζ) for several ζ on one surface sample set, max over q per ζ.

    Pairs (ω, ω) are left out; the off-diagonal sum is rescaled to the full
    product measure.
    """
    if samples is None:
        samples = sample_fermi_surface(model, n_samples, seed, threads=threads)
    q_points = np.atleast_2d(np.asarray(q_points, dtype=float))
    weights = surface_weights(model, samples, delta)
    scale = _off_diagonal_scale(weights)
    n = len(samples)
    best = [None] * len(zetas)
    for qi, q in enumerate(q_points):
        rows = _w_rows(model, samples.points, weights, q, zetas, v1, v2)
        for z in range(len(zetas)):
            h = scale * n * weights * rows[z]
            value = scale * float(np.dot(weights, rows[z]))
            stderr = 2.0 * float(np.std(h, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
            if best[z] is None or value > best[z][0]:
                best[z] = (value, stderr, qi)
    results = []
    for zeta, (value, stderr, qi) in zip(zetas, best):
        results.append((float(zeta), VolumeEstimate(value=max(value, 0.0), stderr=stderr, n_samples=n * n,
                                                    note=f"max at q[{qi}]")))
    return results


def estimate_W(model: DispersionModel, zeta: float, q_points, delta: float, seed: int,
               n_samples: int = 2000, v1: int = 1, v2: int = 1, samples: SurfaceSampleSet | None = None,
               threads: int = 1) -> VolumeEstimate:
    """sup_q ∫∫_{F×F} 1(|e(v₁ω₁ + v₂ω₂ + q)| ≤ ζ) over coarea-weighted surface sample pairs"""
    if zeta <= 0:
        raise ArgumentError(f"zeta must be positive, got {zeta}")
    return scan_zeta(model, [zeta], q_points, delta, seed, n_samples, v1, v2, samples, threads)[0][1]


def exceptional_fraction(samples: SurfaceSampleSet, zeta: float, kappa: float,
                         delta: float = 0.0, chunk_points: int = 1 << 20) -> float:
    """Measure fraction of pairs ω₁ ≠ ω₂ with sin θ(n(ω₁), n(ω₂)) < ζ^{1−γ}, γ = κ/(1+κ)"""
    gamma = kappa / (1.0 + kappa)
    cutoff = zeta ** (1.0 - gamma)
    w = np.where(1.0 / samples.coarea_weights >= delta, samples.measures, 0.0)
    normals = samples.normals
    n = len(samples)
    chunk = max(1, chunk_points // n)
    exceptional = 0.0
    for start in range(0, n, chunk):
        s = sin_angle(normals[start:start + chunk, None, :], normals[None, :, :])
        exceptional += float(w[start:start + chunk] @ ((s < cutoff) @ w))
    exceptional -= float(np.dot(w, w))
    off = float(w.sum()) ** 2 - float(np.dot(w, w))
    return max(exceptional, 0.0) / off if off > 0 else 0.0


def fit_overlap_exponent(estimates: Sequence[tuple[float, VolumeEstimate]], weighted: bool = True) -> ScalingFit:
    """Weighted log-log fit of estimates against their thresholds"""
    return fit_scaling_exponent([(math.log2(threshold), estimate) for threshold, estimate in estimates],
                                form='power', M=2.0, weighted=weighted)


def i2_table(spec: OverlapSpec, estimates) -> pd.DataFrame:
    rows = [{'model_id': spec.model.model_id, 'eps1': spec.eps1, 'eps2': spec.eps2, 'eps3': eps3,
             'delta': spec.delta, 'I2': est.value, 'stderr': est.stderr} for eps3, est in estimates]
    return pd.DataFrame(rows, columns=['model_id', 'eps1', 'eps2', 'eps3', 'delta', 'I2', 'stderr'])


def w_table(model: DispersionModel, estimates) -> pd.DataFrame:
    rows = [{'model_id': model.model_id, 'zeta': zeta, 'W': est.value, 'stderr': est.stderr}
            for zeta, est in estimates]
    return pd.DataFrame(rows, columns=['model_id', 'zeta', 'W', 'stderr'])
