"""No-nesting diagnostics: flatness exponent κ and the transversality floor of the Fermi surface normals.

The supremum over reference points ω is approximated by a maximum over sampled
references. To keep that maximum from riding on sampling noise, the maximizing
reference is selected on the even-indexed surface samples and its measure is
evaluated on the odd-indexed ones.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from config import Config
from utils.errors import ArgumentError, ConvergenceError
from utils.geometry import DispersionModel, SurfaceSampleSet, sample_fermi_surface, sin_angle
from utils.sampling import get_rng

logger = logging.getLogger(__name__)

REFERENCE_SEED_OFFSET = 1 << 20


def default_betas(n: int | None = None, lo: float | None = None, hi: float | None = None) -> tuple:
    """Logarithmically spaced β grid, largest first"""
    n = n or Config.N_BETAS
    lo = lo or Config.BETA_RANGE[0]
    hi = hi or Config.BETA_RANGE[1]
    return tuple(np.geomspace(hi, lo, n).tolist())


def guaranteed_kappa(d: int, m: int) -> int:
    """Flatness exponent guaranteed near a nondegenerate critical point of signature (m, d−m)"""
    if d < 3 or not 1 <= m <= d - 1:
        raise ArgumentError(f"need d ≥ 3 and 1 ≤ m ≤ d−1, got d={d}, m={m}")
    return max(m - 1, d - m - 1)


def analytic_cone_normals(points, m: int, lambdas: Sequence[float] | None = None) -> np.ndarray:
    """Unit normals of the cone Σ_{i<m} λᵢkᵢ² = Σ_{i≥m} λᵢkᵢ² from the angular parametrization (θ, −φ)/√2"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    scale = np.sqrt(np.ones(points.shape[1]) if lambdas is None else np.asarray(lambdas, dtype=float))
    y = points * scale
    theta = y[:, :m] / np.linalg.norm(y[:, :m], axis=1, keepdims=True)
    phi = y[:, m:] / np.linalg.norm(y[:, m:], axis=1, keepdims=True)
    normal = np.concatenate([scale[:m] * theta, -scale[m:] * phi], axis=1)
    return normal / np.linalg.norm(normal, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class NestingSpec:
    model: DispersionModel
    betas: tuple = field(default_factory=default_betas)
    n_reference: int = Config.N_REFERENCE
    n_surface: int = Config.N_SURFACE
    excision_radius: float = Config.EXCISION_RADIUS
    h_surf: float = Config.H_SURF
    fit_tol: float = Config.FIT_TOL
    kappa_floor: float = Config.KAPPA_FLOOR

    def __post_init__(self):
        betas = tuple(sorted((float(b) for b in self.betas), reverse=True))
        if not betas or any(not 0 < b < 1 for b in betas):
            raise ArgumentError(f"every β must lie in (0, 1), got {betas}")
        if self.n_reference < 1:
            raise ArgumentError("n_reference must be at least 1")
        if self.n_surface < 1000:
            raise ArgumentError(f"surface budget must be at least 1000 samples, got {self.n_surface}")
        object.__setattr__(self, 'betas', betas)


@dataclass(frozen=True)
class KappaEstimate:
    kappa: float
    log_z0: float
    betas: tuple
    measures: tuple
    contributors: tuple
    residual: float
    half_width: float
    dropped_betas: tuple
    status: str
    n_samples: int
    n_references: int

    @property
    def ok(self) -> bool:
        return self.status == 'ok'


@dataclass(frozen=True)
class TransversalityFit:
    z1: float
    rho_prime: float
    kappa_prime: float
    z0: float
    kappa_from_parts: float
    kappa_from_parts_half_width: float
    betas: tuple
    envelope: tuple
    neighborhood: tuple
    dropped_betas: tuple
    status: str
    resolution: float = 0.0


def nesting_samples(spec: NestingSpec, seed: int, threads: int = 1) -> SurfaceSampleSet:
    return sample_fermi_surface(spec.model, spec.n_surface, seed, h_surf=spec.h_surf,
                                excision_radius=spec.excision_radius, threads=threads)


def reference_indices(samples: SurfaceSampleSet, n_reference: int, seed: int) -> np.ndarray:
    """Random non-excised samples plus the non-excised sample nearest each singular point"""
    order = get_rng(seed + REFERENCE_SEED_OFFSET).permutation(len(samples))
    chosen = list(order[~samples.excised[order]][:n_reference])
    for location in samples.singular_points:
        distance = np.where(samples.excised, np.inf, samples.distance(samples.points, location))
        if np.isfinite(distance).any():
            chosen.append(int(np.argmin(distance)))
    return np.array(list(dict.fromkeys(int(i) for i in chosen)), dtype=int)


def _log_fit(x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None):
    """Straight-line fit with parameter standard errors and weighted RMS residual"""
    coeffs, cov = np.polyfit(x, y, 1, w=weights, cov=True)
    residuals = y - np.polyval(coeffs, x)
    w2 = np.ones_like(x) if weights is None else weights ** 2
    rms = math.sqrt(float(np.sum(w2 * residuals ** 2) / np.sum(w2)))
    stderr = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return float(coeffs[0]), float(coeffs[1]), float(stderr[0]), rms


def estimate_kappa(spec: NestingSpec, seed: int, threads: int = 1,
                   samples: SurfaceSampleSet | None = None) -> KappaEstimate:
    """Fit vol{ω′ : sin θ(ω, ω′) ≤ β} ≈ Z₀β^κ with the max over sampled references ω"""
    if samples is None:
        samples = nesting_samples(spec, seed, threads)
    betas = np.array(spec.betas)
    refs = reference_indices(samples, spec.n_reference, seed)
    if len(refs) == 0:
        raise ConvergenceError("no surface samples outside the excision balls")

    usable = ~samples.excised
    parity = np.arange(len(samples)) % 2
    select = usable & (parity == 0)
    hold_out = usable & (parity == 1)
    w_select = np.where(select, samples.measures, 0.0)
    w_hold = np.where(hold_out, samples.measures, 0.0) * 2.0

    best_select = np.full(len(betas), -np.inf)
    measures = np.zeros(len(betas))
    contributors = np.zeros(len(betas), dtype=int)
    for r in refs:
        s = sin_angle(samples.normals[r], samples.normals)
        within = s[None, :] <= betas[:, None]
        selected = within @ w_select
        better = selected > best_select
        best_select[better] = selected[better]
        measures[better] = (within @ w_hold)[better]
        contributors[better] = (within & hold_out[None, :]).sum(axis=1)[better]

    keep = contributors >= Config.MIN_CONTRIBUTORS
    dropped = tuple(betas[~keep].tolist())
    if dropped:
        logger.warning(f"Dropped {len(dropped)} β values with fewer than {Config.MIN_CONTRIBUTORS} "
                       f"contributors: {[f'{b:.2e}' for b in dropped]}")
    if keep.sum() < 3:
        raise ConvergenceError(f"only {int(keep.sum())} β values have enough contributing samples")

    kappa, log_z0, kappa_err, residual = _log_fit(np.log(betas[keep]), np.log(measures[keep]),
                                                  np.sqrt(contributors[keep]))
    status = 'ok'
    if residual > spec.fit_tol or kappa < spec.kappa_floor:
        status = 'nesting_suspected'
        logger.warning(f"Nesting suspected on {samples.model_id}: kappa={kappa:.3f}, residual={residual:.3f}")
    else:
        logger.info(f"Flatness exponent on {samples.model_id}: kappa={kappa:.3f} ± {2 * kappa_err:.3f}")

    return KappaEstimate(
        kappa=kappa, log_z0=log_z0, betas=tuple(betas[keep].tolist()),
        measures=tuple(measures[keep].tolist()), contributors=tuple(contributors[keep].tolist()),
        residual=residual, half_width=2.0 * kappa_err, dropped_betas=dropped, status=status,
        n_samples=len(samples), n_references=len(refs),
    )


def _tree(samples: SurfaceSampleSet, points: np.ndarray) -> tuple[cKDTree, np.ndarray]:
    """KD-tree on ``points`` plus the sample coordinates to query it with"""
    domain = samples.domain
    if domain is not None and domain.periodic:
        lower, upper = domain.bounding_box()
        span = upper - lower

        def shifted(x):
            # boxsize wants coordinates in [0, L); mod can round up to L
            x = np.mod(x - lower, span)
            return np.where(x >= span, 0.0, x)

        return cKDTree(shifted(points), boxsize=span), shifted(samples.points)
    return cKDTree(points), samples.points


def check_transversality_floor(spec: NestingSpec, seed: int, threads: int = 1,
                               samples: SurfaceSampleSet | None = None, tau: float | None = None,
                               n_reference: int | None = None,
                               monotone_tol: float | None = None) -> TransversalityFit:
    """Lower envelope sin θ ≥ z₁β^{ρ′} away from the parallel-normal set, and vol U_β(D) ≈ z₀β^{κ′}.

    D(ω) is approximated by the samples with sin θ ≤ τ; distances to it are
    nearest-neighbour distances. Envelope values are minima of sin θ over
    distance bins [βᵢ, βᵢ₊₁).
    """
    tau = tau or Config.PARALLEL_TOL
    n_reference = n_reference or Config.N_FLOOR_REFERENCE
    monotone_tol = Config.MONOTONE_TOL if monotone_tol is None else monotone_tol
    if samples is None:
        samples = nesting_samples(spec, seed, threads)
    betas = np.sort(np.array(spec.betas))
    edges = np.append(betas, np.inf)
    refs = reference_indices(samples, spec.n_reference, seed)[:n_reference]
    usable = ~samples.excised
    weights = np.where(usable, samples.measures, 0.0)

    envelope = np.full(len(betas), np.inf)
    neighborhood = np.zeros(len(betas))
    spacing = []
    for r in refs:
        s = sin_angle(samples.normals[r], samples.normals)
        parallel = usable & (s <= tau)
        if parallel.sum() < 2:
            continue
        tree, queries = _tree(samples, samples.points[parallel])
        spacing.append(float(np.median(tree.query(tree.data, k=2)[0][:, 1])))
        dist = tree.query(queries)[0]
        for i in range(len(betas)):
            in_bin = usable & (dist >= edges[i]) & (dist < edges[i + 1])
            if in_bin.any():
                envelope[i] = min(envelope[i], float(s[in_bin].min()))
        neighborhood = np.maximum(neighborhood, (dist[None, :] <= betas[:, None]) @ weights)

    # D_τ sits up to ~τ off D and is sampled with gaps; distances below either are not resolved
    resolution = max(2.0 * max(spacing), Config.PARALLEL_WINDOW * tau) if spacing else math.inf
    diameter = samples.domain.diameter if samples.domain is not None else math.inf
    keep = (np.isfinite(envelope) & (envelope > 0) & (betas >= resolution)
            & (betas <= diameter) & (neighborhood > 0))
    dropped = tuple(betas[~keep].tolist())

    if keep.sum() < 3:
        logger.warning(f"Transversality floor on {samples.model_id}: no data in the β window")
        nan = float('nan')
        return TransversalityFit(z1=nan, rho_prime=nan, kappa_prime=nan, z0=nan, kappa_from_parts=nan,
                                 kappa_from_parts_half_width=nan, betas=(), envelope=(), neighborhood=(),
                                 dropped_betas=dropped, status='no_data', resolution=resolution)

    x = np.log(betas[keep])
    rho, log_z1, rho_err, _ = _log_fit(x, np.log(envelope[keep]))
    kappa_p, log_z0, kappa_p_err, _ = _log_fit(x, np.log(neighborhood[keep]))
    ratio = kappa_p / rho
    ratio_err = abs(ratio) * math.hypot(kappa_p_err / kappa_p, rho_err / rho) if kappa_p > 0 else math.inf

    status = 'ok'
    if np.any(np.diff(np.log(envelope[keep])) < -monotone_tol):
        status = 'nonmonotone'
        logger.warning(f"Transversality envelope on {samples.model_id} decreases beyond tolerance")

    return TransversalityFit(
        z1=math.exp(log_z1), rho_prime=rho, kappa_prime=kappa_p, z0=math.exp(log_z0),
        kappa_from_parts=ratio, kappa_from_parts_half_width=2.0 * ratio_err,
        betas=tuple(betas[keep].tolist()), envelope=tuple(envelope[keep].tolist()),
        neighborhood=tuple(neighborhood[keep].tolist()), dropped_betas=dropped, status=status,
        resolution=resolution,
    )


def nesting_table(model_id: str, kappa: KappaEstimate, floor: TransversalityFit | None = None) -> pd.DataFrame:
    rows = [{
        'model_id': model_id,
        'beta': beta,
        'measure_max': measure,
        'kappa_fit': kappa.kappa,
        'z1': floor.z1 if floor is not None else None,
        'rho_prime': floor.rho_prime if floor is not None else None,
    } for beta, measure in zip(kappa.betas, kappa.measures)]
    return pd.DataFrame(rows, columns=['model_id', 'beta', 'measure_max', 'kappa_fit', 'z1', 'rho_prime'])
