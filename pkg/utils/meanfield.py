"""Density of states histograms and the BCS gap equation on a tabulated density of states"""
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import root_scalar

from config import Config
from utils.errors import ArgumentError, BracketError, ConvergenceError, DomainError
from utils.geometry import DispersionModel
from utils.sampling import run_sharded

logger = logging.getLogger(__name__)

TC_LAWS = ('inv_g', 'inv_sqrt_g')
MIN_COUPLINGS = 6


@dataclass(frozen=True, eq=False)
class DOSHistogram:
    """ρ(E) per unit energy and volume, constant on each bin"""
    edges: np.ndarray
    rho: np.ndarray
    method: str = 'exact'
    n_samples: int = 0
    model_id: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'edges', np.asarray(self.edges, dtype=float))
        object.__setattr__(self, 'rho', np.asarray(self.rho, dtype=float))
        if len(self.edges) != len(self.rho) + 1 or np.any(np.diff(self.edges) <= 0):
            raise ArgumentError("edges must be increasing with one more entry than rho")
        if np.any(self.rho < 0):
            raise ArgumentError("density of states must be nonnegative")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def total(self) -> float:
        return float(np.sum(self.rho * self.widths))

    @property
    def bandwidth(self) -> float:
        return float(self.edges[-1] - self.edges[0])

    def contains(self, energy: float) -> bool:
        return bool(self.edges[0] <= energy <= self.edges[-1])


def _symmetric_edges(center: float, half_width: float, n_side: int, resolution: float) -> np.ndarray:
    """Edges on [center − W, center + W], geometric toward the center, with the center itself an edge"""
    d = np.concatenate([[0.0], np.geomspace(resolution * half_width, half_width, n_side)])
    return center + np.concatenate([-d[::-1], d[1:]])


def constant_dos(rho0: float, half_width: float, center: float = 0.0, n_side: int = 400,
                 resolution: float = 1e-12) -> DOSHistogram:
    if rho0 <= 0 or half_width <= 0:
        raise ArgumentError("rho0 and half_width must be positive")
    edges = _symmetric_edges(center, half_width, n_side, resolution)
    return DOSHistogram(edges, np.full(len(edges) - 1, float(rho0)), method='exact', model_id='constant')


def log_dos(K: float, half_width: float, e_vh: float = 0.0, n_side: int = 400,
            resolution: float = 1e-12) -> DOSHistogram:
    """ρ(E) = K ln(W / |E − E_VH|) on |E − E_VH| ≤ W, as exact bin averages"""
    if K <= 0 or half_width <= 0:
        raise ArgumentError("K and half_width must be positive")
    edges = _symmetric_edges(e_vh, half_width, n_side, resolution)
    x = np.abs(edges - e_vh)
    with np.errstate(divide='ignore', invalid='ignore'):
        primitive = np.where(x > 0, x * np.log(half_width / np.where(x > 0, x, 1.0)) + x, 0.0)
    mass = np.abs(np.diff(primitive))
    return DOSHistogram(edges, K * mass / np.diff(edges), method='exact', model_id='log')


def _grid_energies(model: DispersionModel, resolution: int, chunk_points: int) -> Iterator[np.ndarray]:
    lower, upper = model.domain.bounding_box()
    d = model.dimension
    step = (upper - lower) / resolution
    total = resolution ** d
    for start in range(0, total, chunk_points):
        idx = np.arange(start, min(start + chunk_points, total))
        cells = np.stack(np.unravel_index(idx, (resolution,) * d), axis=1)
        k = lower + (cells + 0.5) * step
        if model.domain.kind == 'ball':
            k = k[np.asarray(model.domain.contains(k))]
        yield model.energy(k)


def compute_dos(model: DispersionModel, n_bins: int = 400, n_samples: int | None = None, seed: int = 0,
                method: str = 'mc', resolution: int | None = None, edges: Sequence[float] | None = None,
                threads: int = 1, chunk_points: int = 1 << 20) -> DOSHistogram:
    """Histogram estimate of ∫ δ(E − e(k)) dk / (2π)^d from uniform momenta or a midpoint grid.

    Without ``edges`` the bins span the sampled band; empty bins stay 0.
    """
    if method not in ('mc', 'grid'):
        raise ArgumentError(f"unknown DOS method '{method}'")
    if not math.isfinite(model.domain.volume):
        raise DomainError("density of states needs a compact domain")
    norm = model.domain.volume / (2 * math.pi) ** model.dimension

    if method == 'mc':
        if not n_samples:
            raise ArgumentError("Monte Carlo DOS needs n_samples")

        def worker(rng, n):
            return model.energy(model.domain.sample(rng, n))

        energies = np.concatenate(run_sharded(worker, n_samples, seed, threads))
        if edges is None:
            bins = np.linspace(energies.min(), energies.max(), n_bins + 1)
        else:
            bins = np.asarray(edges, dtype=float)
        counts, _ = np.histogram(energies, bins=bins)
        rho = counts * norm / (len(energies) * np.diff(bins))
        n_used = len(energies)
    else:
        resolution = resolution or {2: 4096, 3: 512}.get(model.dimension, 64)
        if edges is None:
            lo, hi = math.inf, -math.inf
            for e in _grid_energies(model, resolution, chunk_points):
                lo, hi = min(lo, float(e.min())), max(hi, float(e.max()))
            bins = np.linspace(lo, hi, n_bins + 1)
        else:
            bins = np.asarray(edges, dtype=float)
        counts = np.zeros(len(bins) - 1)
        for e in _grid_energies(model, resolution, chunk_points):
            counts += np.histogram(e, bins=bins)[0]
        lower, upper = model.domain.bounding_box()
        cell = float(np.prod(upper - lower)) / resolution ** model.dimension
        rho = counts * cell / ((2 * math.pi) ** model.dimension * np.diff(bins))
        n_used = resolution ** model.dimension

    dos = DOSHistogram(bins, rho, method=method, n_samples=n_used, model_id=model.model_id)
    logger.info(f"DOS of {model.model_id} ({method}): {len(rho)} bins, integral {dos.total:.6f} "
                f"(zone measure {norm:.6f})")
    return dos


def dos_jump(dos: DOSHistogram, energy: float) -> tuple[float, float]:
    """Relative jump between the two bins meeting at the edge nearest ``energy``, and the mean level there"""
    i = int(np.argmin(np.abs(dos.edges - energy)))
    if i == 0 or i == len(dos.edges) - 1:
        raise ArgumentError(f"energy {energy} is not an interior edge")
    left, right = dos.rho[i - 1], dos.rho[i]
    level = 0.5 * (left + right)
    return (abs(right - left) / level if level > 0 else 0.0), float(level)


@dataclass(frozen=True, eq=False)
class LogFit:
    K: float
    W: float
    r_squared: float
    n_points: int


def _line_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    spread = np.sum((y - y.mean()) ** 2)
    r_squared = 1.0 - float(np.sum(residual ** 2) / spread) if spread > 0 else 1.0
    return float(slope), float(intercept), r_squared


def fit_log_divergence(dos: DOSHistogram, e_vh: float = 0.0, window: tuple[float, float] = (1e-3, 1e-1)) -> LogFit:
    """Fit ρ = K ln(W / |E − E_VH|) on bins with |E − E_VH| inside ``window``"""
    distance = np.abs(dos.centers - e_vh)
    mask = (distance >= window[0]) & (distance <= window[1]) & (dos.rho > 0)
    if np.count_nonzero(mask) < 4:
        raise ArgumentError(f"only {np.count_nonzero(mask)} nonempty bins inside the fit window {window}")
    slope, intercept, r_squared = _line_fit(-np.log(distance[mask]), dos.rho[mask])
    W = math.exp(intercept / slope) if slope != 0 else math.nan
    return LogFit(K=slope, W=W, r_squared=r_squared, n_points=int(np.count_nonzero(mask)))


def _kernel(xi: np.ndarray, delta: float, T: float) -> np.ndarray:
    """tanh(E / 2T) / 2E with E = √(ξ² + Δ²); the ξ, Δ → 0 limit is 1/4T"""
    energy = np.sqrt(xi ** 2 + delta ** 2)
    with np.errstate(divide='ignore'):
        if T == 0:
            return 1.0 / (2.0 * energy)
        safe = np.where(energy > 0, energy, 1.0)
        return np.where(energy > 0, np.tanh(safe / (2.0 * T)) / (2.0 * safe), 1.0 / (4.0 * T))


def gap_integral(dos: DOSHistogram, E_F: float, delta: float, T: float) -> float:
    """I(Δ, T) = Σ_bins ρ ΔE tanh(E / 2T) / 2E over the histogram support"""
    terms = dos.rho * dos.widths * _kernel(dos.centers - E_F, delta, T)
    return float(np.sum(np.where(dos.rho > 0, terms, 0.0)))


def _check_gap_inputs(dos: DOSHistogram, g: float, E_F: float):
    if g <= 0:
        raise ArgumentError(f"coupling must be positive, got {g}")
    if not dos.contains(E_F):
        raise DomainError(f"E_F = {E_F} lies outside the band [{dos.edges[0]}, {dos.edges[-1]}]")


def _bisect(fn, lo: float, hi: float, xtol: float, what: str) -> float:
    try:
        sol = root_scalar(fn, method='bisect', bracket=[lo, hi], xtol=xtol, maxiter=Config.MAX_ITER)
    except RuntimeError as e:
        raise ConvergenceError(f"{what}: bisection on [{lo:.6g}, {hi:.6g}] did not converge: {str(e)}") from e
    if not sol.converged:
        raise ConvergenceError(f"{what}: bisection on [{lo:.6g}, {hi:.6g}] stopped: {sol.flag}")
    return float(sol.root)


def solve_gap_equation(dos: DOSHistogram, g: float, E_F: float, T: float) -> float:
    """Δ > 0 with 1 = g·I(Δ, T), or 0 when g·I(0⁺, T) ≤ 1"""
    _check_gap_inputs(dos, g, E_F)
    if T < 0:
        raise ArgumentError(f"temperature must be nonnegative, got {T}")

    def excess(delta):
        return g * gap_integral(dos, E_F, delta, T) - 1.0

    if excess(0.0) <= 0:
        return 0.0
    hi = max(dos.bandwidth, 1.0)
    for _ in range(Config.MAX_ITER):
        if excess(hi) < 0:
            break
        hi *= 2.0
    else:
        raise BracketError(f"no sign change of the gap equation up to Δ = {hi:.3g}")
    return _bisect(excess, 0.0, hi, Config.GAP_TOL, f"gap equation at g={g}, T={T}")


def critical_temperature(dos: DOSHistogram, g: float, E_F: float) -> float:
    """Largest T with a nonzero gap: the root of g·I(0, T) = 1, bisected on ln T"""
    _check_gap_inputs(dos, g, E_F)
    if g * gap_integral(dos, E_F, 0.0, 0.0) <= 1.0:
        return 0.0

    def excess(log_t):
        return g * gap_integral(dos, E_F, 0.0, math.exp(log_t)) - 1.0

    hi = math.log(max(dos.bandwidth, 1.0))
    for _ in range(Config.MAX_ITER):
        if excess(hi) < 0:
            break
        hi += math.log(2.0)
    else:
        raise BracketError(f"g·I(0, T) stays above 1 up to T = {math.exp(hi):.3g}")
    lo = hi
    for _ in range(4 * Config.MAX_ITER):
        lo -= math.log(2.0)
        if excess(lo) > 0:
            break
    else:
        raise BracketError(f"g·I(0, T) stays below 1 down to T = {math.exp(lo):.3g}")
    return math.exp(_bisect(excess, lo, lo + math.log(2.0), Config.TC_RTOL, f"T_c at g={g}"))


@dataclass(frozen=True, eq=False)
class GapSolution:
    g: float
    E_F: float
    temperatures: np.ndarray
    deltas: np.ndarray
    t_c: float


def solve_gap_curve(dos: DOSHistogram, g: float, E_F: float, temperatures: Sequence[float]) -> GapSolution:
    temperatures = np.sort(np.asarray(temperatures, dtype=float))
    deltas = np.array([solve_gap_equation(dos, g, E_F, T) for T in temperatures])
    t_c = critical_temperature(dos, g, E_F)
    logger.info(f"Gap curve g={g}, E_F={E_F}: Δ(T_min)={deltas[0]:.6e}, T_c={t_c:.6e}")
    return GapSolution(g=g, E_F=E_F, temperatures=temperatures, deltas=deltas, t_c=t_c)


@dataclass(frozen=True, eq=False)
class TcFit:
    law: str
    slope: float
    intercept: float
    r_squared: float
    n_used: int
    dropped: list = field(default_factory=list)


def fit_tc_asymptotics(solutions: Sequence[tuple[float, float]], law: str = 'inv_g') -> TcFit:
    """ln T_c = intercept − slope·x with x = 1/g or 1/√g"""
    if law not in TC_LAWS:
        raise ArgumentError(f"unknown law '{law}', expected one of {TC_LAWS}")
    kept, dropped = [], []
    for g, t_c in solutions:
        (kept if t_c > 0 else dropped).append((float(g), float(t_c)))
    if dropped:
        logger.warning(f"Dropped {len(dropped)} couplings with T_c = 0: {[g for g, _ in dropped]}")
    if len(kept) < MIN_COUPLINGS:
        raise ArgumentError(f"T_c fit needs at least {MIN_COUPLINGS} couplings with T_c > 0, got {len(kept)}")
    g, t_c = np.array(kept).T
    x = -1.0 / g if law == 'inv_g' else -1.0 / np.sqrt(g)
    slope, intercept, r_squared = _line_fit(x, np.log(t_c))
    return TcFit(law=law, slope=slope, intercept=intercept, r_squared=r_squared, n_used=len(kept),
                 dropped=[g for g, _ in dropped])


def tc_scan(dos: DOSHistogram, couplings: Sequence[float], E_F: float) -> list[tuple[float, float]]:
    return [(float(g), critical_temperature(dos, g, E_F)) for g in couplings]


def dos_table(dos: DOSHistogram) -> pd.DataFrame:
    return pd.DataFrame({'E': dos.centers, 'rho': dos.rho})


def gap_table(solution: GapSolution) -> pd.DataFrame:
    return pd.DataFrame({'g': solution.g, 'T': solution.temperatures, 'delta': solution.deltas})


def tc_table(pairs: Sequence[tuple[float, float]]) -> pd.DataFrame:
    return pd.DataFrame(list(pairs), columns=['g', 't_c'])
