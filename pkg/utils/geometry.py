"""Dispersion models with Van Hove points, singular-point search and Fermi-surface sampling"""
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import gamma
from scipy.stats import special_ortho_group

from config import Config
from utils.errors import ArgumentError, BracketError, DomainError, EmptySurfaceError
from utils.sampling import ShardDraw, draw_until

logger = logging.getLogger(__name__)


def ball_volume(dimension: int, radius: float) -> float:
    return math.pi ** (dimension / 2) / gamma(dimension / 2 + 1) * radius ** dimension


def sample_ball(rng: np.random.Generator, n: int, center: np.ndarray, radius: float) -> np.ndarray:
    """Uniform points in a Euclidean ball"""
    d = len(center)
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    return center + direction * r[:, None]


def random_rotation(dimension: int, seed: int) -> np.ndarray:
    return special_ortho_group.rvs(dimension, random_state=seed)


@dataclass(frozen=True, eq=False)
class Domain:
    """Axis-aligned box (optionally periodic) or ball centred at the origin"""
    kind: str
    dim: int
    lower: tuple = ()
    upper: tuple = ()
    radius: float = 0.0
    periodic: bool = False

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float], periodic: bool = False) -> "Domain":
        lower, upper = tuple(float(x) for x in lower), tuple(float(x) for x in upper)
        if len(lower) != len(upper) or any(lo >= hi for lo, hi in zip(lower, upper)):
            raise ArgumentError(f"invalid box bounds {lower} .. {upper}")
        return cls(kind='box', dim=len(lower), lower=lower, upper=upper, periodic=periodic)

    @classmethod
    def ball(cls, dimension: int, radius: float) -> "Domain":
        if radius <= 0:
            raise ArgumentError(f"ball radius must be positive, got {radius}")
        return cls(kind='ball', dim=dimension, radius=float(radius))

    @classmethod
    def brillouin_zone(cls, dimension: int) -> "Domain":
        return cls.box([-math.pi] * dimension, [math.pi] * dimension, periodic=True)

    @property
    def dimension(self) -> int:
        return self.dim

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == 'box':
            return np.array(self.lower), np.array(self.upper)
        return np.full(self.dim, -self.radius), np.full(self.dim, self.radius)

    @property
    def volume(self) -> float:
        if self.kind == 'box':
            lower, upper = self.bounding_box()
            return float(np.prod(upper - lower))
        return ball_volume(self.dim, self.radius)

    @property
    def diameter(self) -> float:
        if self.kind == 'ball':
            return 2.0 * self.radius
        lower, upper = self.bounding_box()
        span = np.linalg.norm(upper - lower)
        return float(span / 2 if self.periodic else span)

    def contains(self, k, atol: float = 1e-12):
        """Membership test; a periodic box contains every point of the torus"""
        k = np.asarray(k, dtype=float)
        if self.kind == 'box':
            if self.periodic:
                return np.ones(k.shape[:-1], dtype=bool) if k.ndim > 1 else True
            lower, upper = self.bounding_box()
            inside = np.all((k >= lower - atol) & (k <= upper + atol), axis=-1)
        else:
            inside = np.linalg.norm(k, axis=-1) <= self.radius + atol
        return inside if k.ndim > 1 else bool(inside)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == 'box':
            lower, upper = self.bounding_box()
            return lower + (upper - lower) * rng.random((n, self.dim))
        return sample_ball(rng, n, np.zeros(self.dim), self.radius)

    def wrap(self, k: np.ndarray) -> np.ndarray:
        if not self.periodic:
            return k
        lower, upper = self.bounding_box()
        return lower + np.mod(k - lower, upper - lower)

    def distance(self, a, b) -> np.ndarray:
        """Torus metric on periodic boxes, Euclidean otherwise"""
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.periodic:
            lower, upper = self.bounding_box()
            span = upper - lower
            diff = diff - span * np.round(diff / span)
        return np.linalg.norm(diff, axis=-1)


class DispersionModel:
    """Single band e(k) with analytic gradient and Hessian on a bounded domain.

    Subclasses implement ``_energy``, ``_gradient`` and ``_hessian`` on
    ``(n, d)`` arrays; the public methods also accept a single ``(d,)`` point.
    """
    kind = 'abstract'

    def __init__(self, dimension: int, domain: Domain):
        if dimension < 2:
            raise ArgumentError(f"dimension must be at least 2, got {dimension}")
        if domain.dimension != dimension:
            raise ArgumentError(f"domain dimension {domain.dimension} does not match model dimension {dimension}")
        self.dimension = dimension
        self.domain = domain

    def parameters(self) -> dict:
        return {}

    @property
    def model_id(self) -> str:
        params = ",".join(f"{key}={value}" for key, value in self.parameters().items())
        return f"{self.kind}({params})"

    def _apply(self, fn, k):
        k = np.asarray(k, dtype=float)
        single = k.ndim == 1
        out = fn(k.reshape(-1, self.dimension))
        return out[0] if single else out

    def energy(self, k):
        return self._apply(self._energy, k)

    def gradient(self, k):
        return self._apply(self._gradient, k)

    def hessian(self, k):
        return self._apply(self._hessian, k)

    def _energy(self, k: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _gradient(self, k: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _hessian(self, k: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return self.model_id


class TightBinding2D(DispersionModel):
    """Square lattice with nearest and next-nearest neighbour hopping"""
    kind = 'tight_binding_2d'

    def __init__(self, t: float = 1.0, tprime: float = 0.0, mu: float = 0.0):
        super().__init__(2, Domain.brillouin_zone(2))
        self.t, self.tprime, self.mu = float(t), float(tprime), float(mu)

    def parameters(self):
        return {'t': self.t, 'tprime': self.tprime, 'mu': self.mu}

    @property
    def van_hove_energy(self) -> float:
        return 4.0 * self.tprime - self.mu

    def _energy(self, k):
        cx, cy = np.cos(k[:, 0]), np.cos(k[:, 1])
        return -2 * self.t * (cx + cy) - 4 * self.tprime * cx * cy - self.mu

    def _gradient(self, k):
        cx, cy = np.cos(k[:, 0]), np.cos(k[:, 1])
        sx, sy = np.sin(k[:, 0]), np.sin(k[:, 1])
        return np.stack([
            2 * self.t * sx + 4 * self.tprime * sx * cy,
            2 * self.t * sy + 4 * self.tprime * cx * sy,
        ], axis=1)

    def _hessian(self, k):
        cx, cy = np.cos(k[:, 0]), np.cos(k[:, 1])
        sx, sy = np.sin(k[:, 0]), np.sin(k[:, 1])
        off = -4 * self.tprime * sx * sy
        hess = np.empty((len(k), 2, 2))
        hess[:, 0, 0] = 2 * self.t * cx + 4 * self.tprime * cx * cy
        hess[:, 1, 1] = 2 * self.t * cy + 4 * self.tprime * cx * cy
        hess[:, 0, 1] = off
        hess[:, 1, 0] = off
        return hess


class TightBinding3D(DispersionModel):
    """Simple cubic lattice; saddle energies at ±2t"""
    kind = 'tight_binding_3d'

    def __init__(self, t: float = 1.0, mu: float = 0.0):
        super().__init__(3, Domain.brillouin_zone(3))
        self.t, self.mu = float(t), float(mu)

    def parameters(self):
        return {'t': self.t, 'mu': self.mu}

    def _energy(self, k):
        return -2 * self.t * np.cos(k).sum(axis=1) - self.mu

    def _gradient(self, k):
        return 2 * self.t * np.sin(k)

    def _hessian(self, k):
        hess = np.zeros((len(k), 3, 3))
        idx = np.arange(3)
        hess[:, idx, idx] = 2 * self.t * np.cos(k)
        return hess


class QuadraticForm(DispersionModel):
    """e(k) = Σ_{i<m} λᵢyᵢ² − Σ_{i≥m} λᵢyᵢ² with y = R k for an optional rotation R"""
    kind = 'quadratic_form'

    def __init__(self, lambdas: Sequence[float], m: int, radius: float = 1.0,
                 domain: Domain | None = None, rotation: np.ndarray | None = None):
        lambdas = np.asarray(lambdas, dtype=float)
        d = len(lambdas)
        if np.any(lambdas <= 0):
            raise ArgumentError("eigenvalues must be positive")
        if not 0 <= m <= d:
            raise ArgumentError(f"m must lie in [0, {d}], got {m}")
        super().__init__(d, domain if domain is not None else Domain.ball(d, radius))
        self.lambdas = lambdas
        self.m = int(m)
        self.signs = np.where(np.arange(d) < m, 1.0, -1.0)
        self.coefficients = self.signs * lambdas
        if rotation is not None:
            rotation = np.asarray(rotation, dtype=float)
            if rotation.shape != (d, d) or not np.allclose(rotation @ rotation.T, np.eye(d), atol=1e-10):
                raise ArgumentError("rotation must be an orthogonal d×d matrix")
        self.rotation = rotation

    def parameters(self):
        params = {'m': self.m, 'lambdas': list(self.lambdas)}
        if self.rotation is not None:
            params['rotated'] = True
        return params

    def _rotate(self, k):
        return k if self.rotation is None else k @ self.rotation.T

    def metric_radius(self, k):
        """R(k) = sqrt(Σ λᵢ yᵢ²)"""
        y = self._rotate(np.atleast_2d(np.asarray(k, dtype=float)))
        out = np.sqrt((y ** 2) @ self.lambdas)
        return out if np.ndim(k) > 1 else float(out[0])

    def _energy(self, k):
        y = self._rotate(k)
        return (y ** 2) @ self.coefficients

    def _gradient(self, k):
        grad = 2 * self._rotate(k) * self.coefficients
        return grad if self.rotation is None else grad @ self.rotation

    def _hessian(self, k):
        hess = 2 * np.diag(self.coefficients)
        if self.rotation is not None:
            hess = self.rotation.T @ hess @ self.rotation
        return np.broadcast_to(hess, (len(k), self.dimension, self.dimension)).copy()


def symmetrize_cubic(tensor: np.ndarray) -> np.ndarray:
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    return sum(np.transpose(tensor, p) for p in perms) / 6.0


class PerturbedCone(QuadraticForm):
    """Quadratic cone plus a cubic perturbation G(k) = T·k·k·k with T symmetric"""
    kind = 'perturbed_cone'

    def __init__(self, lambdas: Sequence[float], m: int, cubic: np.ndarray, radius: float = 1.0):
        super().__init__(lambdas, m, radius=radius)
        cubic = np.asarray(cubic, dtype=float)
        d = self.dimension
        if cubic.shape != (d, d, d):
            raise ArgumentError(f"cubic tensor must have shape {(d, d, d)}, got {cubic.shape}")
        self.cubic = symmetrize_cubic(cubic)
        norm = float(np.linalg.norm(self.cubic))
        lam_min = float(self.lambdas.min())
        self.g0 = norm / lam_min ** 1.5
        self.g1 = 3.0 * norm / lam_min

    @classmethod
    def random(cls, lambdas: Sequence[float], m: int, strength: float, seed: int,
               radius: float = 1.0) -> "PerturbedCone":
        """Cone with a random symmetric cubic term of Frobenius norm ``strength``"""
        d = len(lambdas)
        raw = symmetrize_cubic(np.random.default_rng(seed).standard_normal((d, d, d)))
        norm = np.linalg.norm(raw)
        return cls(lambdas, m, raw * (strength / norm if norm > 0 else 0.0), radius=radius)

    def parameters(self):
        params = super().parameters()
        params['cubic_norm'] = float(np.linalg.norm(self.cubic))
        return params

    def perturbation(self, k):
        k = np.atleast_2d(np.asarray(k, dtype=float))
        return np.einsum('abc,na,nb,nc->n', self.cubic, k, k, k)

    def _energy(self, k):
        return super()._energy(k) + self.perturbation(k)

    def _gradient(self, k):
        return super()._gradient(k) + 3 * np.einsum('abc,nb,nc->na', self.cubic, k, k)

    def _hessian(self, k):
        return super()._hessian(k) + 6 * np.einsum('abc,nc->nab', self.cubic, k)


class LinearBand(DispersionModel):
    """e(k) = k₁ − μ on a box; flat Fermi surface with parallel normals"""
    kind = 'linear_band'

    def __init__(self, dimension: int = 2, lower: float = -1.0, upper: float = 1.0, mu: float = 0.0):
        super().__init__(dimension, Domain.box([lower] * dimension, [upper] * dimension))
        self.mu = float(mu)

    def parameters(self):
        lower, upper = self.domain.bounding_box()
        return {'dimension': self.dimension, 'lower': float(lower[0]), 'upper': float(upper[0]), 'mu': self.mu}

    def _energy(self, k):
        return k[:, 0] - self.mu

    def _gradient(self, k):
        grad = np.zeros_like(k)
        grad[:, 0] = 1.0
        return grad

    def _hessian(self, k):
        return np.zeros((len(k), self.dimension, self.dimension))


# Parameters accepted per model kind in configuration records, with defaults
MODEL_PARAMETERS = {
    'tight_binding_2d': {'t': 1.0, 'tprime': 0.0, 'mu': 0.0},
    'tight_binding_3d': {'t': 1.0, 'mu': 0.0},
    'quadratic_form': {'lambdas': None, 'm': None, 'radius': 1.0, 'box': None, 'rotation_seed': None},
    'perturbed_cone': {'lambdas': None, 'm': None, 'radius': 1.0, 'cubic_strength': 0.0, 'cubic_seed': 0},
    'linear_band': {'dimension': 2, 'lower': -1.0, 'upper': 1.0, 'mu': 0.0},
}


def build_model(record: dict) -> DispersionModel:
    """Construct a model from a configuration record ``{'kind': ..., **params}``"""
    record = dict(record)
    kind = record.pop('kind', None)
    if kind not in MODEL_PARAMETERS:
        raise ArgumentError(f"unknown model kind '{kind}'")
    unknown = set(record) - set(MODEL_PARAMETERS[kind])
    if unknown:
        raise ArgumentError(f"unknown parameters for {kind}: {sorted(unknown)}")
    params = {**MODEL_PARAMETERS[kind], **record}
    missing = [key for key, value in params.items()
               if value is None and key in ('lambdas', 'm')]
    if missing:
        raise ArgumentError(f"missing parameters for {kind}: {missing}")

    if kind == 'tight_binding_2d':
        return TightBinding2D(params['t'], params['tprime'], params['mu'])
    if kind == 'tight_binding_3d':
        return TightBinding3D(params['t'], params['mu'])
    if kind == 'quadratic_form':
        d = len(params['lambdas'])
        domain = None
        if params['box'] is not None:
            lo, hi = params['box']
            domain = Domain.box([lo] * d, [hi] * d)
        rotation = None
        if params['rotation_seed'] is not None:
            rotation = random_rotation(d, int(params['rotation_seed']))
        return QuadraticForm(params['lambdas'], int(params['m']), radius=params['radius'],
                             domain=domain, rotation=rotation)
    if kind == 'perturbed_cone':
        return PerturbedCone.random(params['lambdas'], int(params['m']), float(params['cubic_strength']),
                                    int(params['cubic_seed']), radius=params['radius'])
    return LinearBand(int(params['dimension']), params['lower'], params['upper'], params['mu'])


@dataclass(frozen=True, eq=False)
class ModelValues:
    e: float
    grad: np.ndarray
    hess: np.ndarray


def evaluate_model(model: DispersionModel, k) -> ModelValues:
    """Energy, gradient and Hessian at a single domain point"""
    k = np.asarray(k, dtype=float)
    if k.shape != (model.dimension,):
        raise ArgumentError(f"expected a {model.dimension}-vector, got shape {k.shape}")
    if not model.domain.contains(k):
        raise DomainError(f"k={k.tolist()} lies outside the domain of {model.model_id}")
    return ModelValues(e=float(model.energy(k)), grad=model.gradient(k), hess=model.hessian(k))


@dataclass(frozen=True, eq=False)
class SingularPoint:
    location: np.ndarray
    energy: float
    gradient_residual: float
    eigenvalues: np.ndarray
    signature: tuple

    @property
    def m(self) -> int:
        return self.signature[0]

    @property
    def is_saddle(self) -> bool:
        return 1 <= self.signature[0] <= len(self.eigenvalues) - 1

    @property
    def degenerate(self) -> bool:
        return bool(np.any(np.abs(self.eigenvalues) < Config.HESS_TOL))


@dataclass(frozen=True)
class SingularSearch:
    points: tuple
    degenerate: tuple
    n_seeds: int
    n_converged: int


def seed_grid(model: DispersionModel, per_axis: int | None = None, max_seeds: int | None = None) -> np.ndarray:
    """Cell-midpoint grid over the domain's bounding box, capped in size"""
    per_axis = per_axis or Config.SEED_GRID
    max_seeds = max_seeds or Config.MAX_SEEDS
    d = model.dimension
    while per_axis > 1 and per_axis ** d > max_seeds:
        per_axis -= 1
    lower, upper = model.domain.bounding_box()
    axes = [lo + (np.arange(per_axis) + 0.5) * (hi - lo) / per_axis for lo, hi in zip(lower, upper)]
    grid = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, d)
    if model.domain.kind == 'ball':
        grid = grid[model.domain.contains(grid)]
    return grid


def _newton_critical_points(model: DispersionModel, seeds: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Multi-start Newton on ∇e = 0; returns the final iterates"""
    x = seeds.copy()
    active = np.arange(len(x))
    for _ in range(max_iter):
        if len(active) == 0:
            break
        xa = x[active]
        grad = model.gradient(xa)
        still = np.linalg.norm(grad, axis=1) >= tol
        active, xa, grad = active[still], xa[still], grad[still]
        if len(active) == 0:
            break
        step = np.einsum('nij,nj->ni', np.linalg.pinv(model.hessian(xa)), grad)
        x[active] = model.domain.wrap(xa - step)
    return x


def search_singular_points(model: DispersionModel, newton_tol: float | None = None,
                           surf_tol: float | None = None, hess_tol: float | None = None,
                           dedup_radius: float | None = None, per_axis: int | None = None,
                           max_seeds: int | None = None) -> SingularSearch:
    """Critical points of e on its Fermi surface, split into nondegenerate and degenerate"""
    newton_tol = newton_tol or Config.NEWTON_TOL
    surf_tol = surf_tol or Config.SURF_TOL
    hess_tol = hess_tol or Config.HESS_TOL
    dedup_radius = dedup_radius or Config.DEDUP_RADIUS

    seeds = seed_grid(model, per_axis, max_seeds)
    roots = _newton_critical_points(model, seeds, newton_tol, Config.NEWTON_MAX_ITER)
    residual = np.linalg.norm(model.gradient(roots), axis=1)
    ok = (residual < newton_tol) & np.asarray(model.domain.contains(roots))
    n_converged = int(ok.sum())
    on_surface = ok & (np.abs(model.energy(roots)) < surf_tol)

    kept: list[np.ndarray] = []
    for root in roots[on_surface]:
        if kept and np.min(model.domain.distance(np.array(kept), root)) < dedup_radius:
            continue
        kept.append(root)

    points, degenerate = [], []
    for root in kept:
        eigenvalues = np.linalg.eigvalsh(model.hessian(root))
        point = SingularPoint(
            location=root,
            energy=float(model.energy(root)),
            gradient_residual=float(np.linalg.norm(model.gradient(root))),
            eigenvalues=eigenvalues,
            signature=(int(np.sum(eigenvalues > 0)), int(np.sum(eigenvalues < 0))),
        )
        if np.any(np.abs(eigenvalues) < hess_tol):
            logger.warning(f"Degenerate critical point at {root.tolist()} on {model.model_id}: "
                           f"eigenvalues {eigenvalues.tolist()}")
            degenerate.append(point)
        else:
            points.append(point)

    logger.info(f"Singular-point search on {model.model_id}: {len(seeds)} seeds, "
                f"{n_converged} converged, {len(points)} nondegenerate, {len(degenerate)} degenerate")
    return SingularSearch(points=tuple(points), degenerate=tuple(degenerate),
                          n_seeds=len(seeds), n_converged=n_converged)


def find_singular_points(model: DispersionModel, **kwargs) -> list[SingularPoint]:
    return list(search_singular_points(model, **kwargs).points)


def has_fermi_surface(model: DispersionModel, resolution: int = 64) -> bool:
    """Coarse grid scan for a sign change of e"""
    grid = seed_grid(model, per_axis=resolution, max_seeds=1 << 18)
    if len(grid) == 0:
        return False
    energies = model.energy(grid)
    return bool(energies.min() <= 0.0 <= energies.max())


@dataclass(frozen=True, eq=False)
class SurfaceSample:
    point: np.ndarray
    normal: np.ndarray
    coarea_weight: float
    measure: float
    excised: bool


@dataclass(frozen=True, eq=False)
class SurfaceSampleSet:
    """Fermi-surface samples stored column-wise.

    ``measures`` are vol_{d-1} weights (sum ≈ surface area); ``coarea_weights``
    are 1/|∇e(ω)| at the projected points.
    """
    model_id: str
    points: np.ndarray
    normals: np.ndarray
    coarea_weights: np.ndarray
    measures: np.ndarray
    excised: np.ndarray
    n_drawn: int = 0
    n_rejected_flat: int = 0
    n_rejected_projection: int = 0
    h_surf: float = 0.0
    excision_radius: float = 0.0
    singular_points: tuple = field(default=())
    domain: Domain | None = None

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> SurfaceSample:
        return SurfaceSample(point=self.points[i], normal=self.normals[i],
                             coarea_weight=float(self.coarea_weights[i]),
                             measure=float(self.measures[i]), excised=bool(self.excised[i]))

    def __iter__(self) -> Iterator[SurfaceSample]:
        return (self[i] for i in range(len(self)))

    @property
    def total_measure(self) -> float:
        return float(self.measures.sum())

    def subset(self, mask: np.ndarray) -> "SurfaceSampleSet":
        mask = np.asarray(mask)
        return SurfaceSampleSet(
            model_id=self.model_id, points=self.points[mask], normals=self.normals[mask],
            coarea_weights=self.coarea_weights[mask], measures=self.measures[mask],
            excised=self.excised[mask], n_drawn=self.n_drawn, n_rejected_flat=self.n_rejected_flat,
            n_rejected_projection=self.n_rejected_projection, h_surf=self.h_surf,
            excision_radius=self.excision_radius, singular_points=self.singular_points,
            domain=self.domain,
        )

    def outside_excision(self) -> "SurfaceSampleSet":
        return self.subset(~self.excised)

    def distance(self, a, b) -> np.ndarray:
        if self.domain is not None:
            return self.domain.distance(a, b)
        return np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1)

    def with_excision(self, radius: float) -> "SurfaceSampleSet":
        """Same samples re-flagged for a different excision radius"""
        excised = np.zeros(len(self), dtype=bool)
        for location in self.singular_points:
            excised |= self.distance(self.points, location) < radius
        return SurfaceSampleSet(
            model_id=self.model_id, points=self.points, normals=self.normals,
            coarea_weights=self.coarea_weights, measures=self.measures, excised=excised,
            n_drawn=self.n_drawn, n_rejected_flat=self.n_rejected_flat,
            n_rejected_projection=self.n_rejected_projection, h_surf=self.h_surf,
            excision_radius=radius, singular_points=self.singular_points, domain=self.domain,
        )


def _project_to_surface(model: DispersionModel, x: np.ndarray, steps: int) -> np.ndarray:
    """Newton steps along ∇e onto the zero level set"""
    for _ in range(steps):
        e = model.energy(x)
        grad = model.gradient(x)
        gg = np.einsum('ni,ni->n', grad, grad)
        scale = np.divide(e, gg, out=np.zeros_like(e), where=gg > 0)
        x = model.domain.wrap(x - scale[:, None] * grad)
    return x


def sample_fermi_surface(model: DispersionModel, n_samples: int, rng_seed: int,
                         h_surf: float | None = None, excision_radius: float | None = None,
                         singular_points: Sequence[SingularPoint] | None = None,
                         threads: int = 1, max_draws: int | None = None) -> SurfaceSampleSet:
    """Thin-shell rejection sampling of F with coarea weights.

    Uniform draws with |e| ≤ h_surf are projected onto F by Newton steps along
    ∇e; a draw carries the surface measure V|∇e|/(2 h_surf N) of the shell slab
    it represents.
    """
    h_surf = h_surf or Config.H_SURF
    excision_radius = Config.EXCISION_RADIUS if excision_radius is None else excision_radius
    if n_samples <= 0:
        raise ArgumentError(f"n_samples must be positive, got {n_samples}")
    if not has_fermi_surface(model):
        raise EmptySurfaceError(f"{model.model_id} has no Fermi surface in its domain")
    if singular_points is None:
        singular_points = find_singular_points(model)
    max_draws = max_draws or (20000 * n_samples + 10 ** 6)
    domain = model.domain

    def worker(rng, n):
        k = domain.sample(rng, n)
        idx = np.flatnonzero(np.abs(model.energy(k)) <= h_surf)
        hits = k[idx]
        grad_norm = np.linalg.norm(model.gradient(hits), axis=1) if len(idx) else np.zeros(0)
        return ShardDraw(payload=(hits, grad_norm), positions=idx)

    draw = draw_until(worker, n_samples, rng_seed, threads=threads, max_draws=max_draws)
    if draw.n_accepted == 0:
        raise EmptySurfaceError(f"no shell hits on {model.model_id} after {draw.n_drawn} draws")
    hits, grad_norm = draw.payload

    flat = grad_norm < Config.GRAD_FLOOR
    measures = domain.volume * grad_norm / (2.0 * h_surf * draw.n_drawn)
    points = _project_to_surface(model, hits[~flat], Config.PROJECTION_STEPS)
    measures = measures[~flat]

    grad = model.gradient(points)
    norms = np.linalg.norm(grad, axis=1)
    good = ((np.abs(model.energy(points)) < Config.SURF_TOL) & (norms >= Config.GRAD_FLOOR)
            & np.asarray(domain.contains(points)))
    n_rejected_projection = int((~good).sum())
    points, grad, norms, measures = points[good], grad[good], norms[good], measures[good]

    excised = np.zeros(len(points), dtype=bool)
    locations = tuple(p.location for p in singular_points)
    for location in locations:
        excised |= domain.distance(points, location) < excision_radius

    if flat.any() or n_rejected_projection:
        logger.info(f"Surface sampling on {model.model_id}: rejected {int(flat.sum())} flat-gradient "
                    f"and {n_rejected_projection} unprojected candidates")
    return SurfaceSampleSet(
        model_id=model.model_id, points=points, normals=grad / norms[:, None],
        coarea_weights=1.0 / norms, measures=measures, excised=excised,
        n_drawn=draw.n_drawn, n_rejected_flat=int(flat.sum()),
        n_rejected_projection=n_rejected_projection, h_surf=h_surf,
        excision_radius=excision_radius, singular_points=locations, domain=domain,
    )


def sin_angle(a, b):
    """Sine of the angle between a and b via the half-angle form 2·atan2(|â−b̂|, |â+b̂|)"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ArgumentError("sin_angle is undefined for a zero vector")
    ua, ub = a / na, b / nb
    theta = 2.0 * np.arctan2(np.linalg.norm(ua - ub, axis=-1), np.linalg.norm(ua + ub, axis=-1))
    result = np.clip(np.sin(theta), 0.0, 1.0)
    return float(result) if np.ndim(result) == 0 else result


def projection_angles(normal, a, m: int):
    """Sines of the angles between the first-m and last-(d−m) projections of two vectors"""
    normal = np.asarray(normal, dtype=float)
    a = np.asarray(a, dtype=float)
    return (sin_angle(normal[..., :m], a[..., :m]), sin_angle(normal[..., m:], a[..., m:]))


@dataclass(frozen=True)
class RayIntersection:
    r1: float
    r2: float
    s: float
    residual: float


def ray_intersection(model: QuadraticForm, theta1, theta2, r: float,
                     root_tol: float | None = None) -> RayIntersection:
    """Unique (r₁, r₂) with r₁² + r₂² = r² and e(r₁θ₁, r₂θ₂) = 0.

    θ₁ and θ₂ are rescaled onto the ellipsoids Σλθ² = 1 of their coordinate
    blocks; the root is found in s = r₁ − r₂ where s ↦ e/√(2r² − s²) is
    monotone.
    """
    root_tol = root_tol or Config.ROOT_TOL
    if not isinstance(model, QuadraticForm) or model.rotation is not None:
        raise ArgumentError("ray_intersection needs an unrotated quadratic or perturbed cone")
    if r <= 0:
        raise ArgumentError(f"r must be positive, got {r}")
    m = model.m
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    if theta1.shape != (m,) or theta2.shape != (model.dimension - m,):
        raise ArgumentError("theta blocks do not match the signature of the form")
    n1 = math.sqrt(float(theta1 ** 2 @ model.lambdas[:m]))
    n2 = math.sqrt(float(theta2 ** 2 @ model.lambdas[m:]))
    if n1 == 0 or n2 == 0:
        raise ArgumentError("theta blocks must be nonzero")
    theta1, theta2 = theta1 / n1, theta2 / n2

    extent = r / math.sqrt(float(model.lambdas.min()))
    if model.domain.kind == 'ball':
        if extent > model.domain.radius:
            raise DomainError(f"ellipsoid R(k)={r} leaves the domain ball of radius {model.domain.radius}")
    else:
        lower, upper = model.domain.bounding_box()
        if np.any(-extent < lower) or np.any(extent > upper):
            raise DomainError(f"ellipsoid R(k)={r} leaves the domain box")

    def point(s):
        q = math.sqrt(max(2 * r * r - s * s, 0.0))
        return (s + q) / 2, (q - s) / 2, q

    def reduced(s):
        r1, r2, q = point(s)
        return float(model.energy(np.concatenate([r1 * theta1, r2 * theta2]))) / q

    lo, hi = reduced(-r), reduced(r)
    if lo * hi > 0:
        raise BracketError(f"no sign change of the reduced energy on [-{r}, {r}] "
                           f"(values {lo:.3e}, {hi:.3e}); smallness hypotheses violated")
    s = brentq(reduced, -r, r, xtol=root_tol)
    r1, r2, _ = point(s)
    residual = float(model.energy(np.concatenate([r1 * theta1, r2 * theta2])))
    return RayIntersection(r1=r1, r2=r2, s=s, residual=residual)
