"""Experiment runner: YAML configurations, dispatch to the estimators, CSV and JSON results.

An experiment document names one experiment id, a model record, numeric
parameters and pass/fail thresholds. Thresholds are ``<metric>_min`` or
``<metric>_max`` keys checked against the metrics the experiment reports.
"""
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
import yaml

from config import Config
from utils.diagrams import (
    bubble, bubble_chain, build_forest, crossed_ladder, derivative_bound_report, exponent_identity_sweep,
    insert_two_legged, ledger_table, parse_graph, power_count_bound, ring, sunset,
)
from utils.errors import ArgumentError, ConfigValidationError, ExperimentError, VanHoveError
from utils.geometry import build_model, sample_fermi_surface
from utils.meanfield import (
    TC_LAWS, compute_dos, constant_dos, dos_jump, dos_table, fit_log_divergence, fit_tc_asymptotics, log_dos,
    solve_gap_equation, tc_scan, tc_table,
)
from utils.multiscale import (
    Interaction, default_displacements, holder_probe, probe_function, probe_table, self_energy_sequence,
    self_energy_table,
)
from utils.nesting import NestingSpec, check_transversality_floor, default_betas, estimate_kappa, nesting_samples, nesting_table
from utils.overlap import (
    OverlapSpec, default_q_points, epsilon_from_kappa, exceptional_fraction, fit_overlap_exponent, i2_table,
    scan_eps3, scan_zeta, w_table,
)
from utils.shellvol import ShellSpec, ScalingFit, fit_scaling_exponent, scan_scales, volumes_table

logger = logging.getLogger(__name__)

REQUIRED = object()
TOP_LEVEL_KEYS = ('experiment', 'description', 'model', 'params', 'thresholds', 'seed', 'output')
MODEL_OPTIONAL = ('diagrams_report', 'bcs')
BUDGET_KEYS = ('n_samples', 'n_surface')

GRAPHS = {
    'sunset': sunset,
    'bubble': bubble,
    'bubble_chain': lambda: bubble_chain(2),
    'crossed_ladder': crossed_ladder,
    'ring': ring,
    'dressed_sunset': lambda: insert_two_legged(sunset(), 2),
}


# Schema

def _exceeds(bound):
    return lambda v: None if v > bound else f"must exceed {bound:g}"


def _at_least(bound):
    return lambda v: None if v >= bound else f"must be at least {bound:g}"


def _at_most(bound):
    return lambda v: None if v <= bound else f"must be at most {bound:g}"


def _open_interval(lo, hi):
    return lambda v: None if lo < v < hi else f"must lie in ({lo:g}, {hi:g})"


def _half_open(lo, hi):
    return lambda v: None if lo < v <= hi else f"must lie in ({lo:g}, {hi:g}]"


def _sign(v):
    return None if v in (1, -1) else "must be 1 or -1"


def _each(check):
    def run(values):
        for value in values:
            message = check(value)
            if message:
                return f"every entry {message}"
        return None
    return run


@dataclass(frozen=True)
class Param:
    kind: str
    default: object = REQUIRED
    check: Callable | None = None
    choices: tuple = ()
    nullable: bool = False


def _budget(default, minimum=1):
    return Param('int', default, _at_least(minimum))


SCALE_BASE = Param('float', Config.SCALE_BASE, _exceeds(1))
FORMS = ('power', 'log')

PARAMETERS = {
    'shellvol': {
        'M': SCALE_BASE,
        'j_min': Param('int', Config.J_WINDOW[0], _at_most(-1)),
        'j_max': Param('int', Config.J_WINDOW[1], _at_most(-1)),
        'n_samples': _budget(10 ** 6),
        'form': Param('str', 'power', choices=FORMS),
        'method': Param('str', 'mc', choices=('mc', 'grid')),
        'weighted': Param('bool', False),
    },
    'ball_shellvol': {
        'M': SCALE_BASE,
        'j_min': Param('int', -10, _at_most(-1)),
        'j_max': Param('int', -6, _at_most(-1)),
        'epsilon': Param('float', 0.25, _open_interval(0, 0.5)),
        'center': Param('floats', None, nullable=True),
        'n_samples': _budget(10 ** 6),
        'form': Param('str', 'power', choices=FORMS),
    },
    'nesting': {
        'n_betas': _budget(Config.N_BETAS, 3),
        'beta_min': Param('float', Config.BETA_RANGE[0], _open_interval(0, 1)),
        'beta_max': Param('float', Config.BETA_RANGE[1], _open_interval(0, 1)),
        'n_reference': _budget(Config.N_REFERENCE),
        'n_surface': _budget(Config.N_SURFACE, 1000),
        'excision_radius': Param('float', Config.EXCISION_RADIUS, _at_least(0)),
        'floor': Param('bool', True),
    },
    'overlap_i2': {
        'eps1': Param('float', 2.0 ** -8, _half_open(0, 1)),
        'eps2': Param('float', 2.0 ** -8, _half_open(0, 1)),
        'eps3_j_min': Param('int', -8, _at_most(0)),
        'eps3_j_max': Param('int', -3, _at_most(0)),
        'delta': Param('float', 0.2, _at_least(0)),
        'n_q': _budget(Config.N_Q),
        'n_samples': _budget(10 ** 5),
        'kappa': Param('float', 1.0, _exceeds(0)),
        'v1': Param('int', 1, _sign),
        'v2': Param('int', 1, _sign),
    },
    'overlap_w': {
        'zeta_j_min': Param('int', -10, _at_most(-1)),
        'zeta_j_max': Param('int', -4, _at_most(-1)),
        'delta': Param('float', 0.0, _at_least(0)),
        'n_q': _budget(8),
        'n_samples': _budget(2000, 2),
        'kappa': Param('float', 1.0, _exceeds(0)),
        'v1': Param('int', 1, _sign),
        'v2': Param('int', 1, _sign),
    },
    'diagrams_report': {
        'graph': Param('str', 'sunset', choices=tuple(GRAPHS)),
        'graph_text': Param('str', None, nullable=True),
        'scales': Param('ints', None, _each(_at_most(-1)), nullable=True),
        'M': SCALE_BASE,
        's0': Param('int', 0, _open_interval(-1, 3)),
        's': Param('int', 0, _open_interval(-1, 3)),
        'epsilon': Param('float', 0.1, _open_interval(0, 1)),
        'sweep_graphs': _budget(200, 0),
        'max_order': _budget(6, 2),
        'j_floor': Param('int', -4, _at_most(-1)),
    },
    'selfenergy': {
        'q': Param('floats'),
        's': Param('float', 0.5, _open_interval(0, 1)),
        'n_displacements': _budget(8, 4),
        'n_samples': _budget(20000, 2),
        'j_floor': Param('int', Config.J_FLOOR, _at_most(-4)),
        'floors': Param('ints', None, _each(_at_most(-4)), nullable=True),
        'pool_size': _budget(Config.POOL_SIZE),
        'strength': Param('float', 1.0),
        'width': Param('float', None, _exceeds(0), nullable=True),
        'M': SCALE_BASE,
    },
    'dos': {
        'method': Param('str', 'grid', choices=('grid', 'mc')),
        'resolution': _budget(4096, 2),
        'n_samples': _budget(10 ** 6),
        'e_min': Param('float', -0.1),
        'e_max': Param('float', 0.1),
        'n_bins': _budget(200, 4),
        'e_vh': Param('float', 0.0),
        'window': Param('floats', [1e-3, 1e-1], _each(_exceeds(0))),
        'fit': Param('str', 'log', choices=('log', 'jump')),
    },
    'bcs': {
        'source': Param('str', 'constant', choices=('constant', 'log', 'model')),
        'rho0': Param('float', 1.0, _exceeds(0)),
        'K': Param('float', 1.0, _exceeds(0)),
        'half_width': Param('float', 1.0, _exceeds(0)),
        'e_vh': Param('float', 0.0),
        'couplings': Param('floats', check=_each(_exceeds(0))),
        'E_F': Param('float', 0.0),
        'law': Param('str', 'inv_g', choices=TC_LAWS),
        'resolution': _budget(2048, 2),
        'n_bins': _budget(400, 4),
    },
}

FIT_METRICS = ('alpha', 'alpha_stderr', 'log_C', 'b', 'b_stderr', 'a', 'a_stderr', 'relative_residual', 'rss',
               'n_scales')
METRICS = {
    'shellvol': FIT_METRICS,
    'ball_shellvol': FIT_METRICS + ('c_variation',),
    'nesting': ('kappa', 'kappa_half_width', 'kappa_residual', 'rho_prime', 'kappa_prime', 'kappa_from_parts',
                'kappa_gap'),
    'overlap_i2': ('exponent', 'exponent_stderr', 'relative_residual', 'theory_exponent', 'bound_applicable'),
    'overlap_w': ('exponent', 'exponent_stderr', 'relative_residual', 'theory_exponent', 'exceptional_fraction'),
    'diagrams_report': ('order', 'external_legs', 'j_power', 'expected_j_power', 'm_power', 'fork_count', 'depth',
                        'identity_failures'),
    'selfenergy': ('probe_growth', 'calibration_growth', 'last_quotient', 'sup_value', 'sup_derivative',
                   'floor_contracting'),
    'dos': ('K', 'W', 'r_squared', 'n_points', 'jump', 'level'),
    'bcs': ('slope', 'intercept', 'r_squared', 'r_squared_other', 'n_used', 'gap_ratio'),
}


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _coerce(param: Param, value):
    """Normalized value, or raise ValueError with the field message"""
    if value is None:
        if param.nullable:
            return None
        raise ValueError("must not be null")
    if param.kind == 'int':
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError(f"expected an integer, got {value!r}")
        value = int(value)
    elif param.kind == 'float':
        if not _is_number(value):
            raise ValueError(f"expected a finite number, got {value!r}")
        value = float(value)
    elif param.kind == 'bool':
        if not isinstance(value, bool):
            raise ValueError(f"expected true or false, got {value!r}")
    elif param.kind == 'str':
        if not isinstance(value, str):
            raise ValueError(f"expected a string, got {value!r}")
        if param.choices and value not in param.choices:
            raise ValueError(f"'{value}' is not one of {list(param.choices)}")
    elif param.kind == 'floats':
        if not isinstance(value, list) or not value or not all(_is_number(v) for v in value):
            raise ValueError(f"expected a nonempty list of numbers, got {value!r}")
        value = [float(v) for v in value]
    elif param.kind == 'ints':
        if (not isinstance(value, list) or not value
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
            raise ValueError(f"expected a nonempty list of integers, got {value!r}")
        value = [int(v) for v in value]
    if param.check is not None:
        message = param.check(value)
        if message:
            raise ValueError(message)
    return value


def _window_issue(params, lo_key, hi_key, minimum=4):
    if params.get(lo_key) is None or params.get(hi_key) is None:
        return []
    if params[hi_key] - params[lo_key] + 1 < minimum:
        return [f"params.{lo_key}: window [{lo_key}, {hi_key}] must cover at least {minimum} scales"]
    return []


def _cross_field_issues(experiment: str, params: dict, model) -> list[str]:
    """Constraints that involve more than one field"""
    issues = []
    if experiment in ('shellvol', 'ball_shellvol'):
        issues += _window_issue(params, 'j_min', 'j_max')
        center = params.get('center')
        if experiment == 'ball_shellvol' and model is not None and center is not None \
                and len(center) != model.dimension:
            issues.append(f"params.center: expected {model.dimension} coordinates, got {len(center)}")
    elif experiment == 'nesting':
        if params.get('beta_min') is not None and params.get('beta_max') is not None \
                and params['beta_min'] >= params['beta_max']:
            issues.append("params.beta_min: must be smaller than beta_max")
    elif experiment == 'overlap_i2':
        issues += _window_issue(params, 'eps3_j_min', 'eps3_j_max')
        if None not in (params.get('eps1'), params.get('eps2'), params.get('eps3_j_min')) \
                and 2.0 ** params['eps3_j_min'] < max(params['eps1'], params['eps2']):
            issues.append("params.eps3_j_min: smallest eps3 must be at least max(eps1, eps2)")
        if model is not None and model.dimension < 3:
            issues.append(f"model: overlap exponents need d ≥ 3, got d={model.dimension}")
    elif experiment == 'overlap_w':
        issues += _window_issue(params, 'zeta_j_min', 'zeta_j_max')
    elif experiment == 'diagrams_report':
        text = params.get('graph_text')
        try:
            graph = parse_graph(text) if text else GRAPHS[params.get('graph', 'sunset')]()
        except (VanHoveError, KeyError) as e:
            issues.append(f"params.graph_text: {str(e)}")
            graph = None
        if graph is not None and params.get('scales') is not None and len(params['scales']) != graph.n_lines:
            issues.append(f"params.scales: expected {graph.n_lines} scales, got {len(params['scales'])}")
    elif experiment == 'selfenergy':
        if model is not None and params.get('q') is not None and len(params['q']) != model.dimension + 1:
            issues.append(f"params.q: expected {model.dimension + 1} entries (frequency first), got {len(params['q'])}")
        floors = params.get('floors')
        if floors is not None and len(set(floors)) < 2:
            issues.append("params.floors: need at least two distinct floors")
    elif experiment == 'dos':
        if params.get('e_min') is not None and params.get('e_max') is not None and params['e_min'] >= params['e_max']:
            issues.append("params.e_min: must be smaller than e_max")
        window = params.get('window')
        if window is not None and (len(window) != 2 or window[0] >= window[1]):
            issues.append("params.window: expected [lower, upper] with lower < upper")
    elif experiment == 'bcs':
        couplings = params.get('couplings')
        if couplings is not None and len(couplings) < 6:
            issues.append(f"params.couplings: need at least 6 couplings, got {len(couplings)}")
        if params.get('source') == 'model' and model is None:
            issues.append("model: source 'model' needs a model record")
    return issues


def _normalize(raw) -> tuple[dict | None, list[str]]:
    """Fill defaults and collect every field-level issue"""
    if not isinstance(raw, dict):
        return None, [f"<document>: expected a mapping, got {type(raw).__name__}"]
    issues = [f"{key}: unknown key" for key in raw if key not in TOP_LEVEL_KEYS]

    experiment = raw.get('experiment')
    if experiment is None:
        return None, issues + ["experiment: required"]
    if experiment not in Config.EXPERIMENTS:
        return None, issues + [f"experiment: unknown experiment {experiment!r}; expected one of {Config.EXPERIMENTS}"]

    description = raw.get('description', '')
    if not isinstance(description, str):
        issues.append("description: expected a string")

    seed = raw.get('seed', Config.DEFAULT_SEED)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        issues.append(f"seed: expected a nonnegative integer, got {seed!r}")

    output = raw.get('output', os.path.join(Config.OUTPUT_DIR, experiment))
    if not isinstance(output, str) or not output:
        issues.append("output: expected a nonempty path prefix")

    record, model = raw.get('model'), None
    if record is None:
        if experiment not in MODEL_OPTIONAL:
            issues.append("model: required")
    elif not isinstance(record, dict):
        issues.append("model: expected a mapping with a 'kind' key")
    else:
        try:
            model = build_model(record)
        except (VanHoveError, TypeError, ValueError) as e:
            issues.append(f"model: {str(e)}")

    schema = PARAMETERS[experiment]
    given = raw.get('params', {}) or {}
    params = {}
    if not isinstance(given, dict):
        issues.append("params: expected a mapping")
        given = {}
    issues += [f"params.{key}: unknown parameter" for key in given if key not in schema]
    for name, param in schema.items():
        if name not in given:
            if param.default is REQUIRED:
                issues.append(f"params.{name}: required")
            else:
                params[name] = list(param.default) if isinstance(param.default, list) else param.default
            continue
        try:
            params[name] = _coerce(param, given[name])
        except ValueError as e:
            issues.append(f"params.{name}: {str(e)}")
    issues += _cross_field_issues(experiment, params, model)

    thresholds = raw.get('thresholds', {}) or {}
    checked = {}
    if not isinstance(thresholds, dict):
        issues.append("thresholds: expected a mapping")
        thresholds = {}
    for key, value in thresholds.items():
        metric, _, bound = str(key).rpartition('_')
        if bound not in ('min', 'max') or metric not in METRICS[experiment]:
            issues.append(f"thresholds.{key}: unknown threshold; use <metric>_min or <metric>_max "
                          f"with a metric of {experiment}")
        elif not _is_number(value):
            issues.append(f"thresholds.{key}: expected a finite number, got {value!r}")
        else:
            checked[key] = float(value)

    if issues:
        return None, issues
    return {
        'experiment': experiment,
        'description': description,
        'model': dict(record) if record is not None else None,
        'params': params,
        'thresholds': checked,
        'seed': seed,
        'output': output,
    }, []


def validate_config_dict(raw) -> dict:
    """Validate an experiment document and return status"""
    _, issues = _normalize(raw)
    return {
        'valid': len(issues) == 0,
        'issues': issues,
    }


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: dict | None
    params: dict
    thresholds: dict
    seed: int
    output: str
    description: str = ''

    @classmethod
    def from_dict(cls, raw) -> "ExperimentConfig":
        normalized, issues = _normalize(raw)
        if issues:
            raise ConfigValidationError(issues)
        return cls(**normalized)

    def to_dict(self) -> dict:
        return {
            'experiment': self.experiment,
            'description': self.description,
            'model': self.model,
            'params': self.params,
            'thresholds': self.thresholds,
            'seed': self.seed,
            'output': self.output,
        }

    def override(self, seed: int | None = None, output: str | None = None) -> "ExperimentConfig":
        raw = self.to_dict()
        if seed is not None:
            raw['seed'] = seed
        if output is not None:
            raw['output'] = output
        return ExperimentConfig.from_dict(raw)


def load_config(path: str) -> ExperimentConfig:
    """Read one YAML experiment document"""
    with open(path, 'r', encoding='utf-8') as f:
        raw = yaml.safe_load(f)
    return ExperimentConfig.from_dict(raw)


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, defaults filled)"""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def scale_budgets(config: ExperimentConfig, factor: float) -> ExperimentConfig:
    """Multiply every sample budget by ``factor`` and revalidate"""
    if not factor > 0:
        raise ArgumentError(f"budget factor must be positive, got {factor}")
    raw = config.to_dict()
    params = dict(raw['params'])
    for key in BUDGET_KEYS:
        if key in params:
            params[key] = max(1, int(round(params[key] * factor)))
    raw['params'] = params
    return ExperimentConfig.from_dict(raw)


# Results

@dataclass
class ResultBundle:
    experiment: str
    tables: dict
    metrics: dict
    checks: list
    status: str
    provenance: dict
    notes: list = field(default_factory=list)
    paths: list = field(default_factory=list)

    @property
    def summary(self) -> dict:
        return {
            'experiment': self.experiment,
            'config_hash': self.provenance['config_hash'],
            'seed': self.provenance['seed'],
            'metrics': self.metrics,
            'checks': self.checks,
            'status': self.status,
            'notes': self.notes,
            'provenance': self.provenance,
        }


@dataclass
class RunOutput:
    tables: dict
    metrics: dict
    notes: list = field(default_factory=list)
    inconclusive: str | None = None


def emit_csv(table: pd.DataFrame, path: str):
    """UTF-8, header first, floats at 17 significant digits, LF line endings"""
    if len(table.columns) == 0:
        raise ArgumentError(f"table for {path} has no header")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    table.to_csv(path, index=False, float_format='%.17g', lineterminator='\n', encoding='utf-8')


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def write_summary(bundle: ResultBundle, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(_jsonable(bundle.summary), f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')


def _fit_metrics(fit: ScalingFit) -> dict:
    metrics = {'relative_residual': fit.relative_residual, 'rss': fit.rss, 'n_scales': fit.n_scales}
    for name, value in fit.params.items():
        metrics[name] = value
        metrics[f"{name}_stderr"] = fit.param_stderr[name]
    return metrics


def _fit_table(fit: ScalingFit) -> pd.DataFrame:
    rows = [{'form': fit.form, 'param': name, 'value': value, 'stderr': fit.param_stderr[name],
             'j_min': fit.j_min, 'j_max': fit.j_max, 'rss': fit.rss} for name, value in fit.params.items()]
    return pd.DataFrame(rows, columns=['form', 'param', 'value', 'stderr', 'j_min', 'j_max', 'rss'])


# Runners

def _run_shellvol(config: ExperimentConfig, model, threads: int) -> RunOutput:
    p = config.params
    spec = ShellSpec(model, M=p['M'], j=p['j_max'])
    js = list(range(p['j_min'], p['j_max'] + 1))
    estimates = scan_scales(spec, js, p['n_samples'], config.seed, threads=threads, method=p['method'])
    fit = fit_scaling_exponent(estimates, p['form'], p['M'], weighted=p['weighted'])
    return RunOutput(tables={'volumes': volumes_table(spec, estimates, config.seed), 'fit': _fit_table(fit)},
                     metrics=_fit_metrics(fit))


def _run_ball_shellvol(config: ExperimentConfig, model, threads: int) -> RunOutput:
    p = config.params
    d, M, eps = model.dimension, p['M'], p['epsilon']
    center = np.zeros(d) if p['center'] is None else np.array(p['center'])
    spec = ShellSpec(model, M=M, j=p['j_max'], center=center, epsilon=eps)
    js = list(range(p['j_min'], p['j_max'] + 1))
    estimates = scan_scales(spec, js, p['n_samples'], config.seed, threads=threads)
    fit = fit_scaling_exponent(estimates, p['form'], M)
    # constants C_j = vol(j) / bound(j), bound M^{j(1+(d−2)ε)} for d > 2 and M^j(1+(1−2ε)|j|) for d = 2
    constants = []
    for j, estimate in estimates:
        bound = M ** (j * (1 + (d - 2) * eps)) if d > 2 else M ** j * (1 + (1 - 2 * eps) * abs(j))
        constants.append(estimate.value / bound)
    constants = np.array(constants)
    variation = float(np.max(np.abs(constants / constants.mean() - 1))) if constants.mean() > 0 else math.nan
    table = volumes_table(spec, estimates, config.seed)
    table['bound_constant'] = constants
    return RunOutput(tables={'volumes': table, 'fit': _fit_table(fit)},
                     metrics={**_fit_metrics(fit), 'c_variation': variation})


def _run_nesting(config: ExperimentConfig, model, threads: int) -> RunOutput:
    p = config.params
    spec = NestingSpec(model, betas=default_betas(p['n_betas'], p['beta_min'], p['beta_max']),
                       n_reference=p['n_reference'], n_surface=p['n_surface'], excision_radius=p['excision_radius'])
    samples = nesting_samples(spec, config.seed, threads)
    kappa = estimate_kappa(spec, config.seed, threads, samples=samples)
    floor = check_transversality_floor(spec, config.seed, threads, samples=samples) if p['floor'] else None
    metrics = {'kappa': kappa.kappa, 'kappa_half_width': kappa.half_width, 'kappa_residual': kappa.residual}
    notes = [f"kappa status: {kappa.status}"]
    if kappa.dropped_betas:
        notes.append(f"dropped betas: {list(kappa.dropped_betas)}")
    if floor is not None:
        spread = kappa.half_width + floor.kappa_from_parts_half_width
        gap = abs(floor.kappa_from_parts - kappa.kappa)
        metrics.update({'rho_prime': floor.rho_prime, 'kappa_prime': floor.kappa_prime,
                        'kappa_from_parts': floor.kappa_from_parts,
                        'kappa_gap': gap / spread if spread > 0 else math.nan})
        notes.append(f"transversality status: {floor.status}")
    return RunOutput(tables={'nesting': nesting_table(model.model_id, kappa, floor)}, metrics=metrics, notes=notes)


def _run_overlap_i2(config: ExperimentConfig, model, threads: int) -> RunOutput:
    p = config.params
    eps3_values = [2.0 ** j for j in range(p['eps3_j_min'], p['eps3_j_max'] + 1)]
    spec = OverlapSpec(model, default_q_points(model, p['n_q'], config.seed), p['eps1'], p['eps2'],
                       eps3_values[0], delta=p['delta'], v1=p['v1'], v2=p['v2'])
    estimates = scan_eps3(spec, eps3_values, p['n_samples'], config.seed, threads=threads)
    fit = fit_overlap_exponent(estimates)
    notes = [] if spec.bound_applicable else ["delta is below C_delta·sqrt(max(eps1, eps2)); the bound is not claimed"]
    return RunOutput(
        tables={'i2': i2_table(spec, estimates), 'fit': _fit_table(fit)},
        metrics={'exponent': fit.exponent, 'exponent_stderr': fit.param_stderr['alpha'],
                 'relative_residual': fit.relative_residual,
                 'theory_exponent': epsilon_from_kappa(model.dimension, p['kappa']).epsilon_final,
                 'bound_applicable': float(spec.bound_applicable)},
        notes=notes)


def _run_overlap_w(config: ExperimentConfig, model, threads: int) -> RunOutput:
    p = config.params
    zetas = [2.0 ** j for j in range(p['zeta_j_min'], p['zeta_j_max'] + 1)]
    samples = sample_fermi_surface(model, p['n_samples'], config.seed, threads=threads)
    q_points = default_q_points(model, p['n_q'], config.seed)
    estimates = scan_zeta(model, zetas, q_points, p['delta'], config.seed, p['n_samples'], p['v1'], p['v2'],
                          samples=samples, threads=threads)
    fit = fit_overlap_exponent(estimates)
    return RunOutput(
        tables={'w': w_table(model, estimates), 'fit': _fit_table(fit)},
        metrics={'exponent': fit.exponent, 'exponent_stderr': fit.param_stderr['alpha'],
                 'relative_residual': fit.relative_residual,
                 'theory_exponent': p['kappa'] / (1.0 + p['kappa']),
                 'exceptional_fraction': exceptional_fraction(samples, zetas[0], p['kappa'], p['delta'])})


def _run_diagrams_report(config: ExperimentConfig, model, threads: int) -> RunOutput:
    p = config.params
    graph = parse_graph(p['graph_text']) if p['graph_text'] else GRAPHS[p['graph']]()
    scales = p['scales'] or [-1] * graph.n_lines
    forest = build_forest(graph, scales)
    if graph.n_legs == 2 and p['s0'] + p['s'] > 0:
        report = derivative_bound_report(graph, forest, p['M'], p['s0'], p['s'], p['epsilon'])
    else:
        report = power_count_bound(graph, forest, p['M'], p['s0'], p['s'])
    tables = {'ledger': ledger_table(report)}
    failures = 0
    if p['sweep_graphs'] > 0:
        sweep = exponent_identity_sweep(p['sweep_graphs'], p['max_order'], config.seed, p['M'], p['j_floor'])
        failures = int((~sweep['identity_holds']).sum())
        tables['sweep'] = sweep
    metrics = {'order': report.order, 'external_legs': report.external_legs, 'j_power': report.j_power,
               'expected_j_power': 3 * report.order - 2 if report.external_legs == 2 else math.nan,
               'm_power': report.m_power, 'fork_count': report.fork_count, 'depth': report.depth,
               'identity_failures': failures}
    return RunOutput(tables=tables, metrics=metrics, notes=report.to_text().splitlines())


def _run_selfenergy(config: ExperimentConfig, model, threads: int) -> RunOutput:
    p = config.params
    q = np.array(p['q'])
    interaction = Interaction(p['strength'], p['width'])
    probe = holder_probe(model, interaction, q, p['s'], default_displacements(p['n_displacements']),
                         n_samples=p['n_samples'], seed=config.seed, j_floor=p['j_floor'], M=p['M'],
                         pool_size=p['pool_size'], threads=threads)
    calibration = probe_function(lambda x: float(x[1] > q[1]), q, p['s'], probe.displacements)
    growth = {'growth': 1.0, 'bounded': 0.0, 'inconclusive': math.nan}
    metrics = {'probe_growth': growth[probe.status], 'calibration_growth': growth[calibration.status],
               'last_quotient': float(probe.quotients[-1]), 'sup_value': probe.sup_value,
               'sup_derivative': probe.sup_derivative}
    tables = {'quotients': probe_table(probe), 'calibration': probe_table(calibration)}
    if p['floors'] is not None:
        sequence = self_energy_sequence(model, interaction, q, p['floors'], p['n_samples'], config.seed,
                                        M=p['M'], pool_size=p['pool_size'], threads=threads)
        tables['floors'] = self_energy_table(model, sequence.estimates)
        metrics['floor_contracting'] = float(sequence.contracting)
    inconclusive = probe.note if probe.status == 'inconclusive' else None
    return RunOutput(tables=tables, metrics=metrics, notes=probe.to_text().splitlines(), inconclusive=inconclusive)


def _run_dos(config: ExperimentConfig, model, threads: int) -> RunOutput:
    p = config.params
    edges = np.linspace(p['e_min'], p['e_max'], p['n_bins'] + 1)
    if p['method'] == 'grid':
        dos = compute_dos(model, method='grid', resolution=p['resolution'], edges=edges)
    else:
        dos = compute_dos(model, n_samples=p['n_samples'], seed=config.seed, edges=edges, threads=threads)
    if p['fit'] == 'log':
        fit = fit_log_divergence(dos, p['e_vh'], tuple(p['window']))
        metrics = {'K': fit.K, 'W': fit.W, 'r_squared': fit.r_squared, 'n_points': fit.n_points}
    else:
        jump, level = dos_jump(dos, p['e_vh'])
        metrics = {'jump': jump, 'level': level}
    return RunOutput(tables={'dos': dos_table(dos)}, metrics=metrics)


def _run_bcs(config: ExperimentConfig, model, threads: int) -> RunOutput:
    p = config.params
    if p['source'] == 'constant':
        dos = constant_dos(p['rho0'], p['half_width'], center=p['e_vh'])
    elif p['source'] == 'log':
        dos = log_dos(p['K'], p['half_width'], e_vh=p['e_vh'])
    else:
        dos = compute_dos(model, n_bins=p['n_bins'], method='grid', resolution=p['resolution'])
    pairs = tc_scan(dos, p['couplings'], p['E_F'])
    other = [law for law in TC_LAWS if law != p['law']][0]
    fit = fit_tc_asymptotics(pairs, p['law'])
    metrics = {'slope': fit.slope, 'intercept': fit.intercept, 'r_squared': fit.r_squared,
               'r_squared_other': fit_tc_asymptotics(pairs, other).r_squared, 'n_used': fit.n_used}
    g, t_c = min((pair for pair in pairs if pair[1] > 0), key=lambda pair: pair[0])
    metrics['gap_ratio'] = solve_gap_equation(dos, g, p['E_F'], 0.0) / t_c
    notes = [f"dropped couplings with T_c = 0: {fit.dropped}"] if fit.dropped else []
    return RunOutput(tables={'tc': tc_table(pairs), 'dos': dos_table(dos)}, metrics=metrics, notes=notes)


RUNNERS = {
    'shellvol': _run_shellvol,
    'ball_shellvol': _run_ball_shellvol,
    'nesting': _run_nesting,
    'overlap_i2': _run_overlap_i2,
    'overlap_w': _run_overlap_w,
    'diagrams_report': _run_diagrams_report,
    'selfenergy': _run_selfenergy,
    'dos': _run_dos,
    'bcs': _run_bcs,
}


def evaluate_thresholds(thresholds: dict, metrics: dict, inconclusive: str | None = None) -> tuple[list, str]:
    """Per-threshold checks and the overall status; a failed finite check outranks noise"""
    checks = []
    for key, bound in sorted(thresholds.items()):
        metric, _, side = key.rpartition('_')
        value = metrics.get(metric, math.nan)
        value = float(value) if value is not None else math.nan
        if not math.isfinite(value):
            outcome = 'inconclusive'
        elif side == 'min':
            outcome = 'pass' if value >= bound else 'fail'
        else:
            outcome = 'pass' if value <= bound else 'fail'
        checks.append({'threshold': key, 'metric': metric, 'bound': bound, 'value': value, 'outcome': outcome})
    outcomes = {check['outcome'] for check in checks}
    if 'fail' in outcomes:
        status = 'fail'
    elif 'inconclusive' in outcomes or inconclusive:
        status = 'inconclusive'
    else:
        status = 'pass'
    return checks, status


def _remove(paths: list[str]):
    for path in paths:
        try:
            os.remove(path)
        except OSError as e:
            logger.warning(f"Could not remove partial output {path}: {str(e)}")


def output_paths(config: ExperimentConfig, table_names) -> dict:
    paths = {name: f"{config.output}_{name}.csv" for name in table_names}
    paths['summary'] = f"{config.output}_summary.json"
    return paths


def _write_outputs(bundle: ResultBundle, config: ExperimentConfig) -> list[str]:
    paths = output_paths(config, bundle.tables)
    written = []
    try:
        for name, table in bundle.tables.items():
            emit_csv(table, paths[name])
            written.append(paths[name])
        write_summary(bundle, paths['summary'])
        written.append(paths['summary'])
    except Exception:
        _remove(written)
        raise
    return written


def run_experiment(config: ExperimentConfig, threads: int | None = None, write: bool = True) -> ResultBundle:
    """Dispatch to the owning module, check thresholds, write CSV tables and the JSON summary"""
    threads = threads or Config.THREADS
    digest = config_hash(config)
    logger.info(f"Running {config.experiment} (config {digest[:12]}, seed {config.seed}, threads {threads})")
    try:
        model = build_model(config.model) if config.model is not None else None
        output = RUNNERS[config.experiment](config, model, threads)
    except Exception as e:
        logger.error(f"Experiment {config.experiment} failed: {str(e)}")
        raise ExperimentError(config.experiment, digest, e) from e

    checks, status = evaluate_thresholds(config.thresholds, output.metrics, output.inconclusive)
    notes = list(output.notes)
    if output.inconclusive:
        notes.append(f"inconclusive: {output.inconclusive}")
    if not config.thresholds:
        logger.warning(f"Experiment {config.experiment} declares no thresholds")
    bundle = ResultBundle(
        experiment=config.experiment,
        tables=output.tables,
        metrics={key: output.metrics[key] for key in sorted(output.metrics)},
        checks=checks,
        status=status,
        provenance={'config_hash': digest, 'seed': config.seed, 'code_version': Config.CODE_VERSION,
                    'model_id': model.model_id if model is not None else None},
        notes=notes,
    )
    if write:
        try:
            bundle.paths = _write_outputs(bundle, config)
        except Exception as e:
            logger.error(f"Writing results of {config.experiment} failed: {str(e)}")
            raise ExperimentError(config.experiment, digest, e) from e
    logger.info(f"Experiment {config.experiment}: {status}")
    return bundle
