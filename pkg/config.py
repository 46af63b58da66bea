import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Runtime Settings
    OUTPUT_DIR = os.getenv('VANHOVE_OUTPUT_DIR', 'results')
    EXPERIMENTS_DIR = os.getenv('VANHOVE_EXPERIMENTS_DIR', 'experiments')
    THREADS = int(os.getenv('VANHOVE_THREADS', '1'))
    DEFAULT_SEED = int(os.getenv('VANHOVE_SEED', '12345'))
    LOG_LEVEL = os.getenv('VANHOVE_LOG_LEVEL', 'INFO')
    SHARD_SIZE = int(os.getenv('VANHOVE_SHARD_SIZE', '262144'))

    # App Settings
    CODE_VERSION = "0.3.0"
    PAGE_TITLE = "Van Hove Power Counting"
    PAGE_ICON = "📐"

    # Scale decomposition
    SCALE_BASE = 2.0
    J_WINDOW = (-12, -5)

    # Singular points and surface sampling
    NEWTON_TOL = 1e-10
    NEWTON_MAX_ITER = 60
    SURF_TOL = 1e-8
    HESS_TOL = 1e-6
    DEDUP_RADIUS = 1e-4
    SEED_GRID = 32
    MAX_SEEDS = 32768
    H_SURF = 1e-3
    GRAD_FLOOR = 1e-8
    PROJECTION_STEPS = 6
    EXCISION_RADIUS = 0.05
    ROOT_TOL = 1e-12

    # Nesting
    N_REFERENCE = 64
    N_BETAS = 16
    BETA_RANGE = (1e-3, 0.3)
    MIN_CONTRIBUTORS = 10
    FIT_TOL = 0.15
    KAPPA_FLOOR = 0.1
    N_SURFACE = 20000
    PARALLEL_TOL = 0.005
    PARALLEL_WINDOW = 10.0
    N_FLOOR_REFERENCE = 16
    MONOTONE_TOL = 0.1

    # Overlap
    C_DELTA = 4.0
    N_Q = 32

    # Self-energy probe
    J_FLOOR = -8
    POOL_SIZE = 4096
    VARIANCE_RATIO = 50.0
    NOISE_LIMIT = 0.5

    # Mean field
    GAP_TOL = 1e-10
    TC_RTOL = 1e-6
    MAX_ITER = 200

    # Experiments
    EXPERIMENTS = [
        'shellvol', 'ball_shellvol', 'nesting', 'overlap_i2', 'overlap_w',
        'diagrams_report', 'selfenergy', 'dos', 'bcs'
    ]
    LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']

    @classmethod
    def validate_config(cls):
        """Validate configuration and return status"""
        issues = []

        if cls.THREADS < 1:
            issues.append("VANHOVE_THREADS must be at least 1")

        if cls.SHARD_SIZE < 1:
            issues.append("VANHOVE_SHARD_SIZE must be at least 1")

        if cls.DEFAULT_SEED < 0:
            issues.append("VANHOVE_SEED must be non-negative")

        if cls.LOG_LEVEL.upper() not in cls.LOG_LEVELS:
            issues.append(f"VANHOVE_LOG_LEVEL '{cls.LOG_LEVEL}' is not a logging level")

        if os.path.exists(cls.OUTPUT_DIR) and not os.access(cls.OUTPUT_DIR, os.W_OK):
            issues.append(f"VANHOVE_OUTPUT_DIR '{cls.OUTPUT_DIR}' is not writable")

        return {
            'valid': len(issues) == 0,
            'issues': issues,
            'experiments_found': os.path.isdir(cls.EXPERIMENTS_DIR)
        }
