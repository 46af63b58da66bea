"""Exception types raised by the estimators and the combinatorial engine"""


class VanHoveError(Exception):
    """Base class for library errors"""


class DomainError(VanHoveError, ValueError):
    """A point or region falls outside the model domain"""


class EmptySurfaceError(DomainError):
    """The Fermi surface has no points inside the domain"""


class ArgumentError(VanHoveError, ValueError):
    """Malformed argument"""


class BracketError(VanHoveError, RuntimeError):
    """A root finder could not bracket a sign change"""


class ConvergenceError(VanHoveError, RuntimeError):
    """An iteration or estimator failed to converge"""


class GraphError(VanHoveError, ValueError):
    """Malformed graph, forest or leg count"""


class ConfigValidationError(VanHoveError, ValueError):
    """Experiment configuration rejected by the schema"""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


class ExperimentError(VanHoveError, RuntimeError):
    """A module failure surfaced with experiment context"""

    def __init__(self, experiment, config_hash, cause):
        self.experiment = experiment
        self.config_hash = config_hash
        self.cause = cause
        super().__init__(f"experiment '{experiment}' (config {config_hash[:12]}) failed: {cause}")
