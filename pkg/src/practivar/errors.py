"""Exception hierarchy shared across the package."""


class PractivarError(Exception):
    """Base class for all package-specific errors."""


class InputError(PractivarError):
    """Bad or degenerate input data (empty files, unparseable cells)."""


class SchemaError(InputError):
    """File header or schema does not match the documented layout."""


class ConfigError(InputError):
    """Invalid configuration value."""


class ContractError(PractivarError):
    """A documented precondition was violated by the caller."""


class EstimationError(PractivarError):
    """A distribution could not be estimated from the given values."""


class GenerationError(PractivarError):
    """Synthetic cohort generation produced an invalid intermediate."""


class FitError(PractivarError):
    """Model fitting failed for a structural reason (separation, singularity)."""


class ConvergenceError(FitError):
    """Iteration cap reached before meeting the convergence tolerances."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BootstrapError(PractivarError):
    """Too many bootstrap replicates failed to produce the statistic."""
