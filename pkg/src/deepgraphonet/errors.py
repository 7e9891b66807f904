"""Exception types shared across the package.

The CLI maps these onto exit codes, so every failure a user can trigger
should surface as one of the classes below.
"""


class DGONError(Exception):
    """Base class for all package errors."""


class ConfigError(DGONError):
    """Invalid configuration or incompatible inputs (CLI exit code 2)."""


class DimensionError(ConfigError, ValueError):
    """Operand shapes do not conform."""


class ContractError(DGONError, RuntimeError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class GraphError(ConfigError):
    pass


class SubgraphNotConnectedError(GraphError):
    def __init__(self, msg="subgraph not connected"):
        super().__init__(msg)


class DataValidationError(ConfigError):
    """Malformed or non-finite input data."""


class InsufficientHistoryError(ConfigError):
    pass


class DomainError(ConfigError):
    """A query lies outside the domain the model was trained on."""


class CompatibilityError(ConfigError):
    """Weights and run configuration disagree (variant, m, t_M, h)."""


class UndefinedMetricError(DGONError, ValueError):
    pass


class DivergenceError(DGONError, ArithmeticError):
    """Numerical blow-up during training, integration or rollout (exit code 3)."""


class IntegrationBlowupError(DivergenceError):
    pass


class WeightFileError(DGONError, IOError):
    pass


class CorruptFileError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass
