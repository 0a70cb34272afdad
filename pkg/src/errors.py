from typing import Any, Dict, Optional


class CadaSegError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(CadaSegError):
    """Experiment configuration cannot be honoured."""


class ConfigFileError(ConfigurationError):
    """Config file is missing or cannot be parsed."""

    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(f"Config file {path}: {reason}")


class ParameterError(CadaSegError, ValueError):
    """A scalar or enumerated parameter is out of range."""


class InputError(CadaSegError, ValueError):
    """Input data is malformed."""


class ShapeError(InputError):
    """Tensor shape is incompatible with the network."""


class BatchSizeError(InputError):
    """Batch too small for batch statistics."""


class NumericError(CadaSegError, ArithmeticError):
    """Non-finite values or degenerate vectors."""


class StructureError(CadaSegError):
    """Two models do not share a parameter structure."""


class UndefinedMetricError(CadaSegError):
    """A metric is undefined for the given masks."""


class TrainingDivergedError(CadaSegError, RuntimeError):
    """Total loss became non-finite."""

    def __init__(self, iteration: int, components: Optional[Dict[str, Any]] = None):
        self.iteration = iteration
        self.components = components or {}
        dump = ", ".join(f"{k}={v}" for k, v in self.components.items())
        super().__init__(f"Non-finite loss at iteration {iteration}: {dump}")
