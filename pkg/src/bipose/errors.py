"""Exception hierarchy shared by every bipose module."""


class BiposeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BiposeError, ValueError):
    """Tensor contents or shapes are not acceptable to an operation."""


class CorruptionError(BiposeError):
    """Packed data or a file body is internally inconsistent or truncated."""


class ConfigurationError(BiposeError, ValueError):
    """A network, block or training configuration is inconsistent."""


class FormatError(BiposeError):
    """A model file has the wrong magic number or version."""


class MissingGradientError(BiposeError, RuntimeError):
    """A requested parameter is not reachable from the loss."""


class UndefinedMetricError(BiposeError, ValueError):
    """A metric has no defined value for the given inputs."""


class TrainingComplete(BiposeError):
    """Raised by the learning-rate schedule once the final epoch is passed."""


class DivergenceError(BiposeError, RuntimeError):
    """Training produced a non-finite loss."""
