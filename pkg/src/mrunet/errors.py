"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MrunetError(Exception):
    exit_code = 1


class ValidationError(MrunetError, ValueError):
    exit_code = 1


class ShapeError(ValidationError):
    pass


class GraphError(MrunetError, RuntimeError):
    exit_code = 1


class UnreliableCheckError(MrunetError, RuntimeError):
    """Raised when a function under gradient check is not deterministic."""

    exit_code = 1


class DegenerateVarianceError(ValidationError):
    """Paired differences have zero spread, so the t statistic is undefined."""


class FormatError(MrunetError):
    exit_code = 2


class CompatibilityError(MrunetError):
    exit_code = 2


class DivergenceError(MrunetError, FloatingPointError):
    exit_code = 3
