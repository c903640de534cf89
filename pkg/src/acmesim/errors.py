"""Exception types shared across the package."""


class AcmeError(Exception):
    """Base class for all acmesim errors."""


class ShapeError(AcmeError, ValueError):
    """An input does not match what a network node expects."""

    def __init__(self, node: str, expected, got):
        super().__init__(f"shape mismatch at node '{node}': expected {expected}, got {got}")
        self.node = node
        self.expected = expected
        self.got = got


class StateError(AcmeError, RuntimeError):
    """An operation was invoked out of order (e.g. backward before forward)."""


class AlignmentError(AcmeError, KeyError):
    """Two keyed stores (gradients, importance sets) disagree on their keys."""

    def __init__(self, message: str, paths=()):
        super().__init__(message)
        self.paths = sorted(paths)

    def __str__(self) -> str:
        return self.args[0]


class InfeasibleError(AcmeError):
    """No candidate satisfies a hard constraint."""


class NumericError(AcmeError, ArithmeticError):
    """A loss or metric became non-finite."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class ConfigError(AcmeError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class StageError(AcmeError):
    """Wraps a failure inside one pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
