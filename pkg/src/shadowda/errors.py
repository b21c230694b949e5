"""Exception hierarchy shared by all modules."""


class ShadowDAError(Exception):
    """Base class for package errors."""


class InvalidModelError(ShadowDAError, ValueError):
    pass


class DivergenceError(ShadowDAError):
    """A model evaluation produced non-finite values.

    ``step`` is the index of the offending map application (or batch element).
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SyncDivergenceError(DivergenceError):
    pass


class RankDeficientError(ShadowDAError):
    def __init__(self, column):
        super().__init__(f"matrix is numerically rank deficient at column {column}")
        self.column = column


class FrameRankError(ShadowDAError):
    def __init__(self, step, column):
        super().__init__(f"tangent frame lost rank at step {step} (column {column})")
        self.step = step
        self.column = column


class FactorizationError(ShadowDAError):
    def __init__(self, block):
        super().__init__(f"block {block} is not positive definite")
        self.block = block


class SingularUpdateError(ShadowDAError):
    pass


class ParameterUnidentifiableError(SingularUpdateError):
    pass


class ConfigError(ShadowDAError, ValueError):
    pass
