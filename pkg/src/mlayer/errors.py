"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not agree with what an operation expects."""


class DomainError(ValueError):
    """An argument is outside the domain of an operation (NaN, singular, ...)."""


class ConvergenceError(RuntimeError):
    """An iterative method ran out of iterations.

    The last iterate is kept on the exception so callers can decide whether
    it is good enough.
    """

    def __init__(self, message, last_iterate=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class FormatError(ValueError):
    """A data file does not match its declared binary/text format."""

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.path = path
        self.offset = offset


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, epoch, batch, value):
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch}"
        )
        self.epoch = epoch
        self.batch = batch
        self.value = value


class ConfigError(ValueError):
    """A training or CLI configuration value is invalid.

    ``field`` names the offending key when there is one.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
