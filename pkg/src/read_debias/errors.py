"""Exception hierarchy shared across the package."""


class ReadError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ReadError, ValueError):
    pass


class RankError(ReadError, ValueError):
    pass


class DegenerateRowError(ReadError, ValueError):
    """A softmax row has no unmasked entry."""


class LabelError(ReadError, ValueError):
    pass


class ConfigError(ReadError, ValueError):
    pass


class DataError(ReadError, ValueError):
    """Invalid token ids, lengths or dataset contents."""


class SpecError(ReadError, ValueError):
    """A synthetic task spec whose constraints cannot be satisfied."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(ReadError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DivergenceError(NumericError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        self.step = step
        super().__init__(f"{message} at step {step}")


class DomainError(ReadError, ValueError):
    pass


class CheckpointError(ReadError):
    pass
