"""Exception hierarchy shared by every forgesim module."""


class ForgeSimError(Exception):
    """Base class for all errors raised by forgesim."""


class ConfigurationError(ForgeSimError, ValueError):
    """Invalid hyperparameters or config file content.

    ``line`` is set when the error originates from a config file.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataIntegrityError(ForgeSimError, ValueError):
    """Inputs that violate a data invariant (labels out of range, non-finite values, ...)."""


class DomainError(ForgeSimError, ValueError):
    """Arguments outside the domain of an operation (empty batch, bad index, shape mismatch)."""


class EmptyRoundError(ForgeSimError):
    """No participating client carries a nonzero server weight."""


class OracleFailure(ForgeSimError, RuntimeError):
    """The brute-force reference solver did not converge."""


class DivergenceError(ForgeSimError, RuntimeError):
    def __init__(self, round_index: int, message: str = "non-finite loss"):
        self.round_index = round_index
        super().__init__(f"round {round_index}: {message}")
