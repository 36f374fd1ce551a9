"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """A numeric or structural parameter is outside its valid domain."""


class ShapeError(ValueError):
    """Array dimensions do not match the expected layout."""


class ParseError(ValueError):
    """A data file is malformed; message names the offending line."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class AllocationError(RuntimeError):
    """A populated group cannot be assigned to any client."""


class DivergedClientError(RuntimeError):
    """Local training produced a non-finite loss."""

    def __init__(self, client: int, round_index: int):
        super().__init__(
            f"client {client} diverged (non-finite loss) in round {round_index}"
        )
        self.client = client
        self.round_index = round_index


class ConfigError(ValueError):
    """An experiment config file is invalid."""
