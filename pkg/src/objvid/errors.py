"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or argument combination."""


class FormatError(ValueError):
    """A file does not hold a well-formed STF tensor, bundle, or manifest."""


class NaNLossError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int, batch_ids: list):
        super().__init__(message)
        self.step = step
        self.batch_ids = batch_ids
