"""Exception types shared across the toolkit."""


class FormatError(ValueError):
    """A file or byte payload does not match the expected format."""


class ConsistencyError(ValueError):
    """Structurally valid inputs that disagree with each other."""


class CorruptionError(ValueError):
    """A decoded stream or container violates its own invariants."""


class CodingError(ValueError):
    """Symbols and code tables do not match during entropy coding."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
