"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or frame dimensions do not fit the operation."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class DataError(ValueError):
    """Dataset content is inconsistent with the request (labels, duplicates, empty sets)."""


class FormatError(ValueError):
    """A binary file is malformed; ``offset`` is the byte position where reading failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SpecError(ValueError):
    """A generator, merge or ablation specification is invalid."""


class WindowError(ValueError):
    """A frame window is longer than the sampler allows."""


class NumericError(ArithmeticError):
    """A loss became NaN or infinite during training."""


class RangeError(ValueError):
    """A frame window is empty or lies outside the clip."""
