"""Exception hierarchy shared by all modules."""


class WspError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(WspError):
    """Tensor extents incompatible with the requested operation."""


class DomainError(WspError):
    """Input value outside the mathematical domain of the operation."""


class ConfigError(WspError):
    """Invalid configuration value."""


class ContractError(WspError):
    """A documented precondition was violated by the caller."""


class DegenerateInputError(WspError):
    """Input is structurally valid but degenerate (e.g. a zero row)."""


class FormatError(WspError):
    """On-disk data malformed; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(WspError):
    """A NaN or infinity appeared where a finite number is required."""


class FallbackRequired(WspError):
    """Strict one-slice-per-patient sampling is infeasible for this cohort;
    the caller should switch to the balanced fallback sampler."""
