"""Exception types shared across the package."""


class DualEncError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DualEncError):
    """Operands have incompatible or unexpected dimensions."""


class ParameterError(DualEncError):
    """A configuration value or call argument is out of its valid range."""


class SampleSizeError(ParameterError):
    """A requested sample size cannot be satisfied by the available data."""


class DataError(DualEncError):
    """Corpus, judgment, or index content violates a documented invariant."""


class ParseError(DataError):
    """A file could not be parsed; the message carries the line number."""


class SchemaError(DataError):
    """A record or config document has missing, unknown, or mistyped fields."""


class DegenerateInputError(DualEncError):
    """Numerically degenerate input: zero norms, all-zero distances, or an
    exhausted resampling budget."""


class DivergenceError(DualEncError):
    """Training produced a non-finite loss or gradient; names the step."""
