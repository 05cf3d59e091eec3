"""Exception hierarchy shared by every mvbody module.

The CLI maps these onto exit codes: ConfigError -> 2, data-shaped errors -> 3,
numeric failures -> 4.
"""


class MvBodyError(Exception):
    """Base class for all mvbody errors."""


class ConfigError(MvBodyError):
    """A configuration object or file is invalid."""


class ParseError(MvBodyError):
    """A mesh or data file could not be parsed."""


class ValidationError(MvBodyError):
    """Parsed content violates a structural invariant."""


class SchemaError(MvBodyError):
    """A CSV/JSON header does not match the documented schema."""


class StatsError(MvBodyError):
    """Normalization statistics are missing a required field."""


class SplitError(MvBodyError):
    """A participant split cannot be built (for example, too few of a class)."""


class ShapeError(MvBodyError):
    """Array shapes are inconsistent with the model configuration."""


class WeightImportError(MvBodyError):
    """An external backbone weight file is malformed."""


class DataError(MvBodyError):
    """Dataset content is missing or inconsistent (for example, absent projections)."""


class DegenerateError(MvBodyError):
    """An input is degenerate (zero-height mesh, single-class metric input)."""


class DivergenceError(MvBodyError):
    """Training produced a non-finite loss."""


class NonFiniteError(MvBodyError):
    """A numeric computation produced NaN or Inf."""


class ParamError(MvBodyError):
    """Synthetic body parameters are out of range."""


class SpecError(MvBodyError):
    """A synthetic dataset generation spec is invalid."""
