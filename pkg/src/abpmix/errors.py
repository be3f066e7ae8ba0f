"""Exception hierarchy shared across the package."""


class AbpmixError(Exception):
    """Base class for all package-specific errors."""


class GridError(AbpmixError, ValueError):
    """Invalid time grid (non-increasing, out of range, duplicates)."""


class DomainError(AbpmixError, ValueError):
    """Evaluation requested outside the supported time domain."""


class RankError(AbpmixError, ValueError):
    """Rank-deficient design or basis."""


class KnotError(AbpmixError, ValueError):
    """Invalid spline knot configuration."""


class SpecError(AbpmixError, ValueError):
    """Invalid or inconsistent model specification / subject data."""


class SchemaError(AbpmixError, ValueError):
    """Input file does not match the expected schema."""


class ParseError(AbpmixError, ValueError):
    """Unparseable value in an input file (carries a row address)."""


class DuplicateError(AbpmixError, ValueError):
    """Duplicate (subject, time) pair in input data."""


class ConfigError(AbpmixError, ValueError):
    """Invalid runtime configuration."""


class ConditioningError(AbpmixError, ArithmeticError):
    """A covariance matrix could not be factorized even after jitter."""


class ContrastError(AbpmixError, ValueError):
    """Invalid contrast matrix for a hypothesis test."""


class StateError(AbpmixError, RuntimeError):
    """Operation requested on a model in the wrong state."""


class ComparisonError(AbpmixError, ValueError):
    """Refused model comparison (REML across fixed structures)."""
