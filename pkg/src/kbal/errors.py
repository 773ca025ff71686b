"""Exception taxonomy shared across the package."""


class KbalError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(KbalError):
    """Malformed input file (ragged rows, non-integer entries, empty file)."""


class ConfigError(KbalError):
    """Invalid configuration value or incompatible option combination."""


class RequestError(KbalError):
    """Structurally valid call with out-of-range arguments (bad index, J, size)."""


class ShapeError(KbalError):
    """Mismatched array dimensions."""


class NumericError(KbalError):
    """NaN/non-positive values where the math requires otherwise."""


class UnavailableError(KbalError):
    """A quantity that cannot be computed from the given data (e.g. no ground truth)."""


class InfeasibleError(KbalError):
    """Exact balancing constraints admit no feasible weights."""
