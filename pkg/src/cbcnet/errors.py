"""Exception hierarchy.

Every error carries a short ``category`` string so the CLI can print a
single machine-parseable line on failure.
"""


class CbcError(Exception):
    category = "error"


class ShapeError(CbcError, ValueError):
    category = "shape"


class NumericError(CbcError, FloatingPointError):
    category = "numeric"


class StateError(CbcError, RuntimeError):
    category = "state"


class ConfigError(CbcError, ValueError):
    category = "config"


class DivergenceError(NumericError):
    category = "divergence"


class DatasetFormatError(CbcError, ValueError):
    """Raised for malformed CBC1 files.

    ``category`` is one of ``bad_magic``, ``bad_version``, ``bad_header``,
    ``truncated``, ``trailing_data`` or ``label_out_of_range``.
    """

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category
