"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4. Plain ValueError is used for programming errors
(invalid arguments) that should never reach the operator.
"""


class CvDispatchError(Exception):
    """Base class for operator-facing errors."""


class ConfigError(CvDispatchError):
    """Inconsistent or mismatched configuration (incl. checkpoint headers)."""


class DataError(CvDispatchError):
    """Malformed or non-finite input data."""


class DivergenceError(CvDispatchError):
    """Training aborted by the divergence guard."""


class CheckpointError(ConfigError):
    """Corrupt or incompatible checkpoint stream."""
