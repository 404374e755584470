"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError/ConfigError -> 1,
DataError subtypes -> 2, everything else under CmadError -> 3.
"""


class CmadError(Exception):
    """Base class for all package errors."""


class UsageError(CmadError):
    """Bad command-line invocation."""


class ConfigError(CmadError):
    """Malformed or inconsistent configuration."""


class DataError(CmadError):
    """Problems with corpora or sample files."""


class CorpusNotFoundError(DataError):
    """Corpus root missing or contains no classes."""


class CorruptSampleError(DataError):
    """An image/mask pair that cannot be used; message names the path."""


class UnknownClassError(DataError):
    """A class id not present in the corpus."""


class InvalidSpecError(CmadError):
    """Pseudo-anomaly spec whose area constraints cannot be met."""


class ShapeError(CmadError):
    """Tensor shape violates an operation contract."""


class ScheduleError(ConfigError):
    """Diffusion schedule with too few steps or bad endpoints."""


class CheckpointError(CmadError):
    """Unreadable, truncated, or incompatible checkpoint."""


class UndefinedMetricError(CmadError):
    """Metric requested on a degenerate score set (single-class labels)."""
