"""Exception types shared across the package."""


class LoadcastError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(LoadcastError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(LoadcastError):
    """A non-finite value or other numerical failure was detected."""


class DataError(LoadcastError):
    """Input data violates the expected schema or contents."""


class IngestError(DataError):
    """CSV ingest failed; carries an itemized list of problems."""

    def __init__(self, items):
        self.items = list(items)
        super().__init__("ingest failed with %d problem(s):\n%s"
                         % (len(self.items), "\n".join("  - " + s for s in self.items)))


class UnrecoverableDayError(DataError):
    """Every sample of a day was flagged as an outlier; the day must be dropped."""


class MissingHistoryError(DataError):
    """Feature construction needs prior same-type days that do not exist yet."""


class ConfigError(LoadcastError):
    """A run configuration value is missing, malformed, or inconsistent."""


class CheckpointError(LoadcastError):
    """Checkpoint file is corrupt, truncated, or of an unsupported version."""


class ContractError(LoadcastError):
    """An internal invariant was violated (e.g. frozen parameters drifted)."""
