"""Exception types shared across the toolkit.

Every error raised on a contract violation derives from AtlasError so
callers can catch toolkit failures without swallowing programming bugs.
"""


class AtlasError(Exception):
    """Base class for all toolkit errors."""


class ArgumentError(AtlasError, ValueError):
    """An argument violates a documented precondition."""


class ManifestError(AtlasError):
    """Malformed manifest line; carries the 1-based line number."""

    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class IntegrityError(AtlasError):
    """Cross-record referential integrity violation in a dataset."""


class FormatError(AtlasError):
    """Corrupt or incompatible binary container."""


class DegenerateMaskError(AtlasError):
    """Tissue mask has an empty foreground or background."""


class RegistrationError(AtlasError):
    """Paired images disagree on geometry for a shared coordinate."""


class DegenerateStatisticsError(AtlasError):
    """A statistic is undefined for the given sample (e.g. single patch)."""


class EvaluationError(AtlasError):
    """An evaluation protocol precondition failed (e.g. missing truth)."""


class EmptyGalleryError(AtlasError):
    """Query issued against an index with zero rows."""


class BatchNormDegeneracyError(AtlasError):
    """Batch statistics are undefined for a single-row training batch."""


class ConfigError(AtlasError):
    """Training or service configuration is unusable as given."""


class FoldPlanError(AtlasError):
    """Cross-validation folds cannot be constructed as requested."""


class DegenerateLabelError(AtlasError):
    """Labels lack the variation the estimator requires."""


class EmptyBagError(AtlasError):
    """A multiple-instance bag has no valid instances."""


class UndefinedMetricError(AtlasError):
    """Metric has no defined value for the inputs (status in message)."""


class SnapshotError(FormatError):
    """Index snapshot failed checksum or version validation."""


class ServiceError(AtlasError):
    """Query service request could not be satisfied."""
