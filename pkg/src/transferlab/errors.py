"""Exception hierarchy shared across the package."""


class TransferLabError(Exception):
    """Base class for all package-specific errors."""


class IngestionError(TransferLabError):
    """A dataset file is missing, truncated, or otherwise unreadable."""


class DataIntegrityError(TransferLabError):
    """Parsed data violates its contract (e.g. label out of range)."""


class NumericsError(TransferLabError):
    """A computation produced non-finite values."""


class TrainingDivergedError(NumericsError):
    """Training loss became non-finite; carries epoch/batch context."""


class ConfigValidationError(TransferLabError):
    """An experiment config violates the schema.

    ``problems`` lists every violated field at once so a user can fix a
    config in a single pass.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


class UnmetDependencyError(TransferLabError):
    """A required cached artifact is absent and recomputation is disabled."""


class MissingRecordsError(TransferLabError):
    """A report was asked to render from record files that do not exist."""


class IncompleteRecordsError(TransferLabError):
    """A report rendered, but some requested cells had no backing records."""
