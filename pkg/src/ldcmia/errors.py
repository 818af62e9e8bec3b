"""Exception hierarchy shared across the toolkit."""


class LdcMiaError(Exception):
    """Base class for all toolkit errors."""


class InputError(LdcMiaError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(LdcMiaError):
    """A run or ablation config is malformed."""


class DataError(LdcMiaError):
    """Dataset ingestion or splitting failed."""


class CsvParseError(DataError):
    pass


class UnknownColumnError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class TrainingError(LdcMiaError):
    """Model training diverged or could not run."""


class ReportError(LdcMiaError):
    """Run artifacts are missing or inconsistent."""
