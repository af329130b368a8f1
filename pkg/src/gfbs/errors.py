"""Exception types shared across the toolkit, mapped to CLI exit codes."""


class GfbsError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(GfbsError):
    """Invalid configuration, shapes, arguments, or API usage."""

    exit_code = 2


class NumericError(GfbsError):
    """Non-finite values or numeric divergence."""

    exit_code = 3


class FormatError(GfbsError):
    """Malformed files: checkpoints, IDX archives, CSVs, network specs."""

    exit_code = 4
