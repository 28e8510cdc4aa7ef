"""Exception hierarchy shared across the simulator.

The CLI maps these onto exit codes: configuration and file-format problems
exit with 2, analysis failures (broken calibration, lost sync, empty key)
exit with 1.
"""


class StationError(Exception):
    """Base class for all simulator errors."""


class ConfigError(StationError):
    """Invalid configuration value or violated operating precondition."""


class CalibrationError(StationError):
    """Calibration input is unusable or a required table is missing."""


class SyncRecoveryError(StationError):
    """Clock recovery could not find a credible sync comb."""


class PackError(StationError):
    """A record field does not fit its wire-format width."""


class FileFormatError(StationError):
    """Malformed binary artifact. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
