"""
Exception hierarchy. Every error carries the process exit code the CLI
reports for it: 1 usage, 2 data, 3 numerical failure.
"""

from pathlib import Path


class PVSegError(Exception):
    exit_code: int = 1


##############################################################################
# usage / configuration
##############################################################################
class UsageError(PVSegError):
    exit_code = 1


class ConfigError(UsageError, ValueError):
    pass


##############################################################################
# data
##############################################################################
class DataError(PVSegError):
    exit_code = 2


class ShapeMismatchError(DataError, ValueError):
    pass


class UnreadableFileError(DataError, OSError):
    pass


class ChannelMismatchError(DataError, ValueError):
    pass


class ManifestError(DataError, ValueError):
    pass


class CheckpointError(DataError, ValueError):
    pass


##############################################################################
# numerical
##############################################################################
class NumericalError(PVSegError):
    exit_code = 3


class DivergenceError(NumericalError, FloatingPointError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path
