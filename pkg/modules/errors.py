# ---------------------------------------------------
# errors.py - TransCoder Exception Classes
# ---------------------------------------------------
# A module that contains every exception raised by
# the engine and the command line surface. Each
# class carries the exit code main.py returns when
# the exception escapes a command.
# ---------------------------------------------------


class TransCoderError(Exception):
    """ Base class of every error raised on purpose by this package. """
    exit_code = 1


# -------------------
#  CONFIGURATION
# -------------------
class ConfigError(TransCoderError):
    exit_code = 2


class CompatibilityError(ConfigError):
    """ A checkpoint does not fit the config or backbone it is used with. """


# -------------------
#  DATA
# -------------------
class DataError(TransCoderError):
    exit_code = 3


class IngestionError(DataError):

    def __init__(self, message, *, lines=()):
        """
        Raised when a JSONL dataset contains malformed lines.
        The offending 1-based line numbers are kept on the
        exception and listed in its message.
        """
        self.lines = list(lines)
        if self.lines:
            listed = ", ".join(str(line) for line in self.lines)
            message = f"{message} (lines: {listed})"
        super().__init__(message)


class InputError(DataError):
    """ Token ids, lengths or losses that the model cannot consume. """


# -------------------
#  NUMERICS
# -------------------
class NumericError(TransCoderError):
    exit_code = 4


class NumericAbort(NumericError):

    def __init__(self, message, *, report=None):
        """ Training stopped on a non-finite value; keeps the partial report. """
        super().__init__(message)
        self.report = report


# -------------------
#  ENGINE MISUSE
# -------------------
class ShapeError(TransCoderError, ValueError):
    exit_code = 1


class StateError(TransCoderError, RuntimeError):
    exit_code = 1
