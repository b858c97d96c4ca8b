"""Exception hierarchy shared by every module."""


class PurifyError(Exception):
    """Base class for all package errors."""


class ParameterError(PurifyError, ValueError):
    """An argument violates an operation's precondition."""


class DegenerateScheduleError(ParameterError):
    """A variance schedule makes a closed form undefined (e.g. 1 - alpha_bar = 0)."""


class CapabilityError(PurifyError):
    """The pipeline cannot provide what the caller asked for (e.g. gradients)."""


class ConfigurationError(PurifyError):
    """A run or threat-model configuration is invalid or incomplete."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ParseError(PurifyError):
    """A data file is malformed."""

    def __init__(self, message, path=None, offset=None):
        where = ""
        if path is not None:
            where = f" [{path}" + (f" @ byte {offset}" if offset is not None else "") + "]"
        super().__init__(message + where)
        self.path = path
        self.offset = offset


class ValidationError(PurifyError, ValueError):
    """Loaded data violates a domain invariant (e.g. label out of range)."""


class IntegrityError(PurifyError):
    """A checkpoint's manifest and payload disagree."""

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class TrainingDivergedError(PurifyError):
    """A training loss became non-finite; carries the offending log record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
