"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems 3, numerical aborts 4.
"""


class EvampError(Exception):
    exit_code = 1


class ConfigError(EvampError):
    exit_code = 2


class DataError(EvampError):
    exit_code = 3


class NumericalError(EvampError):
    exit_code = 4


class ContractError(EvampError):
    """A caller broke an operation's precondition."""


class DimensionError(ContractError, ValueError):
    pass


class LabelParseError(DataError, ValueError):
    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class SerializationError(DataError):
    pass


class VersionError(SerializationError):
    pass


class CorruptFileError(SerializationError):
    pass
