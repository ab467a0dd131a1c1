"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ContLearnError(Exception):
    exit_code = 1


class ConfigError(ContLearnError, ValueError):
    exit_code = 2


class InputError(ContLearnError, ValueError):
    exit_code = 3


class ParseError(InputError):
    """Malformed data record; message includes the line number."""


class SchemaError(InputError):
    pass


class StateError(ContLearnError, RuntimeError):
    exit_code = 1


class NumericError(ContLearnError, ArithmeticError):
    exit_code = 4
