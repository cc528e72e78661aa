"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class AirstmError(Exception):
    exit_code = 1


class ConfigError(AirstmError):
    exit_code = 2


class ParseError(ConfigError):
    """Malformed input row; ``line`` is 1-based and counts the header."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class SchemaError(ConfigError):
    pass


class UnknownSiteError(ConfigError):
    pass


class MissingnessCapError(ConfigError):
    pass


class DomainError(AirstmError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 3


class DegenerateCovariateError(DomainError):
    pass


class ContractError(AirstmError):
    """Caller asked for an operation the model does not define."""

    exit_code = 2


class NumericalError(AirstmError):
    exit_code = 3


class NotPSDError(NumericalError):
    pass


class ResourceError(AirstmError):
    exit_code = 4
