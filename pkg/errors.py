"""
Error types shared by every DEFE module.

Each error remembers which module raised it so the command line can report
`error [<module>]: <message>` and map the failure onto an exit code.
"""


class DefeError(ValueError):
    exit_code = 1

    def __init__(self, message: str, source: str = "defe"):
        super().__init__(message)
        self.source = source.rsplit(".", 1)[-1]


class ConfigError(DefeError):
    exit_code = 2


class DataError(DefeError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class NumericError(DefeError):
    exit_code = 4
