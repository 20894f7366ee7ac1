"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can report
failures as a single parsable line.
"""


class GRNetError(Exception):
    code = "E_GRNET"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class DimensionError(GRNetError, ValueError):
    code = "E_DIM"


class LogicError(GRNetError, ValueError):
    code = "E_LOGIC"


class ConfigError(GRNetError, ValueError):
    code = "E_CONFIG"


class DataError(GRNetError, ValueError):
    code = "E_DATA"


class NumericError(GRNetError, ArithmeticError):
    code = "E_NUMERIC"


class InputError(GRNetError, ValueError):
    code = "E_INPUT"


class EmptyProtocolError(GRNetError, ValueError):
    code = "E_EMPTY_PROTOCOL"
