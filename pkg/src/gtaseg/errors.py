"""Exception hierarchy shared across the package."""


class GtaSegError(Exception):
    pass


class DimensionError(GtaSegError, ValueError):
    pass


class ContractError(GtaSegError, ValueError):
    """A caller violated an operation's precondition."""


class UsageError(GtaSegError, RuntimeError):
    pass


class ConfigError(GtaSegError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(GtaSegError, ValueError):
    pass


class FormatError(GtaSegError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VersionError(FormatError):
    pass


class NumericError(GtaSegError, ArithmeticError):
    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} at iteration {iteration}"
        super().__init__(message)
