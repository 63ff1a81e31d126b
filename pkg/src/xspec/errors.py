"""Exception hierarchy shared across the package."""


class XSpecError(Exception):
    pass


class ShapeError(XSpecError, ValueError):
    pass


class ContractError(XSpecError, ValueError):
    pass


class DomainError(XSpecError, ValueError):
    """Math domain violation, e.g. a fractional power of a negative base."""


class ParameterError(XSpecError, ValueError):
    pass


class SchemeError(XSpecError, ValueError):
    """A record lacks an attribute the SIE scheme needs."""


class SamplerError(XSpecError, ValueError):
    pass


class ManifestError(XSpecError, ValueError):
    """Malformed manifest line or out-of-range label."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(XSpecError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class CheckpointError(XSpecError, ValueError):
    """Unreadable checkpoint, wrong version tag, or shape mismatch with the config."""


class NumericalError(XSpecError, ArithmeticError):
    pass


class GradcheckError(NumericalError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (coordinate {index})")
        self.index = index
