"""Exception types shared across the package."""


class ResourceLimitError(RuntimeError):
    """A size guard was tripped (mesh too fine, distance table too large, ...)."""


class MeshFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshValidationError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid mesh: " + "; ".join(self.violations))


class InvalidConductivityError(ValueError):
    pass


class GeodesicError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass
