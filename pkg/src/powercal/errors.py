"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PowercalError(Exception):
    exit_code = 1


class ConfigError(PowercalError, ValueError):
    """Bad argument, preset name or configuration value."""

    exit_code = 1


class DataError(PowercalError):
    """Input data is missing something an operation needs."""

    exit_code = 4


class ParseError(DataError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class IntegrityError(DataError):
    """Dangling or duplicate id, broken partition."""


class ShapeError(DataError, ValueError):
    """Dimension mismatch between parameters, features or inputs."""


class DegenerateError(DataError):
    """A quantity needed as a denominator is zero (or labels are single-class)."""

    def __init__(self, message, district_id=None):
        self.district_id = district_id
        super().__init__(message)


class EmptyEvaluationError(DataError):
    pass


class DivergenceError(PowercalError):
    """Training produced a non-finite loss, gradient or iterate."""

    exit_code = 3

    def __init__(self, message, iteration=None, last_params=None):
        self.iteration = iteration
        self.last_params = last_params
        super().__init__(message)
