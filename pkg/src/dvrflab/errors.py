class DVRFError(Exception):
    """Base class for all errors raised by dvrflab."""


class ConfigError(DVRFError, ValueError):
    pass


class DomainError(DVRFError, ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class ShapeError(DVRFError, ValueError):
    pass


class DivergenceError(DVRFError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class UnreliableEstimateError(DVRFError, RuntimeError):
    pass


class DegeneratePathError(DVRFError, ValueError):
    pass
