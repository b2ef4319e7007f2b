"""Exception types shared across the package."""


class HomogenizationError(Exception):
    pass


class InvalidParameters(HomogenizationError, ValueError):
    """A constructor or operation precondition was violated."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class MaxIterExceeded(HomogenizationError):
    def __init__(self, message, residual=float("nan")):
        self.residual = residual
        super().__init__(f"{message} (last residual {residual:.3e})")


class NonFiniteEnergy(HomogenizationError):
    pass


class DegeneratePoint(HomogenizationError, ZeroDivisionError):
    pass


class OutOfTable(HomogenizationError):
    pass


class MeshTooCoarse(HomogenizationError):
    pass


class MeshNotNested(HomogenizationError):
    pass
