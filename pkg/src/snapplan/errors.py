"""Exception types shared across the package."""


class SnapPlanError(Exception):
    """Base class for all package errors."""


class DomainError(SnapPlanError, ValueError):
    """An argument lies outside the domain of the operation (e.g. time out of range)."""


class ArgumentError(SnapPlanError, ValueError):
    """Malformed or inconsistent arguments."""


class ResourceError(SnapPlanError):
    """A request exceeds a configured resource cap."""


class StateError(SnapPlanError):
    """An operation was called in an invalid state (e.g. backward without forward)."""


class DegenerateGradientError(SnapPlanError):
    """The differentiated KKT system is singular because of weak complementarity."""

    def __init__(self, index: int, margin: float):
        self.index = index
        self.margin = margin
        super().__init__(
            f"weak complementarity at inequality row {index} (margin {margin:.3e})"
        )


class TrainingDivergence(SnapPlanError):
    """Training produced a non-finite loss or exceeded the skip budget."""


class SolverFailure(SnapPlanError):
    """A QP solve ended without a KKT point within tolerance."""
