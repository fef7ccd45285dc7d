"""
Domain errors raised by the kinetics app
"""


class CoagLabError(Exception):
    """Base class for every error raised by the lab."""


class HypothesisError(CoagLabError):
    """The rates and diffusivities violate the hypothesis a run was told to require."""

    def __init__(self, report):
        n1, n2, n3 = report.worst_triple
        super().__init__(
            f"hypothesis fails at (n1, n2, n3) = ({n1}, {n2}, {n3}) with ratio {report.worst_ratio:.6g}"
        )
        self.report = report


class CellSolveError(CoagLabError):
    """The discretized cell problem could not be solved to tolerance."""

    def __init__(self, message, condition=None, residual=None):
        super().__init__(message)
        self.condition = condition
        self.residual = residual

    def __str__(self):
        base = super().__str__()
        if self.condition is not None:
            base += f" (condition estimate {self.condition:.3e})"
        if self.residual is not None:
            base += f" (residual {self.residual:.3e})"
        return base


class StepRejectedError(CoagLabError):
    pass


class ConservationError(CoagLabError):
    pass


class OverflowBucketError(CoagLabError):
    pass


class ConfigMismatchError(CoagLabError):
    pass


class FitError(CoagLabError):
    pass


class InsufficientReplicasError(CoagLabError):
    pass
