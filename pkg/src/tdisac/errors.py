"""Exception types raised across the package."""


class ScenarioError(ValueError):
    """A scenario document is malformed or violates an invariant."""


class GeometryError(ValueError):
    """A target coincides with an array element (zero distance)."""


class UnidentifiableGeometryError(ArithmeticError):
    """The Fisher information is singular for the given geometry/covariance."""

    def __init__(self, message, condition=float("inf")):
        super().__init__(f"{message} (condition number {condition:.3e})")
        self.condition = condition


class SensingInfeasibleError(ValueError):
    """Even full-block sensing cannot meet the CRLB threshold."""

    def __init__(self, message, eta_bar=None):
        super().__init__(message)
        self.eta_bar = eta_bar


class InsufficientSnapshotsError(ValueError):
    """Too few sensing snapshots to estimate a noise subspace."""


class SolverError(RuntimeError):
    """The conic solver failed numerically."""


class FarFieldWarning(UserWarning):
    """A user lies beyond the Rayleigh distance of an AP."""
