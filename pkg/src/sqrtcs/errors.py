"""Exception hierarchy shared across the package."""


class SqrtCsError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SqrtCsError, ValueError):
    pass


class NotPositiveDefinite(SqrtCsError, ValueError):
    pass


class RankDeficient(SqrtCsError, ValueError):
    pass


class DomainError(SqrtCsError, ValueError):
    pass


class InvalidDimension(SqrtCsError, ValueError):
    pass


class InvalidParameter(SqrtCsError, ValueError):
    pass


class InvalidSpec(SqrtCsError, ValueError):
    pass


class DegenerateReference(SqrtCsError, ValueError):
    pass


class LayoutMismatch(SqrtCsError, ValueError):
    pass


class UnsupportedCone(SqrtCsError):
    pass


class BackendFailure(SqrtCsError):
    """Raised when the conic backend does not return a usable solution.

    Attributes
    ----------
    status : str
        One of ``"infeasible"``, ``"unbounded"``, ``"numerical_trouble"``.
    detail : str
        Backend-specific status string.
    """

    def __init__(self, status, detail=""):
        self.status = status
        self.detail = detail
        super().__init__(f"backend failure: {status} ({detail})" if detail else f"backend failure: {status}")


class MaxIterations(SqrtCsError):
    """Raised when the SCP loop exhausts its iteration budget.

    The partial :class:`~sqrtcs.scvx.ScpReport` is attached as ``report``.
    """

    def __init__(self, report, policy=None):
        self.report = report
        self.policy = policy
        super().__init__(f"SCP did not converge in {len(report.iterations)} iterations")


class ConfigError(SqrtCsError, ValueError):
    """Scenario configuration is unreadable or fails validation; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
