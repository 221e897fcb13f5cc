"""Exception hierarchy shared across the package."""


class FedCausalError(Exception):
    """Base class for all package errors."""


class ValidationError(FedCausalError):
    """A dataset violates one of its structural invariants."""


class DimensionMismatch(ValidationError):
    """Covariate dimensions disagree between rows, sites, or model parameters."""


class EmptySite(ValidationError):
    """A site contains no records."""


class InvalidTreatment(ValidationError):
    """A treatment indicator is outside {0, 1}."""


class NonPositiveDefiniteCovariance(FedCausalError):
    """A covariance matrix failed its Cholesky factorization."""


class InsufficientData(FedCausalError):
    """Too few rows to fit the requested model."""


class SingularCovariance(FedCausalError):
    """A fitted covariance matrix is numerically singular."""


class AllDensitiesZero(FedCausalError):
    """Every site's density underflows to zero at a query point.

    Signals a point in the far tail of all site distributions; the caller
    decides the fallback rather than the weights being silently renormalized
    from noise.
    """


class DivergenceDetected(FedCausalError):
    """Federated training loss increased for too many consecutive rounds."""


class EmptyGlobalArm(FedCausalError):
    """No site contributes any row to one treatment arm."""


class MetaUndefined(FedCausalError):
    """Meta-analysis is undefined because some site has a single treatment arm."""


class DivisionByZeroPropensity(FedCausalError):
    """A propensity score of 0 (treated row) or 1 (control row) was hit.

    Carries the offending site and row for diagnosis.
    """

    def __init__(self, message: str, site_id=None, row=None):
        super().__init__(message)
        self.site_id = site_id
        self.row = row


class TooManyFailedResamples(FedCausalError):
    """More than the tolerated share of bootstrap resamples raised errors."""


class ConfigError(FedCausalError):
    """A scenario or federation configuration is invalid."""


class PlotDataError(FedCausalError):
    """Plot-data emission failed (missing or empty inputs, unwritable target)."""
