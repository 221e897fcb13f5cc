"""Nuisance models: local propensities, Gaussian moments, federated weights.

The global propensity score is a convex combination of locally fitted
propensity scores. Two weighting schemes are supported:

* membership weights (MW): softmax site-membership probabilities from a
  multinomial logistic model;
* density ratio weights (DW): proportion-weighted Gaussian densities fitted
  from per-site moments, normalized by their sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .data import SiteDataset
from .dgp import sigmoid, softmax_rows
from .errors import (
    AllDensitiesZero,
    DimensionMismatch,
    InsufficientData,
    SingularCovariance,
)

__all__ = [
    "LogisticParams",
    "GaussianMoments",
    "MembershipParams",
    "OutcomeParams",
    "GlobalPropensity",
    "fit_logistic_local",
    "predict_local",
    "fit_gaussian_moments",
    "gaussian_density",
    "gaussian_log_density",
    "density_ratio_weights",
    "membership_weights",
    "global_propensity",
    "nuisance_to_json",
    "nuisance_from_json",
    "outcome_to_json",
    "outcome_from_json",
]

PropensityLike = Union["LogisticParams", Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class LogisticParams:
    """A fitted (or degenerate) binary logistic model with fit diagnostics.

    ``degenerate`` is "all_control" or "all_treated" when the training site
    had a single treatment arm; predictions are then constant 0 or 1 and no
    coefficients are fit.
    """

    coefficients: np.ndarray
    intercept: float | None = None
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0
    solver: str = "newton"
    degenerate: str = "normal"

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict_local(self, x)


def _nll_grad_hess(
    z: np.ndarray, w: np.ndarray, beta: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative log-likelihood, gradient, Hessian for design z and labels w."""
    eta = z @ beta
    p = sigmoid(eta)
    nll = float(np.logaddexp(0.0, eta).sum() - (w * eta).sum())
    grad = z.T @ (p - w)
    weights = p * (1.0 - p)
    hess = z.T @ (weights[:, None] * z)
    return nll, grad, hess


def fit_logistic_local(
    site: SiteDataset,
    include_intercept: bool = True,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> LogisticParams:
    """Fit the site's propensity by Newton iterations (IRLS) on w | x.

    A single-arm site is flagged degenerate and no model is fit: its score
    is the constant 0 or 1, which is a legitimate local score as long as the
    aggregated global score stays inside (0, 1) on active arms. A singular
    Hessian triggers a fallback to plain gradient descent, reported through
    the ``solver`` diagnostic.
    """
    w = site.w
    if w.sum() == 0:
        return LogisticParams(np.zeros(site.d), None, degenerate="all_control")
    if w.sum() == site.n:
        return LogisticParams(np.zeros(site.d), None, degenerate="all_treated")

    z = np.column_stack([np.ones(site.n), site.x]) if include_intercept else site.x
    beta = np.zeros(z.shape[1])
    solver = "newton"
    converged = False
    it = 0
    grad = np.zeros_like(beta)
    for it in range(1, max_iter + 1):
        _, grad, hess = _nll_grad_hess(z, w, beta)
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            solver = "gradient_descent"
            break
        beta = beta - step
    if solver == "gradient_descent":
        # Lipschitz-safe step: logistic curvature is at most 1/4 per row.
        lip = 0.25 * np.linalg.eigvalsh(z.T @ z).max()
        eta_step = 1.0 / lip
        for it in range(it, max_iter * 50 + 1):
            _, grad, _ = _nll_grad_hess(z, w, beta)
            if np.linalg.norm(grad) < tol:
                converged = True
                break
            beta = beta - eta_step * grad
    if not converged:
        _, grad, _ = _nll_grad_hess(z, w, beta)
        converged = bool(np.linalg.norm(grad) < tol)
    if include_intercept:
        intercept, coefs = float(beta[0]), beta[1:]
    else:
        intercept, coefs = None, beta
    return LogisticParams(
        coefficients=coefs,
        intercept=intercept,
        converged=converged,
        n_iter=it,
        grad_norm=float(np.linalg.norm(grad)),
        solver=solver,
    )


def predict_local(params: LogisticParams, x: np.ndarray) -> np.ndarray:
    """Score new covariates with a fitted local model (or its degenerate
    constant)."""
    x = np.atleast_2d(x)
    if params.degenerate == "all_control":
        return np.zeros(x.shape[0])
    if params.degenerate == "all_treated":
        return np.ones(x.shape[0])
    if x.shape[1] != params.coefficients.shape[0]:
        raise DimensionMismatch(
            f"covariates have dimension {x.shape[1]}, model expects "
            f"{params.coefficients.shape[0]}"
        )
    eta = x @ params.coefficients
    if params.intercept is not None:
        eta = eta + params.intercept
    return sigmoid(eta)


@dataclass(frozen=True)
class GaussianMoments:
    """Per-site Gaussian maximum-likelihood moments (ridge-stabilized)."""

    mean: np.ndarray
    cov: np.ndarray
    count: int


def fit_gaussian_moments(site: SiteDataset, ridge: float | None = None) -> GaussianMoments:
    """Mean and 1/n-normalized covariance of the site's covariates.

    ``ridge`` defaults to 1e-8 * trace / d, enough to guard a zero
    determinant in small sites without measurably biasing results.
    """
    if site.n < 2:
        raise InsufficientData(f"site {site.site_id} has {site.n} row(s), need >= 2")
    mean = site.x.mean(axis=0)
    centered = site.x - mean
    cov = centered.T @ centered / site.n
    if ridge is None:
        ridge = 1e-8 * np.trace(cov) / site.d
    cov = cov + ridge * np.eye(site.d)
    return GaussianMoments(mean=mean, cov=cov, count=site.n)


def _moments_cholesky(m: GaussianMoments) -> np.ndarray:
    try:
        return np.linalg.cholesky(m.cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from None


def gaussian_log_density(m: GaussianMoments, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    d = m.mean.shape[0]
    chol = _moments_cholesky(m)
    z = np.linalg.solve(chol, (x - m.mean).T)
    log_norm = -0.5 * d * np.log(2 * np.pi) - np.log(np.diag(chol)).sum()
    return log_norm - 0.5 * (z**2).sum(axis=0)


def gaussian_density(m: GaussianMoments, x: np.ndarray) -> np.ndarray:
    """Multivariate normal pdf at the query points."""
    return np.exp(gaussian_log_density(m, x))


def density_ratio_weights(
    moments: Sequence[GaussianMoments],
    proportions: np.ndarray,
    x: np.ndarray,
) -> np.ndarray:
    """Density ratio weights: proportion-weighted site pdfs over their sum.

    Returns an (n, K) matrix of simplex rows. If every site's density
    underflows to zero at some point, the point sits in the far tail of all
    sites and AllDensitiesZero is raised instead of renormalizing noise.
    """
    x = np.atleast_2d(x)
    props = np.asarray(proportions, dtype=np.float64)
    dens = np.column_stack([gaussian_density(m, x) for m in moments]) * props
    totals = dens.sum(axis=1)
    dead = totals == 0.0
    if dead.any():
        raise AllDensitiesZero(
            f"{int(dead.sum())} point(s) have zero estimated density at every site "
            f"(first row index {int(np.flatnonzero(dead)[0])})"
        )
    return dens / totals[:, None]


@dataclass(frozen=True)
class MembershipParams:
    """Multinomial logistic coefficients, one column per site."""

    coefs: np.ndarray  # (d, K)

    @property
    def n_sites(self) -> int:
        return self.coefs.shape[1]


def membership_weights(params: MembershipParams, x: np.ndarray) -> np.ndarray:
    """Softmax site-membership probabilities, an (n, K) simplex matrix."""
    x = np.atleast_2d(x)
    if x.shape[1] != params.coefs.shape[0]:
        raise DimensionMismatch(
            f"covariates have dimension {x.shape[1]}, membership model expects "
            f"{params.coefs.shape[0]}"
        )
    return softmax_rows(x @ params.coefs)


@dataclass(frozen=True)
class OutcomeParams:
    """A linear or binary-logistic outcome model fit by federated descent."""

    coefficients: np.ndarray
    intercept: float
    kind: str = "linear"  # or "logistic"

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        eta = x @ self.coefficients + self.intercept
        return sigmoid(eta) if self.kind == "logistic" else eta


@dataclass(frozen=True)
class GlobalPropensity:
    """A federated global propensity score.

    Combines K local models through the selected weight scheme. ``clip``
    of 0 (the default) leaves scores untouched; a positive value bounds them
    to [clip, 1 - clip] and is always reported alongside results.
    """

    scheme: str  # "MW" or "DW"
    local_models: tuple[PropensityLike, ...]
    membership: MembershipParams | None = None
    moments: tuple[GaussianMoments, ...] | None = None
    proportions: np.ndarray | None = None
    clip: float = 0.0

    def __post_init__(self):
        if self.scheme not in ("MW", "DW"):
            raise ValueError(f"unknown weight scheme {self.scheme!r}")
        if self.scheme == "MW" and self.membership is None:
            raise ValueError("MW scheme requires membership parameters")
        if self.scheme == "DW" and (self.moments is None or self.proportions is None):
            raise ValueError("DW scheme requires moments and proportions")
        if not 0.0 <= self.clip < 0.5:
            raise ValueError("clip must lie in [0, 0.5)")

    def weights(self, x: np.ndarray) -> np.ndarray:
        if self.scheme == "MW":
            return membership_weights(self.membership, x)
        return density_ratio_weights(self.moments, self.proportions, x)

    def local_scores(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        cols = []
        for model in self.local_models:
            if isinstance(model, LogisticParams):
                cols.append(predict_local(model, x))
            else:
                cols.append(np.asarray(model(x)).ravel())
        return np.column_stack(cols)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return global_propensity(self, x)


def global_propensity(gp: GlobalPropensity, x: np.ndarray) -> np.ndarray:
    """Weighted combination of local scores, optionally clipped."""
    x = np.atleast_2d(x)
    weights = gp.weights(x)
    scores = gp.local_scores(x)
    if weights.shape[1] != scores.shape[1]:
        raise DimensionMismatch(
            f"{weights.shape[1]} weight columns vs {scores.shape[1]} local models"
        )
    combined = (weights * scores).sum(axis=1)
    if gp.clip > 0.0:
        combined = np.clip(combined, gp.clip, 1.0 - gp.clip)
    return combined


# -- serialization ------------------------------------------------------------
# The JSON document mirrors exactly what a site transmits: scheme, local
# coefficients and diagnostics, plus the weight model (membership matrix or
# moment payloads with proportions).


def _logistic_to_dict(p: LogisticParams) -> dict:
    return {
        "coefficients": p.coefficients.tolist(),
        "intercept": p.intercept,
        "converged": p.converged,
        "n_iter": p.n_iter,
        "grad_norm": p.grad_norm,
        "solver": p.solver,
        "degenerate": p.degenerate,
    }


def _logistic_from_dict(d: dict) -> LogisticParams:
    return LogisticParams(
        coefficients=np.array(d["coefficients"], dtype=np.float64),
        intercept=d["intercept"],
        converged=d["converged"],
        n_iter=d["n_iter"],
        grad_norm=d["grad_norm"],
        solver=d["solver"],
        degenerate=d["degenerate"],
    )


def outcome_to_json(treated: OutcomeParams, control: OutcomeParams) -> str:
    """Serialize the pair of fitted outcome models (the payload a site
    receives after federated outcome training)."""

    def enc(p: OutcomeParams) -> dict:
        return {
            "coefficients": p.coefficients.tolist(),
            "intercept": p.intercept,
            "kind": p.kind,
        }

    return json.dumps({"treated": enc(treated), "control": enc(control)}, indent=2)


def outcome_from_json(text: str) -> tuple[OutcomeParams, OutcomeParams]:
    doc = json.loads(text)

    def dec(d: dict) -> OutcomeParams:
        return OutcomeParams(
            coefficients=np.array(d["coefficients"], dtype=np.float64),
            intercept=d["intercept"],
            kind=d["kind"],
        )

    return dec(doc["treated"]), dec(doc["control"])


def nuisance_to_json(gp: GlobalPropensity) -> str:
    doc: dict = {
        "scheme": gp.scheme,
        "clip": gp.clip,
        "local_models": [],
    }
    for model in gp.local_models:
        if not isinstance(model, LogisticParams):
            raise TypeError("only fitted logistic local models serialize to JSON")
        doc["local_models"].append(_logistic_to_dict(model))
    if gp.scheme == "MW":
        doc["membership_coefs"] = gp.membership.coefs.tolist()
    else:
        doc["moments"] = [
            {"mean": m.mean.tolist(), "cov": m.cov.tolist(), "count": m.count}
            for m in gp.moments
        ]
        doc["proportions"] = np.asarray(gp.proportions).tolist()
    return json.dumps(doc, indent=2)


def nuisance_from_json(text: str) -> GlobalPropensity:
    doc = json.loads(text)
    local = tuple(_logistic_from_dict(d) for d in doc["local_models"])
    if doc["scheme"] == "MW":
        return GlobalPropensity(
            scheme="MW",
            local_models=local,
            membership=MembershipParams(np.array(doc["membership_coefs"])),
            clip=doc["clip"],
        )
    moments = tuple(
        GaussianMoments(np.array(m["mean"]), np.array(m["cov"]), m["count"])
        for m in doc["moments"]
    )
    return GlobalPropensity(
        scheme="DW",
        local_models=local,
        moments=moments,
        proportions=np.array(doc["proportions"]),
        clip=doc["clip"],
    )
