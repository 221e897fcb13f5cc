"""Synthetic multi-site data generators and their oracle nuisance functions.

Two benchmark designs are provided:

* design A: three sites, each drawing a fixed number of individuals from its
  own multivariate Gaussian, with a site-specific logistic treatment rule;
* design B: one Gaussian-mixture population assigned to three sites through
  a multinomial softmax of the covariates, then treated site-by-site with
  the same logistic rules as design A.

Both expose the true local propensities, the true site-membership weights,
the true global propensity, and a brute-force Monte Carlo oracle for the
average treatment effect, so estimator bias can be measured against ground
truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import FederatedDataset, RngHandle, SiteDataset
from .errors import ConfigError, DimensionMismatch, NonPositiveDefiniteCovariance

__all__ = [
    "OutcomeSpec",
    "DgpAParams",
    "DgpBParams",
    "TrueAte",
    "logistic",
    "gen_dgp_a",
    "gen_dgp_b",
    "true_ate",
    "benchmark_outcome_spec",
    "dgp_a_params",
    "dgp_b_params",
    "oracle_local_propensities",
    "oracle_membership_weights_fn",
    "oracle_global_propensity_fn",
    "COVARIATE_DIM",
    "OVERLAP_REGIMES",
]

COVARIATE_DIM = 10
OVERLAP_REGIMES = ("none", "poor", "good")

# Site-specific logistic treatment coefficients. Site 2's rule depends on the
# overlap regime; under "none" it treats nobody (deterministic control arm).
TREATMENT_COEFS_SITE1 = np.array(
    [-0.25, 0.25, -0.25, -0.25, 0.25, -0.25, -0.25, 0.25, -0.25, 0.25]
)
TREATMENT_COEFS_SITE2_POOR = np.array(
    [-2.5, -1.0, -0.15, -0.15, 0.0, -0.15, -1.0, -0.15, -0.15, 0.0]
)
TREATMENT_COEFS_SITE2_GOOD = np.array(
    [-0.05, -0.1, -0.05, -0.1, 0.05, -0.1, -0.05, -0.1, 0.05, -0.1]
)
TREATMENT_COEFS_SITE3 = np.array(
    [0.15, -0.15, 0.15, -0.15, 0.15, -0.15, 0.15, -0.15, 0.15, -0.15]
)

# Design A: per-site Gaussian covariate laws, 2000 rows per site by default.
DGP_A_SITE_SIZE = 2000
DGP_A_MEANS = (1.0, 1.5, 3.0)  # constant vectors
DGP_A_COVS = ((1.0, 0.5), (0.6, 0.4), (3.0, 0.3))  # (identity scale, all-ones scale)

# Design B: two-component Gaussian mixture, softmax site assignment.
DGP_B_TOTAL_SIZE = 6000
DGP_B_MIX_WEIGHTS = (2.0 / 3.0, 1.0 / 3.0)
DGP_B_COMPONENT_MEANS = (0.0, 1.5)
DGP_B_COMPONENT_COVS = ((1.0, 0.0), (1.0, 0.5))
MEMBERSHIP_COEFS = np.column_stack(
    [
        np.array([-0.5, -0.5, 0.2, -0.5, -0.5, 0.2, -0.5, -0.5, 0.2, 0.2]),
        np.array([0.5, 0.5, 0.2, 0.5, 0.5, 0.2, 0.5, 0.5, 0.2, 0.5]),
        np.array([1.0, 1.0, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2]),
    ]
)  # shape (d, K)


def logistic(x: np.ndarray, coefs: np.ndarray) -> np.ndarray:
    """Sigmoid of the inner product x @ coefs, computed overflow-free.

    ``x`` may be a single vector or an (n, d) matrix; the result is a scalar
    array or an (n,) vector of probabilities.
    """
    x = np.asarray(x, dtype=np.float64)
    coefs = np.asarray(coefs, dtype=np.float64)
    if x.shape[-1] != coefs.shape[0]:
        raise DimensionMismatch(
            f"covariates have dimension {x.shape[-1]}, coefficients {coefs.shape[0]}"
        )
    return sigmoid(x @ coefs)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_benchmark_dim(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    if x.shape[1] < COVARIATE_DIM:
        raise DimensionMismatch(
            f"benchmark outcome surfaces need {COVARIATE_DIM} covariates, got "
            f"{x.shape[1]}"
        )
    return x


def _treated_mean(x: np.ndarray) -> np.ndarray:
    """Benchmark outcome surface under treatment: quadratic + linear + one
    pairwise interaction, with weights j/10 on coordinates j."""
    x = _check_benchmark_dim(x)
    j = np.arange(1, 6)
    quad = (x[:, :5] ** 2 * (j / 10.0)).sum(axis=1)
    j2 = np.arange(6, 11)
    lin = (x[:, 5:10] * (j2 / 10.0)).sum(axis=1)
    return quad + lin + x[:, 8] * x[:, 9]


def _control_mean(x: np.ndarray) -> np.ndarray:
    """Benchmark outcome surface under control; weights (3j-10)/30."""
    x = _check_benchmark_dim(x)
    j = np.arange(1, 6)
    quad = (x[:, :5] ** 2 * ((3 * j - 10) / 30.0)).sum(axis=1)
    j2 = np.arange(6, 11)
    lin = (x[:, 5:10] * ((3 * j2 - 10) / 30.0)).sum(axis=1)
    return quad + lin + x[:, 0] * x[:, 9]


@dataclass(frozen=True)
class OutcomeSpec:
    """Deterministic arm-specific mean functions plus additive Gaussian noise.

    The benchmark tables do not state a noise scale; 1.0 is the default and
    it is exposed here for sensitivity runs.
    """

    treated_mean: Callable[[np.ndarray], np.ndarray]
    control_mean: Callable[[np.ndarray], np.ndarray]
    noise_sd: float = 1.0


def benchmark_outcome_spec(noise_sd: float = 1.0) -> OutcomeSpec:
    return OutcomeSpec(_treated_mean, _control_mean, noise_sd)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefiniteCovariance(str(exc)) from None


def _cov_from_scales(identity_scale: float, ones_scale: float, d: int) -> np.ndarray:
    return identity_scale * np.eye(d) + ones_scale * np.ones((d, d))


def _site2_coefs(regime: str) -> np.ndarray | None:
    if regime == "none":
        return None  # deterministic all-control site
    if regime == "poor":
        return TREATMENT_COEFS_SITE2_POOR
    if regime == "good":
        return TREATMENT_COEFS_SITE2_GOOD
    raise ConfigError(f"unknown overlap regime {regime!r}")


@dataclass(frozen=True)
class DgpAParams:
    """Design A: K independent site Gaussians with fixed per-site sizes.

    ``treatment_coefs[k] is None`` marks a site that deterministically
    assigns control to every row.
    """

    site_means: tuple[np.ndarray, ...]
    site_covs: tuple[np.ndarray, ...]
    site_sizes: tuple[int, ...]
    treatment_coefs: tuple[np.ndarray | None, ...]
    overlap_regime: str = "good"

    @property
    def n_sites(self) -> int:
        return len(self.site_means)

    @property
    def d(self) -> int:
        return len(self.site_means[0])

    def site_proportions(self) -> np.ndarray:
        sizes = np.array(self.site_sizes, dtype=np.float64)
        return sizes / sizes.sum()

    def sample_marginal_covariates(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw from the population covariate law: the site mixture weighted
        by the design's site shares."""
        props = self.site_proportions()
        comp = rng.choice(self.n_sites, size=n, p=props)
        x = np.empty((n, self.d))
        for k in range(self.n_sites):
            mask = comp == k
            m = int(mask.sum())
            if m:
                chol = _cholesky(self.site_covs[k])
                x[mask] = self.site_means[k] + rng.standard_normal((m, self.d)) @ chol.T
        return x


@dataclass(frozen=True)
class DgpBParams:
    """Design B: a Gaussian-mixture population with softmax site assignment."""

    n_total: int
    mixture_weights: tuple[float, ...]
    component_means: tuple[np.ndarray, ...]
    component_covs: tuple[np.ndarray, ...]
    membership_coefs: np.ndarray  # (d, K)
    treatment_coefs: tuple[np.ndarray | None, ...]
    overlap_regime: str = "good"

    @property
    def n_sites(self) -> int:
        return self.membership_coefs.shape[1]

    @property
    def d(self) -> int:
        return self.membership_coefs.shape[0]

    def sample_marginal_covariates(self, n: int, rng: np.random.Generator) -> np.ndarray:
        weights = np.asarray(self.mixture_weights, dtype=np.float64)
        comp = rng.choice(len(weights), size=n, p=weights / weights.sum())
        x = np.empty((n, self.d))
        for c in range(len(weights)):
            mask = comp == c
            m = int(mask.sum())
            if m:
                chol = _cholesky(self.component_covs[c])
                x[mask] = (
                    self.component_means[c] + rng.standard_normal((m, self.d)) @ chol.T
                )
        return x


def dgp_a_params(regime: str = "good", site_size: int = DGP_A_SITE_SIZE) -> DgpAParams:
    """Design A with the benchmark parameter tables."""
    d = COVARIATE_DIM
    return DgpAParams(
        site_means=tuple(np.full(d, m) for m in DGP_A_MEANS),
        site_covs=tuple(_cov_from_scales(a, b, d) for a, b in DGP_A_COVS),
        site_sizes=(site_size,) * 3,
        treatment_coefs=(
            TREATMENT_COEFS_SITE1,
            _site2_coefs(regime),
            TREATMENT_COEFS_SITE3,
        ),
        overlap_regime=regime,
    )


def dgp_b_params(regime: str = "good", n_total: int = DGP_B_TOTAL_SIZE) -> DgpBParams:
    """Design B with the benchmark parameter tables."""
    d = COVARIATE_DIM
    return DgpBParams(
        n_total=n_total,
        mixture_weights=DGP_B_MIX_WEIGHTS,
        component_means=tuple(np.full(d, m) for m in DGP_B_COMPONENT_MEANS),
        component_covs=tuple(_cov_from_scales(a, b, d) for a, b in DGP_B_COMPONENT_COVS),
        membership_coefs=MEMBERSHIP_COEFS,
        treatment_coefs=(
            TREATMENT_COEFS_SITE1,
            _site2_coefs(regime),
            TREATMENT_COEFS_SITE3,
        ),
        overlap_regime=regime,
    )


def _assign_treatment(
    x: np.ndarray, coefs: np.ndarray | None, rng: np.random.Generator
) -> np.ndarray:
    if coefs is None:
        return np.zeros(len(x))
    return (rng.random(len(x)) < logistic(x, coefs)).astype(np.float64)


def _draw_outcomes(
    x: np.ndarray, w: np.ndarray, spec: OutcomeSpec, rng: np.random.Generator
) -> np.ndarray:
    mean = np.where(w == 1.0, spec.treated_mean(x), spec.control_mean(x))
    if spec.noise_sd == 0.0:
        return mean
    return mean + spec.noise_sd * rng.standard_normal(len(x))


def gen_dgp_a(
    params: DgpAParams, spec: OutcomeSpec, rng: RngHandle
) -> FederatedDataset:
    """Generate one design-A federation.

    Each site uses its own child stream of ``rng`` so that generating sites
    concurrently (or in any order) yields identical data.
    """
    sites = []
    for k in range(params.n_sites):
        gen = rng.stream(k)
        chol = _cholesky(params.site_covs[k])
        x = params.site_means[k] + gen.standard_normal(
            (params.site_sizes[k], params.d)
        ) @ chol.T
        w = _assign_treatment(x, params.treatment_coefs[k], gen)
        y = _draw_outcomes(x, w, spec, gen)
        sites.append(SiteDataset(site_id=k + 1, x=x, w=w, y=y))
    return FederatedDataset(sites=tuple(sites))


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = np.atleast_2d(z)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def gen_dgp_b(
    params: DgpBParams, spec: OutcomeSpec, rng: RngHandle
) -> FederatedDataset:
    """Generate one design-B federation (mixture draw, softmax assignment)."""
    gen = rng.stream(0)
    x = params.sample_marginal_covariates(params.n_total, gen)
    probs = softmax_rows(x @ params.membership_coefs)
    u = gen.random((params.n_total, 1))
    h = (probs.cumsum(axis=1) > u).argmax(axis=1)
    sites = []
    for k in range(params.n_sites):
        mask = h == k
        xk = x[mask]
        site_gen = rng.stream(k + 1)
        w = _assign_treatment(xk, params.treatment_coefs[k], site_gen)
        y = _draw_outcomes(xk, w, spec, site_gen)
        sites.append(SiteDataset(site_id=k + 1, x=xk, w=w, y=y))
    return FederatedDataset(sites=tuple(sites))


@dataclass(frozen=True)
class TrueAte:
    """Monte Carlo ground truth with its own standard error."""

    value: float
    se: float
    draws: int


def true_ate(
    spec: OutcomeSpec,
    covariate_sampler: Callable[[int, np.random.Generator], np.ndarray],
    draws: int,
    rng: RngHandle,
) -> TrueAte:
    """Brute-force oracle: mean of treated_mean - control_mean over fresh
    covariate draws from the population law.

    This is the ground truth every bias check is measured against; noise is
    additive with mean zero, so it never enters.
    """
    gen = rng.generator()
    diffs = np.empty(draws)
    done = 0
    chunk = 200_000
    while done < draws:
        m = min(chunk, draws - done)
        x = covariate_sampler(m, gen)
        diffs[done : done + m] = spec.treated_mean(x) - spec.control_mean(x)
        done += m
    se = float(diffs.std(ddof=1) / np.sqrt(draws)) if draws > 1 else 0.0
    return TrueAte(value=float(diffs.mean()), se=se, draws=draws)


# -- oracle nuisance functions ------------------------------------------------


def oracle_local_propensities(
    params: DgpAParams | DgpBParams,
) -> list[Callable[[np.ndarray], np.ndarray]]:
    """True per-site treatment probability functions e_k(x).

    An all-control site yields the constant 0 function; the global score
    stays valid as long as the combined score avoids 0 and 1 on active arms.
    """

    def make(coefs):
        if coefs is None:
            return lambda x: np.zeros(np.atleast_2d(x).shape[0])
        return lambda x: logistic(np.atleast_2d(x), coefs)

    return [make(c) for c in params.treatment_coefs]


def oracle_membership_weights_fn(
    params: DgpAParams | DgpBParams,
) -> Callable[[np.ndarray], np.ndarray]:
    """True site-membership probabilities P(site = k | x) as an (n, K) map.

    For design B this is the softmax of the assignment coefficients. For
    design A it is the Bayes posterior over sites: proportion-weighted
    Gaussian densities, normalized row-wise (computed in log space).
    """
    if isinstance(params, DgpBParams):
        coefs = params.membership_coefs

        def mw(x: np.ndarray) -> np.ndarray:
            return softmax_rows(np.atleast_2d(x) @ coefs)

        return mw

    props = params.site_proportions()
    chols = [_cholesky(c) for c in params.site_covs]
    # the factors are 10x10 at benchmark scale; inverting them once turns
    # every density evaluation into a single matmul, and folding the mean
    # into a precomputed offset avoids one full-size temporary per site
    whiteners = [np.linalg.inv(c).T.copy() for c in chols]
    offsets = [params.site_means[k] @ w for k, w in enumerate(whiteners)]
    d = params.d
    log_const = np.log(props) + np.array(
        [-0.5 * d * np.log(2 * np.pi) - np.log(np.diag(c)).sum() for c in chols]
    )

    def dw(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        logf = np.empty((x.shape[0], params.n_sites))
        for k in range(params.n_sites):
            z = x @ whiteners[k]
            z -= offsets[k]
            logf[:, k] = log_const[k] - 0.5 * np.einsum("ij,ij->i", z, z)
        logf -= logf.max(axis=1, keepdims=True)
        w = np.exp(logf)
        return w / w.sum(axis=1, keepdims=True)

    return dw


def oracle_global_propensity_fn(
    params: DgpAParams | DgpBParams,
) -> Callable[[np.ndarray], np.ndarray]:
    """True global propensity: membership-weighted sum of local scores."""
    weights_fn = oracle_membership_weights_fn(params)
    locals_ = oracle_local_propensities(params)

    def e(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        w = weights_fn(x)
        scores = np.column_stack([f(x) for f in locals_])
        return (w * scores).sum(axis=1)

    return e
