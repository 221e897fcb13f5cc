"""Average-treatment-effect estimators, variances, overlap, and bootstrap.

Three aggregation styles over the same per-row scores:

* centralized: one mean over the pooled rows with a shared propensity;
* meta-analysis: per-site estimates with the site's own local propensity,
  combined by sample-size weights (undefined if any site has one arm);
* federated: per-site means with one shared global propensity, combined by
  sample-size weights - algebraically a regrouping of the centralized sum.

Both the IPW score and its augmented (doubly robust) variant are available.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import FederatedDataset, RngHandle, SiteDataset
from .errors import (
    DivisionByZeroPropensity,
    FedCausalError,
    MetaUndefined,
    TooManyFailedResamples,
)
from .nuisance import GlobalPropensity, LogisticParams, predict_local

__all__ = [
    "NuisanceBundle",
    "EstimateReport",
    "BootstrapInterval",
    "ipw_terms",
    "aipw_terms",
    "estimate_centralized",
    "estimate_meta",
    "estimate_federated",
    "federated_tau",
    "report_csv_header",
    "variance_ipw_plugin",
    "variance_aipw_plugin",
    "variance_meta_decomposition",
    "overlap_global",
    "overlap_local",
    "overlap_values",
    "bootstrap_ci",
]

PropensityFn = Callable[[np.ndarray], np.ndarray]
MeanFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NuisanceBundle:
    """The model functions an estimator needs: a propensity map and,
    for the augmented form, the two arm-specific outcome means."""

    propensity: PropensityFn
    treated_mean: MeanFn | None = None
    control_mean: MeanFn | None = None

    def require_outcome_models(self) -> None:
        if self.treated_mean is None or self.control_mean is None:
            raise ValueError("AIPW requires both outcome models")


@dataclass(frozen=True)
class BootstrapInterval:
    lo: float
    hi: float
    level: float
    n_failed: int = 0


@dataclass(frozen=True)
class EstimateReport:
    """One estimator run: point estimate, plug-in variance, diagnostics."""

    estimator: str
    form: str  # "IPW" or "AIPW"
    tau_hat: float
    var_plugin: float
    scheme: str = ""
    bootstrap: BootstrapInterval | None = None
    overlap_global: float | None = None
    overlap_sites: tuple[float, ...] = ()
    communication: dict | None = None
    notes: tuple[str, ...] = ()

    def with_bootstrap(self, interval: BootstrapInterval) -> "EstimateReport":
        return replace(self, bootstrap=interval)

    def csv_row(self) -> list[str]:
        def fmt(v) -> str:
            if v is None:
                return ""
            if isinstance(v, float) and math.isnan(v):
                return ""
            return f"{v:.17g}" if isinstance(v, float) else str(v)

        ci_lo = self.bootstrap.lo if self.bootstrap else None
        ci_hi = self.bootstrap.hi if self.bootstrap else None
        failed = self.bootstrap.n_failed if self.bootstrap else 0
        return (
            [self.estimator, self.form, self.scheme, fmt(self.tau_hat),
             fmt(self.var_plugin), fmt(ci_lo), fmt(ci_hi), fmt(self.overlap_global)]
            + [fmt(v) for v in self.overlap_sites]
            + [str(failed)]
        )

    def to_json(self) -> str:
        doc = {
            "estimator": self.estimator,
            "form": self.form,
            "scheme": self.scheme,
            "tau_hat": self.tau_hat,
            "var_plugin": self.var_plugin,
            "bootstrap": (
                None
                if self.bootstrap is None
                else {
                    "lo": self.bootstrap.lo,
                    "hi": self.bootstrap.hi,
                    "level": self.bootstrap.level,
                    "n_failed": self.bootstrap.n_failed,
                }
            ),
            "overlap_global": self.overlap_global,
            "overlap_sites": list(self.overlap_sites),
            "communication": self.communication,
            "notes": list(self.notes),
        }
        return json.dumps(doc, indent=2)


def report_csv_header(n_sites: int) -> list[str]:
    return (
        ["estimator", "form", "scheme", "tau_hat", "var_plugin", "ci_lo", "ci_hi"]
        + ["o_global"]
        + [f"o_k_{k + 1}" for k in range(n_sites)]
        + ["failed_resamples"]
    )


def _as_scores(propensity, x: np.ndarray) -> np.ndarray:
    if callable(propensity):
        return np.asarray(propensity(x), dtype=np.float64).ravel()
    return np.asarray(propensity, dtype=np.float64).ravel()


def _check_positivity(
    e: np.ndarray, w: np.ndarray, site_id=None
) -> None:
    """Treated rows need e > 0; control rows need e < 1."""
    bad_treated = (w == 1.0) & (e <= 0.0)
    if bad_treated.any():
        row = int(np.flatnonzero(bad_treated)[0])
        raise DivisionByZeroPropensity(
            f"treated row {row} (site {site_id}) has propensity {e[row]!r}",
            site_id=site_id,
            row=row,
        )
    bad_control = (w == 0.0) & (e >= 1.0)
    if bad_control.any():
        row = int(np.flatnonzero(bad_control)[0])
        raise DivisionByZeroPropensity(
            f"control row {row} (site {site_id}) has propensity {e[row]!r}",
            site_id=site_id,
            row=row,
        )


def ipw_terms(
    x: np.ndarray,
    w: np.ndarray,
    y: np.ndarray,
    propensity,
    site_id=None,
) -> np.ndarray:
    """Per-row inverse-propensity-weighted scores w*y/e - (1-w)*y/(1-e)."""
    x = np.atleast_2d(x)
    w = np.asarray(w, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    e = _as_scores(propensity, x)
    _check_positivity(e, w, site_id)
    out = np.zeros_like(y)
    treated = w == 1.0
    out[treated] = y[treated] / e[treated]
    out[~treated] = -y[~treated] / (1.0 - e[~treated])
    return out


def aipw_terms(
    x: np.ndarray,
    w: np.ndarray,
    y: np.ndarray,
    propensity,
    treated_mean: MeanFn,
    control_mean: MeanFn,
    site_id=None,
) -> np.ndarray:
    """Per-row augmented scores: outcome-model contrast plus weighted
    residual corrections."""
    x = np.atleast_2d(x)
    w = np.asarray(w, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    e = _as_scores(propensity, x)
    _check_positivity(e, w, site_id)
    m1 = np.asarray(treated_mean(x), dtype=np.float64).ravel()
    m0 = np.asarray(control_mean(x), dtype=np.float64).ravel()
    out = m1 - m0
    treated = w == 1.0
    out[treated] += (y[treated] - m1[treated]) / e[treated]
    out[~treated] -= (y[~treated] - m0[~treated]) / (1.0 - e[~treated])
    return out


def _terms_for(
    site: SiteDataset, nb: NuisanceBundle, form: str
) -> np.ndarray:
    if form == "IPW":
        return ipw_terms(site.x, site.w, site.y, nb.propensity, site_id=site.site_id)
    if form == "AIPW":
        nb.require_outcome_models()
        return aipw_terms(
            site.x,
            site.w,
            site.y,
            nb.propensity,
            nb.treated_mean,
            nb.control_mean,
            site_id=site.site_id,
        )
    raise ValueError(f"unknown estimator form {form!r}")


def overlap_values(e: np.ndarray) -> np.ndarray:
    """Inverse Bernoulli variance 1/(e(1-e)) per row; +inf where e hits
    0 or 1, the sentinel for a positivity violation."""
    e = np.asarray(e, dtype=np.float64)
    inside = (e > 0.0) & (e < 1.0)
    out = np.full(e.shape, np.inf)
    out[inside] = 1.0 / (e[inside] * (1.0 - e[inside]))
    return out


def overlap_global(fd: FederatedDataset, propensity) -> float:
    """Empirical global overlap: mean of 1/(e(1-e)) over all pooled rows."""
    x, _, _, _ = fd.pooled()
    return float(overlap_values(_as_scores(propensity, x)).mean())


def overlap_local(site: SiteDataset, local_propensity) -> float:
    """Empirical local overlap of one site under its own score."""
    return float(overlap_values(_as_scores(local_propensity, site.x)).mean())


def variance_ipw_plugin(fd: FederatedDataset, propensity) -> float:
    """Plug-in variance of the pooled IPW estimate: the observable
    sample-variance-of-scores form, divided by n.

    Because w(1-w) = 0 kills the cross term, this equals the mean of
    (wy/e)^2 + ((1-w)y/(1-e))^2 minus the squared estimate, over n.
    """
    x, w, y, _ = fd.pooled()
    t = ipw_terms(x, w, y, propensity)
    return float(t.var() / fd.n)


def variance_aipw_plugin(
    fd: FederatedDataset, propensity, treated_mean: MeanFn, control_mean: MeanFn
) -> float:
    """Plug-in variance of the pooled AIPW estimate (variance of scores / n)."""
    x, w, y, _ = fd.pooled()
    t = aipw_terms(x, w, y, propensity, treated_mean, control_mean)
    return float(t.var() / fd.n)


def variance_meta_decomposition(
    site_variances: Sequence[float],
    proportions: Sequence[float],
    site_taus: Sequence[float],
    n_total: int,
) -> float:
    """Within-site plus between-site variance of the meta-analysis estimate.

    The between-site part is the proportion-weighted variance of the local
    effects: sum rho_k tau_k^2 - (sum rho_k tau_k)^2.
    """
    v = np.asarray(site_variances, dtype=np.float64)
    rho = np.asarray(proportions, dtype=np.float64)
    taus = np.asarray(site_taus, dtype=np.float64)
    between = float(rho @ taus**2 - (rho @ taus) ** 2)
    return float((rho @ v + between) / n_total)


def _site_overlaps(
    fd: FederatedDataset, local_propensities: Sequence | None, shared_propensity
) -> tuple[float, ...]:
    """Per-site overlap diagnostics: local scores when available, otherwise
    the shared score restricted to each site's rows."""
    out = []
    for k, site in enumerate(fd.sites):
        fn = (
            local_propensities[k]
            if local_propensities is not None
            else shared_propensity
        )
        out.append(overlap_local(site, fn))
    return tuple(out)


def estimate_centralized(
    fd: FederatedDataset, nb: NuisanceBundle, form: str = "IPW"
) -> EstimateReport:
    """Pooled-data estimate with one shared propensity: the mean of the
    per-row scores over all n rows."""
    x, w, y, _ = fd.pooled()
    if form == "AIPW":
        nb.require_outcome_models()
        t = aipw_terms(x, w, y, nb.propensity, nb.treated_mean, nb.control_mean)
    else:
        t = ipw_terms(x, w, y, nb.propensity)
    e = _as_scores(nb.propensity, x)
    return EstimateReport(
        estimator="centralized",
        form=form,
        tau_hat=float(t.mean()),
        var_plugin=float(t.var() / fd.n),
        overlap_global=float(overlap_values(e).mean()),
        overlap_sites=_site_overlaps(fd, None, nb.propensity),
    )


def estimate_meta(
    fd: FederatedDataset,
    local_propensities: Sequence,
    outcome_models: Sequence[tuple[MeanFn, MeanFn]] | tuple[MeanFn, MeanFn] | None = None,
    form: str = "IPW",
) -> EstimateReport:
    """Sample-size-weighted combination of per-site estimates, each using
    the site's own local propensity (and, for AIPW, outcome models that may
    be shared or per-site).

    Raises MetaUndefined if any site has a single treatment arm: local
    overlap fails there and the local estimate does not exist.
    """
    if len(local_propensities) != fd.n_sites:
        raise ValueError("need one local propensity per site")
    for site in fd.sites:
        n_treated = int(site.w.sum())
        if n_treated == 0 or n_treated == site.n:
            raise MetaUndefined(
                f"site {site.site_id} has a single treatment arm "
                f"({n_treated}/{site.n} treated)"
            )
    props = fd.site_sizes / fd.n
    taus, variances, overlaps = [], [], []
    for k, site in enumerate(fd.sites):
        e_k = local_propensities[k]
        if form == "AIPW":
            if outcome_models is None:
                raise ValueError("AIPW requires outcome models")
            pair = (
                outcome_models[k]
                if isinstance(outcome_models, (list, tuple))
                and len(outcome_models) == fd.n_sites
                and isinstance(outcome_models[0], tuple)
                else outcome_models
            )
            t = aipw_terms(site.x, site.w, site.y, e_k, pair[0], pair[1],
                           site_id=site.site_id)
        else:
            t = ipw_terms(site.x, site.w, site.y, e_k, site_id=site.site_id)
        taus.append(float(t.mean()))
        variances.append(float(t.var()))
        overlaps.append(overlap_local(site, e_k))
    tau_hat = float(props @ np.array(taus))
    var = variance_meta_decomposition(variances, props, taus, fd.n)
    return EstimateReport(
        estimator="meta",
        form=form,
        tau_hat=tau_hat,
        var_plugin=var,
        overlap_global=None,
        overlap_sites=tuple(overlaps),
    )


def estimate_federated(
    fd: FederatedDataset,
    propensity: GlobalPropensity | PropensityFn,
    outcome_models: tuple[MeanFn, MeanFn] | None = None,
    form: str = "IPW",
    local_propensities: Sequence | None = None,
) -> EstimateReport:
    """Per-site means of scores under one shared global propensity,
    combined with n_k/n weights.

    With the same nuisances this is a pure regrouping of the centralized
    sum. ``local_propensities`` (or the global model's own local scores)
    feed the per-site overlap diagnostics.
    """
    nb = NuisanceBundle(
        propensity=propensity,
        treated_mean=outcome_models[0] if outcome_models else None,
        control_mean=outcome_models[1] if outcome_models else None,
    )
    props = fd.site_sizes / fd.n
    site_means = []
    all_terms = []
    notes = []
    for site in fd.sites:
        t = _terms_for(site, nb, form)
        site_means.append(float(t.mean()))
        all_terms.append(t)
    tau_hat = float(props @ np.array(site_means))
    pooled_terms = np.concatenate(all_terms)
    scheme = propensity.scheme if isinstance(propensity, GlobalPropensity) else ""
    if local_propensities is None and isinstance(propensity, GlobalPropensity):
        local_propensities = [
            (lambda m: (lambda x: predict_local(m, x)))(m)
            if isinstance(m, LogisticParams)
            else m
            for m in propensity.local_models
        ]
        for k, m in enumerate(propensity.local_models):
            if isinstance(m, LogisticParams) and m.degenerate != "normal":
                notes.append(f"site {fd.sites[k].site_id} local model {m.degenerate}")
    x_all = np.vstack([s.x for s in fd.sites])
    e_all = _as_scores(propensity, x_all)
    return EstimateReport(
        estimator="federated",
        form=form,
        scheme=scheme,
        tau_hat=tau_hat,
        var_plugin=float(pooled_terms.var() / fd.n),
        overlap_global=float(overlap_values(e_all).mean()),
        overlap_sites=_site_overlaps(fd, local_propensities, propensity),
        notes=tuple(notes),
    )


def federated_tau(
    fd: FederatedDataset,
    propensity: GlobalPropensity | PropensityFn,
    outcome_models: tuple[MeanFn, MeanFn] | None = None,
    form: str = "IPW",
) -> float:
    """Point estimate only; the lean path for bootstrap closures.

    Scores every pooled row once, then combines the per-site means with
    sample-size weights (the same regrouped sum as the full report path).
    """
    x, w, y, _ = fd.pooled()
    if form == "AIPW":
        if outcome_models is None:
            raise ValueError("AIPW requires both outcome models")
        t = aipw_terms(x, w, y, propensity, outcome_models[0], outcome_models[1])
    else:
        t = ipw_terms(x, w, y, propensity)
    sizes = fd.site_sizes
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    site_means = np.add.reduceat(t, starts) / sizes
    return float((sizes / fd.n) @ site_means)


def bootstrap_ci(
    fd: FederatedDataset,
    estimator: Callable[[FederatedDataset], float],
    n_resamples: int,
    level: float,
    rng: RngHandle,
    max_failure_share: float = 0.2,
) -> BootstrapInterval:
    """Stratified nonparametric bootstrap percentile interval.

    Each resample redraws n_k rows with replacement within every site,
    preserving the federation structure. Resamples on which the estimator
    raises a package error are excluded and counted; more than
    ``max_failure_share`` failures aborts with TooManyFailedResamples.
    """
    if n_resamples < 2:
        raise ValueError("need at least two resamples")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    stats = []
    n_failed = 0
    for b in range(n_resamples):
        gen = rng.stream(b)
        sites = tuple(
            site.subset(gen.integers(0, site.n, size=site.n)) for site in fd.sites
        )
        try:
            stats.append(float(estimator(FederatedDataset(sites=sites))))
        except FedCausalError:
            n_failed += 1
    if n_failed > max_failure_share * n_resamples:
        raise TooManyFailedResamples(
            f"{n_failed}/{n_resamples} bootstrap resamples failed"
        )
    alpha = 1.0 - level
    lo, hi = np.quantile(np.asarray(stats), [alpha / 2.0, 1.0 - alpha / 2.0])
    return BootstrapInterval(lo=float(lo), hi=float(hi), level=level, n_failed=n_failed)
