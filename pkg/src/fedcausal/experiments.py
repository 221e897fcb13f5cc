"""Scenario runner: Monte Carlo replications of all estimators, CSV and
plot-data emission.

Every replication generates a fresh federation from its own RNG stream,
fits (or looks up) the nuisances, evaluates the configured estimators, and
appends one raw CSV row per estimator. A scenario is fully determined by
(config, seed): rows are buffered per replication and written in order, so
reruns are byte-identical.
"""

from __future__ import annotations

import concurrent.futures
import csv
import logging
import math
import os
import xml.sax.saxutils
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import dgp as dgp_mod
from .data import FederatedDataset, RngHandle, SiteDataset, validate_federation
from .dgp import (
    DgpAParams,
    DgpBParams,
    OutcomeSpec,
    benchmark_outcome_spec,
    dgp_a_params,
    dgp_b_params,
    gen_dgp_a,
    gen_dgp_b,
    oracle_global_propensity_fn,
    oracle_local_propensities,
    true_ate,
)
from .errors import ConfigError, FedCausalError, MetaUndefined, PlotDataError
from .estimators import (
    EstimateReport,
    bootstrap_ci,
    estimate_centralized,
    estimate_federated,
    estimate_meta,
    federated_tau,
    NuisanceBundle,
    report_csv_header,
)
from .federation import (
    CommunicationLedger,
    FedAvgConfig,
    communication_cost,
    fedavg_multinomial,
    fedavg_outcome_models,
    one_shot_moment_exchange,
)
from .nuisance import GlobalPropensity, fit_logistic_local, predict_local

__all__ = [
    "ScenarioConfig",
    "RunSummary",
    "run_scenario",
    "run_matrix",
    "emit_plotdata",
    "load_scenario_config",
    "builtin_panel_configs",
    "ESTIMATOR_NAMES",
]

log = logging.getLogger("fedcausal")

ESTIMATOR_NAMES = (
    "Fed-IPW-MW",
    "Fed-IPW-DW",
    "Fed-AIPW-MW",
    "Fed-AIPW-DW",
    "Meta-SW-IPW",
    "Meta-SW-AIPW",
    "Centralized-Oracle-IPW",
    "Centralized-Oracle-AIPW",
)

PAPER_SCALE_REPLICATIONS = 1500
MAX_REDRAWS = 5
TRUE_ATE_STREAM = 1_000_003  # reserved stream id for the ground-truth oracle


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    ``propensity_mode`` and ``outcome_mode`` select oracle or estimated
    nuisances independently, so mixed runs (true propensity, fitted but
    misspecified linear outcome models) are expressible.
    """

    name: str = "scenario"
    dgp: str = "A"
    overlap_regime: str = "good"
    site_size: int = dgp_mod.DGP_A_SITE_SIZE  # per site, design A
    n_total: int = dgp_mod.DGP_B_TOTAL_SIZE  # total, design B
    noise_sd: float = 1.0
    estimators: tuple[str, ...] = ESTIMATOR_NAMES
    propensity_mode: str = "oracle"
    outcome_mode: str = "oracle"
    fedavg: FedAvgConfig = field(default_factory=FedAvgConfig)
    outcome_fedavg: FedAvgConfig = field(
        default_factory=lambda: FedAvgConfig(rounds=600, learning_rate="auto")
    )
    bootstrap_resamples: int = 0
    bootstrap_level: float = 0.95
    replications: int = 300
    seed: int = 20250801
    true_ate_draws: int = 1_000_000
    out_dir: str = "out"

    def validate(self) -> None:
        if self.dgp not in ("A", "B"):
            raise ConfigError(f"unknown dgp {self.dgp!r}")
        if self.overlap_regime not in dgp_mod.OVERLAP_REGIMES:
            raise ConfigError(f"unknown overlap regime {self.overlap_regime!r}")
        if not self.estimators:
            raise ConfigError("estimator list is empty")
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise ConfigError(f"unknown estimator {name!r}")
        if self.propensity_mode not in ("oracle", "estimated"):
            raise ConfigError(f"unknown propensity mode {self.propensity_mode!r}")
        if self.outcome_mode not in ("oracle", "estimated"):
            raise ConfigError(f"unknown outcome mode {self.outcome_mode!r}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")

    def params(self) -> DgpAParams | DgpBParams:
        if self.dgp == "A":
            return dgp_a_params(self.overlap_regime, self.site_size)
        return dgp_b_params(self.overlap_regime, self.n_total)

    def outcome_spec(self) -> OutcomeSpec:
        return benchmark_outcome_spec(self.noise_sd)


def _parse_estimator(name: str) -> tuple[str, str, str]:
    """Split an estimator name into (family, form, scheme)."""
    if name.startswith("Fed-"):
        _, form, scheme = name.split("-")
        return "fed", form, scheme
    if name.startswith("Meta-SW-"):
        return "meta", name.split("-")[-1], ""
    if name.startswith("Centralized-Oracle-"):
        return "centralized", name.split("-")[-1], ""
    raise ConfigError(f"unknown estimator {name!r}")


@dataclass(frozen=True)
class _Nuisances:
    """Everything one replication's estimators consume.

    The pooled_* fields back the centralized comparator: in estimated mode
    they come from fits on the concatenated data (the one estimator allowed
    to ignore the federation boundary), in oracle mode they alias the truth.
    """

    local_scores: list  # per-site propensity callables
    global_mw: Callable | None
    global_dw: Callable | None
    treated_mean: Callable | None
    control_mean: Callable | None
    pooled_propensity: Callable | None
    pooled_treated_mean: Callable | None
    pooled_control_mean: Callable | None
    ledgers: dict


def _pooled_linear_fit(x: np.ndarray, y: np.ndarray) -> Callable:
    z = np.column_stack([np.ones(len(x)), x])
    beta, *_ = np.linalg.lstsq(z, y, rcond=None)

    def predict(q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(q)
        return q @ beta[1:] + beta[0]

    return predict


def _fit_nuisances(
    cfg: ScenarioConfig, fd: FederatedDataset, params, spec: OutcomeSpec, rep: int
) -> _Nuisances:
    ledgers: dict[str, CommunicationLedger] = {}
    needs_mw = any("MW" in n for n in cfg.estimators)
    needs_dw = any("DW" in n for n in cfg.estimators)
    needs_centralized = any(n.startswith("Centralized") for n in cfg.estimators)
    pooled_propensity = None
    if cfg.propensity_mode == "oracle":
        local_scores = oracle_local_propensities(params)
        shared = oracle_global_propensity_fn(params)
        global_mw = shared if needs_mw else None
        global_dw = shared if needs_dw else None
        pooled_propensity = shared
    else:
        locals_fit = [fit_logistic_local(site) for site in fd.sites]
        local_scores = [
            (lambda m: (lambda x: predict_local(m, x)))(m) for m in locals_fit
        ]
        global_mw = global_dw = None
        if needs_mw:
            fa = replace(cfg.fedavg, seed=cfg.fedavg.seed + rep)
            membership, ledgers["MW"] = fedavg_multinomial(fd, fa)
            global_mw = GlobalPropensity(
                scheme="MW", local_models=tuple(locals_fit), membership=membership
            )
        if needs_dw:
            moments, props, ledgers["DW"] = one_shot_moment_exchange(fd)
            global_dw = GlobalPropensity(
                scheme="DW",
                local_models=tuple(locals_fit),
                moments=moments,
                proportions=props,
            )
        if needs_centralized:
            x, w, y, _ = fd.pooled()
            merged = SiteDataset(site_id=0, x=x, w=w, y=y)
            pooled_model = fit_logistic_local(merged)
            pooled_propensity = lambda q: predict_local(pooled_model, q)
    if cfg.outcome_mode == "oracle":
        treated_mean, control_mean = spec.treated_mean, spec.control_mean
        pooled_treated, pooled_control = treated_mean, control_mean
    else:
        fa = replace(cfg.outcome_fedavg, seed=cfg.outcome_fedavg.seed + rep)
        treated_m, control_m, ledgers["outcome"] = fedavg_outcome_models(
            fd, fa, model_kind="linear"
        )
        treated_mean, control_mean = treated_m.predict, control_m.predict
        pooled_treated, pooled_control = treated_mean, control_mean
        if needs_centralized:
            x, w, y, _ = fd.pooled()
            pooled_treated = _pooled_linear_fit(x[w == 1.0], y[w == 1.0])
            pooled_control = _pooled_linear_fit(x[w == 0.0], y[w == 0.0])
    return _Nuisances(
        local_scores=local_scores,
        global_mw=global_mw,
        global_dw=global_dw,
        treated_mean=treated_mean,
        control_mean=control_mean,
        pooled_propensity=pooled_propensity,
        pooled_treated_mean=pooled_treated,
        pooled_control_mean=pooled_control,
        ledgers=ledgers,
    )


def _evaluate_estimator(
    name: str,
    fd: FederatedDataset,
    nuis: _Nuisances,
    cfg: ScenarioConfig,
    rep: int,
) -> EstimateReport:
    family, form, scheme = _parse_estimator(name)
    outcome = (
        (nuis.treated_mean, nuis.control_mean) if form == "AIPW" else None
    )
    if family == "fed":
        prop = nuis.global_mw if scheme == "MW" else nuis.global_dw
        report = estimate_federated(
            fd, prop, outcome, form, local_propensities=nuis.local_scores
        )
        comm = _communication_summary(cfg, fd, scheme, nuis)
        report = replace(report, estimator=name, scheme=scheme, communication=comm)
    elif family == "meta":
        report = estimate_meta(fd, nuis.local_scores, outcome, form)
        report = replace(report, estimator=name)
    else:
        pooled_outcome = (
            (nuis.pooled_treated_mean, nuis.pooled_control_mean)
            if form == "AIPW"
            else (None, None)
        )
        nb = NuisanceBundle(
            propensity=nuis.pooled_propensity,
            treated_mean=pooled_outcome[0],
            control_mean=pooled_outcome[1],
        )
        report = estimate_centralized(fd, nb, form)
        report = replace(report, estimator=name)
    if cfg.bootstrap_resamples > 0:
        closure = _bootstrap_closure(name, nuis)
        interval = bootstrap_ci(
            fd,
            closure,
            cfg.bootstrap_resamples,
            cfg.bootstrap_level,
            RngHandle(cfg.seed, rep + 500_000),
        )
        report = report.with_bootstrap(interval)
    return report


def _bootstrap_closure(name: str, nuis: _Nuisances):
    family, form, scheme = _parse_estimator(name)
    if family == "meta":
        outcome = (nuis.treated_mean, nuis.control_mean) if form == "AIPW" else None
        locals_ = nuis.local_scores

        def run_meta(fd_b: FederatedDataset) -> float:
            return estimate_meta(fd_b, locals_, outcome, form).tau_hat

        return run_meta
    if family == "fed":
        prop = nuis.global_mw if scheme == "MW" else nuis.global_dw
        outcome = (nuis.treated_mean, nuis.control_mean) if form == "AIPW" else None
    else:
        prop = nuis.pooled_propensity
        outcome = (
            (nuis.pooled_treated_mean, nuis.pooled_control_mean)
            if form == "AIPW"
            else None
        )

    def run_fed(fd_b: FederatedDataset) -> float:
        return federated_tau(fd_b, prop, outcome, form)

    return run_fed


def _communication_summary(cfg, fd, scheme, nuis) -> dict:
    """Formula cost next to the measured ledger totals for the scheme."""
    if scheme == "MW":
        rounds = cfg.fedavg.rounds if cfg.propensity_mode == "estimated" else 0
        formula = communication_cost("MW", rounds, fd.n_sites, fd.d)
    else:
        formula = communication_cost("DW", 0, fd.n_sites, fd.d)
        if cfg.propensity_mode == "oracle":
            formula = 0
    ledger = nuis.ledgers.get(scheme)
    return {
        "scheme": scheme,
        "formula_floats": formula,
        "measured_upload_floats": ledger.total_uploaded if ledger else 0,
        "measured_parameter_floats": ledger.breakdown.get("parameters", 0)
        if ledger
        else 0,
    }


@dataclass
class RunSummary:
    """Aggregates of one scenario's raw per-replication results."""

    name: str
    dgp: str
    overlap_regime: str
    true_ate: float
    true_ate_se: float
    replications: int
    estimator_stats: dict[str, dict]
    redraws: int = 0
    aborted: int = 0
    raw_csv: str = ""
    summary_csv: str = ""
    scores_csv: str = ""

    def stat(self, estimator: str, key: str):
        return self.estimator_stats[estimator][key]


def _generate(cfg: ScenarioConfig, params, spec, rep: int) -> tuple[FederatedDataset, int]:
    """Draw one replication; redraw on structural failure (empty site or a
    regime that by chance produced a single-arm site where both arms are
    expected), logging each occurrence."""
    for attempt in range(MAX_REDRAWS):
        handle = RngHandle(cfg.seed, rep * MAX_REDRAWS + attempt)
        fd = (
            gen_dgp_a(params, spec, handle)
            if cfg.dgp == "A"
            else gen_dgp_b(params, spec, handle)
        )
        try:
            validate_federation(fd)
        except FedCausalError as exc:
            log.warning("replication %d redraw %d: %s", rep, attempt, exc)
            continue
        if cfg.overlap_regime != "none":
            treated_ok = all(site.w.sum() > 0 for site in fd.sites)
            control_ok = all(site.w.sum() < site.n for site in fd.sites)
            if not (treated_ok and control_ok):
                log.warning(
                    "replication %d redraw %d: single-arm site under regime %s",
                    rep,
                    attempt,
                    cfg.overlap_regime,
                )
                continue
        return fd, attempt
    raise FedCausalError(
        f"replication {rep}: {MAX_REDRAWS} consecutive draws failed validation"
    )


def _limit_worker_blas_threads() -> None:
    """Pin BLAS to one thread inside pool workers.

    Replications are already process-parallel; letting each worker's BLAS
    spawn its own threads oversubscribes the cores and is slower for the
    small matrices involved.
    """
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=1)
    except ImportError:
        pass


def _run_replication(cfg: ScenarioConfig, rep: int) -> tuple[list[list[str]], int, dict]:
    """One replication -> raw CSV rows (one per estimator), redraw count,
    and score samples (first replication only).

    A replication whose data generation or nuisance fitting fails outright
    is aborted: it contributes no rows, only a logged reason (the row count
    invariant is M * |estimators| minus aborted replications).
    """
    params = cfg.params()
    spec = cfg.outcome_spec()
    try:
        fd, redraws = _generate(cfg, params, spec, rep)
        nuis = _fit_nuisances(cfg, fd, params, spec, rep)
    except FedCausalError as exc:
        log.error("replication %d aborted: %s", rep, exc)
        return [], -1, {}
    rows = []
    scores = {}
    for name in cfg.estimators:
        try:
            report = _evaluate_estimator(name, fd, nuis, cfg, rep)
            status = "ok"
        except MetaUndefined as exc:
            report = None
            status = "meta_undefined"
            log.debug("replication %d %s: %s", rep, name, exc)
        except FedCausalError as exc:
            report = None
            status = f"error:{type(exc).__name__}"
            log.warning("replication %d %s failed: %s", rep, name, exc)
        rows.append(_raw_row(rep, name, status, report, fd.n_sites))
    if rep == 0:
        scores = _score_samples(fd, nuis)
    return rows, redraws, scores


def _score_samples(fd: FederatedDataset, nuis: _Nuisances) -> dict:
    """Local score of site 2 on its own rows and the shared global score on
    all rows, for the overlap histograms."""
    shared = nuis.global_mw if nuis.global_mw is not None else nuis.global_dw
    if shared is None or fd.n_sites < 2:
        return {}
    site2 = fd.sites[1]
    try:
        local = np.asarray(nuis.local_scores[1](site2.x)).ravel()
        x_all = np.vstack([s.x for s in fd.sites])
        globl = np.asarray(shared(x_all)).ravel()
    except FedCausalError:
        return {}
    return {"local_site2": local, "global": globl}


def _raw_row(rep, name, status, report, n_sites) -> list[str]:
    _, form, scheme = _parse_estimator(name)
    if report is None:
        return (
            [str(rep), name, form, scheme, status]
            + [""] * (5 + n_sites)
            + ["0", "", ""]
        )
    comm = report.communication or {}
    return (
        [str(rep), name, form, scheme, status]
        + report.csv_row()[3:]
        + [
            str(comm.get("measured_upload_floats", "")),
            str(comm.get("formula_floats", "")),
        ]
    )


def _raw_header(n_sites: int) -> list[str]:
    return (
        ["replication", "estimator", "form", "scheme", "status"]
        + report_csv_header(n_sites)[3:]
        + ["comm_upload_floats", "comm_formula_floats"]
    )


def run_scenario(cfg: ScenarioConfig, jobs: int = 1) -> RunSummary:
    """Run every replication, write raw and summary CSVs, return aggregates.

    MetaUndefined outcomes are recorded as rows with that status, never
    dropped. With ``jobs > 1`` replications run in a process pool; rows are
    still written in replication order so output bytes do not depend on
    scheduling.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.params()
    spec = cfg.outcome_spec()
    oracle = true_ate(
        spec,
        params.sample_marginal_covariates,
        cfg.true_ate_draws,
        RngHandle(cfg.seed, TRUE_ATE_STREAM),
    )
    results: list[tuple[list[list[str]], int, dict]] = []
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=jobs, initializer=_limit_worker_blas_threads
        ) as pool:
            results = list(
                pool.map(_run_replication, [cfg] * cfg.replications,
                         range(cfg.replications), chunksize=1)
            )
    else:
        results = [_run_replication(cfg, rep) for rep in range(cfg.replications)]

    raw_path = out / f"{cfg.name}_raw.csv"
    n_sites = params.n_sites
    with open(raw_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_raw_header(n_sites))
        for rows, _, _ in results:
            writer.writerows(rows)
    scores_path = ""
    for _, _, scores in results:
        if scores:
            scores_path = str(out / f"{cfg.name}_scores.csv")
            with open(scores_path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["kind", "score"])
                for kind in ("local_site2", "global"):
                    for v in scores[kind]:
                        writer.writerow([kind, f"{v:.17g}"])
            break

    summary = _summarize(cfg, oracle, raw_path, n_sites)
    summary.redraws = sum(r for _, r, _ in results if r > 0)
    summary.aborted = sum(1 for _, r, _ in results if r < 0)
    summary.raw_csv = str(raw_path)
    summary.scores_csv = scores_path
    summary_path = out / f"{cfg.name}_summary.csv"
    _write_summary(summary, summary_path)
    summary.summary_csv = str(summary_path)
    return summary


def _summarize(cfg, oracle, raw_path, n_sites) -> RunSummary:
    per_est: dict[str, dict] = {}
    with open(raw_path, newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    for name in cfg.estimators:
        sub = [r for r in rows if r["estimator"] == name]
        taus = np.array([float(r["tau_hat"]) for r in sub if r["status"] == "ok"])
        o_globals = np.array(
            [
                float(r["o_global"])
                for r in sub
                if r["status"] == "ok" and r["o_global"] != ""
            ]
        )
        covers = None
        if cfg.bootstrap_resamples > 0:
            oks = [r for r in sub if r["status"] == "ok" and r["ci_lo"] != ""]
            if oks:
                covers = float(
                    np.mean(
                        [
                            float(r["ci_lo"]) <= oracle.value <= float(r["ci_hi"])
                            for r in oks
                        ]
                    )
                )
        comm = [
            int(r["comm_formula_floats"])
            for r in sub
            if r["status"] == "ok" and r["comm_formula_floats"] not in ("", "0")
        ]
        per_est[name] = {
            "n_ok": len(taus),
            "n_meta_undefined": sum(r["status"] == "meta_undefined" for r in sub),
            "n_error": sum(r["status"].startswith("error") for r in sub),
            "mean_tau": float(taus.mean()) if len(taus) else float("nan"),
            "bias": float(taus.mean() - oracle.value) if len(taus) else float("nan"),
            "mc_variance": float(taus.var(ddof=1)) if len(taus) > 1 else float("nan"),
            "mc_se_of_mean": float(taus.std(ddof=1) / np.sqrt(len(taus)))
            if len(taus) > 1
            else float("nan"),
            "mean_o_global": float(o_globals.mean()) if len(o_globals) else float("nan"),
            "coverage": covers,
            "mean_comm_formula_floats": float(np.mean(comm)) if comm else 0.0,
        }
    return RunSummary(
        name=cfg.name,
        dgp=cfg.dgp,
        overlap_regime=cfg.overlap_regime,
        true_ate=oracle.value,
        true_ate_se=oracle.se,
        replications=cfg.replications,
        estimator_stats=per_est,
    )


_SUMMARY_COLS = (
    "n_ok",
    "n_meta_undefined",
    "n_error",
    "mean_tau",
    "bias",
    "mc_variance",
    "mc_se_of_mean",
    "mean_o_global",
    "coverage",
    "mean_comm_formula_floats",
)


def _write_summary(summary: RunSummary, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["scenario", "dgp", "overlap_regime", "true_ate", "true_ate_se",
             "estimator", *_SUMMARY_COLS]
        )
        for name, stats in summary.estimator_stats.items():
            row = [
                summary.name,
                summary.dgp,
                summary.overlap_regime,
                f"{summary.true_ate:.17g}",
                f"{summary.true_ate_se:.17g}",
                name,
            ]
            for col in _SUMMARY_COLS:
                v = stats[col]
                if v is None:
                    row.append("")
                elif isinstance(v, float):
                    row.append("" if math.isnan(v) else f"{v:.17g}")
                else:
                    row.append(str(v))
            writer.writerow(row)


def run_matrix(configs: Sequence[ScenarioConfig], jobs: int = 1) -> list[RunSummary]:
    """Run several scenarios and concatenate their summaries.

    Duplicate scenario names get distinct output paths. A combined summary
    CSV, keyed by (dgp, overlap_regime), lands in the first scenario's
    output directory.
    """
    if not configs:
        raise ConfigError("no scenarios given")
    seen: dict[str, int] = {}
    summaries = []
    for cfg in configs:
        count = seen.get(cfg.name, 0)
        seen[cfg.name] = count + 1
        if count:
            cfg = replace(cfg, name=f"{cfg.name}_{count + 1}")
        summaries.append(run_scenario(cfg, jobs=jobs))
    combined = Path(configs[0].out_dir) / "combined_summary.csv"
    with open(combined, "w", newline="") as out_f:
        writer = csv.writer(out_f)
        header_written = False
        for summary in summaries:
            with open(summary.summary_csv, newline="") as in_f:
                for i, row in enumerate(csv.reader(in_f)):
                    if i == 0 and header_written:
                        continue
                    header_written = True
                    writer.writerow(row)
    return summaries


def builtin_panel_configs(
    replications: int = 300,
    out_dir: str = "out",
    seed: int = 20250801,
    paper_scale: bool = False,
) -> list[ScenarioConfig]:
    """The six benchmark panels: designs A and B at the three overlap
    regimes, oracle nuisances."""
    if paper_scale:
        replications = PAPER_SCALE_REPLICATIONS
    configs = []
    for dgp in ("A", "B"):
        for regime in dgp_mod.OVERLAP_REGIMES:
            configs.append(
                ScenarioConfig(
                    name=f"dgp_{dgp.lower()}_{regime}",
                    dgp=dgp,
                    overlap_regime=regime,
                    replications=replications,
                    seed=seed,
                    out_dir=out_dir,
                )
            )
    return configs


# -- plot data -----------------------------------------------------------------


def emit_plotdata(summary: RunSummary, out_dir: str | None = None) -> dict[str, str]:
    """Emit per-panel plot files from a completed run.

    Writes (a) a long-format CSV of per-replication estimates for boxplots,
    (b) log-scale histogram CSVs of the site-2 local score and the global
    score, and (c) a self-contained SVG boxplot. Returns the written paths.
    """
    if not summary.raw_csv or not os.path.exists(summary.raw_csv):
        raise PlotDataError(f"missing raw CSV for scenario {summary.name}")
    out = Path(out_dir or Path(summary.raw_csv).parent)
    out.mkdir(parents=True, exist_ok=True)
    with open(summary.raw_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise PlotDataError(f"raw CSV for scenario {summary.name} is empty")
    paths = {}

    box_path = out / f"{summary.name}_boxplot.csv"
    with open(box_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["replication", "estimator", "tau_hat"])
        for r in rows:
            if r["status"] == "ok":
                writer.writerow([r["replication"], r["estimator"], r["tau_hat"]])
    paths["boxplot_csv"] = str(box_path)

    if summary.scores_csv and os.path.exists(summary.scores_csv):
        with open(summary.scores_csv, newline="") as f:
            score_rows = list(csv.DictReader(f))
        for kind in ("local_site2", "global"):
            vals = np.array(
                [float(r["score"]) for r in score_rows if r["kind"] == kind]
            )
            hist_path = out / f"{summary.name}_hist_{kind}.csv"
            _write_log_histogram(vals, hist_path)
            paths[f"hist_{kind}"] = str(hist_path)

    svg_path = out / f"{summary.name}_boxplot.svg"
    _write_boxplot_svg(summary, rows, svg_path)
    paths["boxplot_svg"] = str(svg_path)
    return paths


def _write_log_histogram(values: np.ndarray, path, n_bins: int = 60) -> None:
    """Histogram of scores on a log10 scale; zero scores are excluded and
    reported in the header row count."""
    positive = values[values > 0.0]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo_log10", "bin_hi_log10", "count", "n_zero_excluded"])
        n_zero = int((values <= 0.0).sum())
        if len(positive) == 0:
            return
        logs = np.log10(positive)
        edges = np.linspace(logs.min(), max(logs.max(), 0.0), n_bins + 1)
        counts, _ = np.histogram(logs, bins=edges)
        for i, c in enumerate(counts):
            writer.writerow(
                [f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}", int(c), n_zero if i == 0 else ""]
            )


def _write_boxplot_svg(summary: RunSummary, rows: list[dict], path) -> None:
    """Minimal standalone SVG boxplot of tau-hat per estimator."""
    by_est: dict[str, list[float]] = {}
    for r in rows:
        if r["status"] == "ok":
            by_est.setdefault(r["estimator"], []).append(float(r["tau_hat"]))
    names = [n for n in by_est if by_est[n]]
    width, height, pad = 120 * max(len(names), 1) + 100, 420, 60
    all_vals = np.concatenate([np.array(by_est[n]) for n in names]) if names else np.array([0.0])
    lo, hi = float(all_vals.min()), float(all_vals.max())
    lo, hi = lo - 0.05 * (hi - lo + 1e-9), hi + 0.05 * (hi - lo + 1e-9)

    def ypix(v: float) -> float:
        return height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">'
        f"{xml.sax.saxutils.escape(summary.name)}</text>",
        f'<line x1="{pad}" y1="{ypix(summary.true_ate):.1f}" x2="{width - 20}" '
        f'y2="{ypix(summary.true_ate):.1f}" stroke="red" stroke-dasharray="4"/>',
    ]
    for i, name in enumerate(names):
        vals = np.array(by_est[name])
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        iqr = q3 - q1
        wlo = vals[vals >= q1 - 1.5 * iqr].min()
        whi = vals[vals <= q3 + 1.5 * iqr].max()
        cx = pad + 60 + 120 * i
        parts += [
            f'<line x1="{cx}" y1="{ypix(wlo):.1f}" x2="{cx}" y2="{ypix(whi):.1f}" stroke="black"/>',
            f'<rect x="{cx - 30}" y="{ypix(q3):.1f}" width="60" '
            f'height="{abs(ypix(q1) - ypix(q3)):.1f}" fill="lightsteelblue" stroke="black"/>',
            f'<line x1="{cx - 30}" y1="{ypix(med):.1f}" x2="{cx + 30}" '
            f'y2="{ypix(med):.1f}" stroke="black" stroke-width="2"/>',
            f'<text x="{cx}" y="{height - 20}" text-anchor="middle" font-size="10">'
            f"{xml.sax.saxutils.escape(name)}</text>",
        ]
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))


# -- config files --------------------------------------------------------------


def load_scenario_config(path, overrides: dict | None = None) -> ScenarioConfig:
    """Build a ScenarioConfig from a YAML file whose keys mirror the
    benchmark parameter tables; table values present in the file are checked
    against the built-in constants so silent drift is impossible."""
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    _check_parameter_tables(doc)
    kwargs: dict = {}
    simple = {
        "name": str,
        "dgp": str,
        "overlap_regime": str,
        "noise_sd": float,
        "replications": int,
        "seed": int,
        "out_dir": str,
        "propensity_mode": str,
        "outcome_mode": str,
        "true_ate_draws": int,
    }
    for key, cast in simple.items():
        if key in doc:
            kwargs[key] = cast(doc[key])
    if "nuisance_mode" in doc:
        kwargs["propensity_mode"] = str(doc["nuisance_mode"])
        kwargs["outcome_mode"] = str(doc["nuisance_mode"])
    if "estimators" in doc:
        kwargs["estimators"] = tuple(doc["estimators"])
    if "dgp_a" in doc and "n_k" in doc["dgp_a"]:
        kwargs["site_size"] = int(doc["dgp_a"]["n_k"])
    if "dgp_b" in doc and "n" in doc["dgp_b"]:
        kwargs["n_total"] = int(doc["dgp_b"]["n"])
    if "fedavg" in doc:
        kwargs["fedavg"] = _fedavg_from_doc(doc["fedavg"])
    if "outcome_fedavg" in doc:
        kwargs["outcome_fedavg"] = _fedavg_from_doc(doc["outcome_fedavg"])
    if "bootstrap" in doc:
        kwargs["bootstrap_resamples"] = int(doc["bootstrap"].get("resamples", 0))
        kwargs["bootstrap_level"] = float(doc["bootstrap"].get("level", 0.95))
    if overrides:
        kwargs.update(overrides)
    try:
        cfg = ScenarioConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def _fedavg_from_doc(doc: dict) -> FedAvgConfig:
    lr = doc.get("learning_rate", 0.1)
    return FedAvgConfig(
        rounds=int(doc.get("rounds", 100)),
        local_steps=int(doc.get("local_steps", 1)),
        learning_rate=lr if lr == "auto" else float(lr),
        batch_size=None if doc.get("batch_size") in (None, "full") else int(doc["batch_size"]),
        seed=int(doc.get("seed", 0)),
    )


def _check_parameter_tables(doc: dict) -> None:
    """Any benchmark table entries present in the config must match the
    built-in constants exactly; mismatches are config errors, not silent
    substitutions."""

    def expect(actual, builtin, label):
        if not np.allclose(np.asarray(actual, dtype=float), builtin):
            raise ConfigError(f"config key {label} differs from the built-in table")

    tc = doc.get("treatment_coefs", {})
    mapping = {
        "site1": dgp_mod.TREATMENT_COEFS_SITE1,
        "site2_poor": dgp_mod.TREATMENT_COEFS_SITE2_POOR,
        "site2_good": dgp_mod.TREATMENT_COEFS_SITE2_GOOD,
        "site3": dgp_mod.TREATMENT_COEFS_SITE3,
    }
    for key, builtin in mapping.items():
        if key in tc:
            expect(tc[key], builtin, f"treatment_coefs.{key}")
    if "covariate_dim" in doc and int(doc["covariate_dim"]) != dgp_mod.COVARIATE_DIM:
        raise ConfigError("covariate_dim differs from the built-in tables")
    da = doc.get("dgp_a", {})
    if "site_means" in da:
        expect(da["site_means"], np.array(dgp_mod.DGP_A_MEANS), "dgp_a.site_means")
    if "site_covs" in da:
        for k, cov in enumerate(da["site_covs"]):
            expect(
                [cov["identity"], cov["ones"]],
                np.array(dgp_mod.DGP_A_COVS[k]),
                f"dgp_a.site_covs[{k}]",
            )
    db = doc.get("dgp_b", {})
    if "mixture_weights" in db:
        expect(db["mixture_weights"], np.array(dgp_mod.DGP_B_MIX_WEIGHTS),
               "dgp_b.mixture_weights")
    if "component_means" in db:
        expect(db["component_means"], np.array(dgp_mod.DGP_B_COMPONENT_MEANS),
               "dgp_b.component_means")
    if "component_covs" in db:
        for k, cov in enumerate(db["component_covs"]):
            expect(
                [cov["identity"], cov["ones"]],
                np.array(dgp_mod.DGP_B_COMPONENT_COVS[k]),
                f"dgp_b.component_covs[{k}]",
            )
    if "membership_coefs" in db:
        cols = [db["membership_coefs"][f"site{k + 1}"] for k in range(3)]
        expect(np.column_stack(cols), dgp_mod.MEMBERSHIP_COEFS, "dgp_b.membership_coefs")
