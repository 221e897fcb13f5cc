"""In-process simulation of the server/client federation.

Sites are wrapped in workers that expose only aggregate payloads (model
parameters, gradients' effects, moments, scalar losses); the server never
touches another site's rows. Every float crossing the site boundary is
counted in a communication ledger.

The same message-passing structure would back a networked deployment; at
desk scale everything runs in one process and is fully deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import FederatedDataset, RngHandle, SiteDataset
from .errors import (
    ConfigError,
    DivergenceDetected,
    EmptyGlobalArm,
    InsufficientData,
)
from .nuisance import (
    GaussianMoments,
    MembershipParams,
    OutcomeParams,
    fit_gaussian_moments,
)
from .dgp import sigmoid, softmax_rows

__all__ = [
    "FedAvgConfig",
    "CommunicationLedger",
    "StandardizationResult",
    "fedavg_multinomial",
    "fedavg_outcome_models",
    "federated_standardize",
    "one_shot_moment_exchange",
    "communication_cost",
]

DIVERGENCE_PATIENCE = 10


@dataclass(frozen=True)
class FedAvgConfig:
    """Hyperparameters of federated averaging.

    ``batch_size=None`` means full-batch local steps (the deterministic
    default). ``learning_rate`` may be the string "auto", which derives a
    Lipschitz-safe step from one extra curvature scalar per site.
    """

    rounds: int = 100
    local_steps: int = 1
    learning_rate: float | str = 0.1
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1")
        if isinstance(self.learning_rate, str):
            if self.learning_rate != "auto":
                raise ConfigError(f"unknown learning rate {self.learning_rate!r}")
        elif self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class CommunicationLedger:
    """Float-count accounting of everything crossing the site boundary.

    ``entries`` holds one row per (round, site) exchange. ``breakdown``
    separates model-parameter floats from scalar diagnostics (per-round
    local losses, curvature scalars), because the headline cost formulas
    count parameters only. Integer row counts are treated as metadata, not
    floats.
    """

    scheme: str = ""
    entries: list[tuple[int, int, int, int]] = field(default_factory=list)
    breakdown: dict[str, int] = field(default_factory=dict)

    def record(
        self, round_idx: int, site_idx: int, upload: int, broadcast: int
    ) -> None:
        self.entries.append((round_idx, site_idx, upload, broadcast))

    def add(self, kind: str, count: int) -> None:
        self.breakdown[kind] = self.breakdown.get(kind, 0) + count

    @property
    def total_uploaded(self) -> int:
        return sum(e[2] for e in self.entries)

    @property
    def total_broadcast(self) -> int:
        return sum(e[3] for e in self.entries)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["round", "site", "upload_floats", "broadcast_floats"])
            writer.writerows(self.entries)

    def merged_with(self, other: "CommunicationLedger") -> "CommunicationLedger":
        merged = CommunicationLedger(scheme=self.scheme or other.scheme)
        merged.entries = list(self.entries) + list(other.entries)
        for src in (self.breakdown, other.breakdown):
            for k, v in src.items():
                merged.add(k, v)
        return merged


def communication_cost(scheme: str, rounds: int, n_sites: int, dim: int) -> int:
    """Headline float-count formulas for the two weight schemes.

    MW costs rounds * sites * dim (the advertised figure; the measured
    ledger of the multinomial model is larger because each upload carries a
    dim-by-K matrix, and both numbers are reported). DW is one shot:
    sites * dim means plus sites * dim^2 covariances.
    """
    if scheme == "MW":
        return rounds * n_sites * dim
    if scheme == "DW":
        return n_sites * dim + n_sites * dim * dim
    raise ConfigError(f"unknown scheme {scheme!r}")


def _aggregate_weighted(
    payloads: Sequence[tuple[int, np.ndarray]], weights: np.ndarray
) -> np.ndarray:
    """Weighted average of site payloads, summed in site order.

    Sorting by site index first makes the result independent of arrival
    (execution) order; numpy's pairwise summation keeps it stable.
    """
    ordered = sorted(payloads, key=lambda p: p[0])
    stacked = np.stack([arr for _, arr in ordered])
    w = np.asarray([weights[i] for i, _ in ordered], dtype=np.float64)
    return np.tensordot(w, stacked, axes=1)


class _SiteWorker:
    """Owns one site's rows privately and answers with aggregates only."""

    def __init__(self, index: int, data: SiteDataset, rng: np.random.Generator):
        self.index = index
        self._data = data
        self._rng = rng

    @property
    def n(self) -> int:
        return self._data.n

    def arm_size(self, arm: int) -> int:
        return int((self._data.w == arm).sum())

    def _batch_idx(self, n: int, batch_size: int | None) -> np.ndarray | slice:
        if batch_size is None or batch_size >= n:
            return slice(None)
        return self._rng.choice(n, size=batch_size, replace=False)

    # -- membership model ------------------------------------------------

    def membership_local_update(
        self, theta: np.ndarray, cfg: FedAvgConfig
    ) -> tuple[np.ndarray, float]:
        """Run E local gradient steps on the multinomial objective.

        The site's rows all carry its own label, so the one-hot target is
        the constant unit vector of this site's column. Returns the updated
        parameter matrix and the local loss at the received parameters.
        """
        x = self._data.x
        k = self.index
        n_sites = theta.shape[1]
        onehot = np.zeros(n_sites)
        onehot[k] = 1.0
        loss_in = self._membership_loss(theta)
        for _ in range(cfg.local_steps):
            xb = x[self._batch_idx(len(x), cfg.batch_size)]
            probs = softmax_rows(xb @ theta)
            grad = xb.T @ (probs - onehot) / len(xb)
            theta = theta - cfg.learning_rate * grad
        return theta, loss_in

    def _membership_loss(self, theta: np.ndarray) -> float:
        probs = softmax_rows(self._data.x @ theta)
        p_own = np.clip(probs[:, self.index], 1e-300, None)
        return float(-np.log(p_own).mean())

    # -- outcome models ----------------------------------------------------

    def _arm_design(self, arm: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self._data.w == arm
        z = np.column_stack([np.ones(int(mask.sum())), self._data.x[mask]])
        return z, self._data.y[mask]

    def outcome_curvature(self, arm: int) -> float:
        """Largest eigenvalue of the arm's 1/m Z'Z: a Lipschitz bound used
        by the "auto" learning rate. One scalar crosses the boundary."""
        z, _ = self._arm_design(arm)
        return float(np.linalg.eigvalsh(z.T @ z / len(z)).max())

    def outcome_local_update(
        self, beta: np.ndarray, arm: int, kind: str, cfg: FedAvgConfig, lr: float
    ) -> tuple[np.ndarray, float]:
        z, y = self._arm_design(arm)
        loss_in = self._outcome_loss(beta, z, y, kind)
        for _ in range(cfg.local_steps):
            idx = self._batch_idx(len(z), cfg.batch_size)
            zb, yb = z[idx], y[idx]
            if kind == "linear":
                grad = zb.T @ (zb @ beta - yb) / len(zb)
            else:
                grad = zb.T @ (sigmoid(zb @ beta) - yb) / len(zb)
            beta = beta - lr * grad
        return beta, loss_in

    @staticmethod
    def _outcome_loss(beta, z, y, kind) -> float:
        eta = z @ beta
        if kind == "linear":
            return float(0.5 * ((eta - y) ** 2).mean())
        return float((np.logaddexp(0.0, eta) - y * eta).mean())

    # -- moments and standardization --------------------------------------

    def moment_payload(self, ridge: float | None) -> GaussianMoments:
        return fit_gaussian_moments(self._data, ridge)

    def mean_var_payload(self) -> tuple[np.ndarray, np.ndarray, int]:
        x = self._data.x
        mean = x.mean(axis=0)
        var = ((x - mean) ** 2).mean(axis=0)
        return mean, var, self._data.n

    def standardized(self, center: np.ndarray, scale: np.ndarray) -> SiteDataset:
        return SiteDataset(
            site_id=self._data.site_id,
            x=(self._data.x - center) / scale,
            w=self._data.w,
            y=self._data.y,
        )


def _make_workers(fd: FederatedDataset, seed: int, tag: int) -> list[_SiteWorker]:
    handle = RngHandle(seed, tag)
    return [
        _SiteWorker(k, site, handle.stream(k)) for k, site in enumerate(fd.sites)
    ]


def _check_divergence(losses: list[float], streak: int) -> int:
    """Count consecutive loss increases; raise after the patience runs out."""
    if len(losses) >= 2 and losses[-1] > losses[-2] + 1e-12 * (1 + abs(losses[-2])):
        streak += 1
    else:
        streak = 0
    if streak >= DIVERGENCE_PATIENCE:
        raise DivergenceDetected(
            f"pooled loss increased for {streak} consecutive rounds "
            f"(last {losses[-1]:.6g})"
        )
    return streak


def fedavg_multinomial(
    fd: FederatedDataset, cfg: FedAvgConfig
) -> tuple[MembershipParams, CommunicationLedger]:
    """Train the site-membership model by federated averaging.

    Every round the server broadcasts the parameter matrix, each site runs
    E local minibatch steps of multinomial gradient descent (its labels are
    constant: its own index), and the server averages the returned matrices
    with n_k/n weights. Parameters start at zero, the uniform-membership
    point. With one local step and full batches a round is algebraically one
    centralized full-gradient step on the pooled data.
    """
    if fd.n_sites < 2:
        raise ConfigError("membership is degenerate with a single site")
    if isinstance(cfg.learning_rate, str):
        raise ConfigError("the membership model requires an explicit learning rate")
    workers = _make_workers(fd, cfg.seed, 0)
    n_sites = fd.n_sites
    d = fd.d
    weights = fd.site_sizes / fd.n
    theta = np.zeros((d, n_sites))
    ledger = CommunicationLedger(scheme="MW")
    param_floats = d * n_sites
    losses: list[float] = []
    streak = 0
    for t in range(1, cfg.rounds + 1):
        payloads = []
        round_losses = np.empty(n_sites)
        for wkr in workers:
            updated, loss_in = wkr.membership_local_update(theta, cfg)
            payloads.append((wkr.index, updated))
            round_losses[wkr.index] = loss_in
            ledger.record(t, wkr.index + 1, param_floats + 1, param_floats)
        ledger.add("parameters", param_floats * n_sites)
        ledger.add("diagnostics", n_sites)
        theta = _aggregate_weighted(payloads, weights)
        losses.append(float(weights @ round_losses))
        streak = _check_divergence(losses, streak)
    return MembershipParams(coefs=theta), ledger


def fedavg_outcome_models(
    fd: FederatedDataset,
    cfg: FedAvgConfig,
    model_kind: str = "linear",
) -> tuple[OutcomeParams, OutcomeParams, CommunicationLedger]:
    """Fit the two arm-specific outcome models by federated averaging.

    The treated model trains on each site's treated rows, the control model
    on control rows. A site with an empty arm skips that arm's rounds and
    the aggregation weights renormalize over contributing sites, so the
    average stays an unbiased weighted combination of the data that exists.
    Treated rounds are ledgered first, control rounds after.
    """
    if model_kind not in ("linear", "logistic"):
        raise ConfigError(f"unknown outcome model kind {model_kind!r}")
    workers = _make_workers(fd, cfg.seed, 1)
    ledger = CommunicationLedger(scheme=f"outcome_{model_kind}")
    results = {}
    for arm, round_offset in ((1, 0), (0, cfg.rounds)):
        sizes = {w.index: w.arm_size(arm) for w in workers}
        contributing = [w for w in workers if sizes[w.index] > 0]
        total = sum(sizes.values())
        if total == 0:
            raise EmptyGlobalArm(f"no site has any rows with treatment {arm}")
        arm_weights = {w.index: sizes[w.index] / total for w in contributing}
        if cfg.learning_rate == "auto":
            curv = sum(
                arm_weights[w.index] * w.outcome_curvature(arm) for w in contributing
            )
            lr = 1.0 / curv
            ledger.add("diagnostics", len(contributing))
        else:
            lr = float(cfg.learning_rate)
        d1 = fd.d + 1
        beta = np.zeros(d1)
        losses: list[float] = []
        streak = 0
        for t in range(1, cfg.rounds + 1):
            payloads = []
            loss_acc = 0.0
            for wkr in contributing:
                updated, loss_in = wkr.outcome_local_update(
                    beta, arm, model_kind, cfg, lr
                )
                payloads.append((wkr.index, updated))
                loss_acc += arm_weights[wkr.index] * loss_in
                ledger.record(round_offset + t, wkr.index + 1, d1 + 1, d1)
            ledger.add("parameters", d1 * len(contributing))
            ledger.add("diagnostics", len(contributing))
            beta = _aggregate_weighted(payloads, arm_weights)
            losses.append(loss_acc)
            streak = _check_divergence(losses, streak)
        results[arm] = OutcomeParams(
            coefficients=beta[1:], intercept=float(beta[0]), kind=model_kind
        )
    return results[1], results[0], ledger


@dataclass(frozen=True)
class StandardizationResult:
    """Pooled moments, flags, the rescaled federation, and the ledger."""

    mean: np.ndarray
    variance: np.ndarray
    zero_variance_coords: tuple[int, ...]
    dataset: FederatedDataset
    ledger: CommunicationLedger


def federated_standardize(fd: FederatedDataset) -> StandardizationResult:
    """Rescale covariates to zero mean and unit variance globally.

    Each site uploads its coordinate-wise mean and (1/n_k) variance; the
    pooled variance follows the within-plus-between decomposition, so it
    matches the centralized computation on concatenated data exactly.
    Zero-variance coordinates are centered but left unscaled and flagged.
    """
    if fd.n < 2:
        raise InsufficientData("need at least two rows to standardize")
    workers = _make_workers(fd, 0, 2)
    ledger = CommunicationLedger(scheme="standardize")
    props = fd.site_sizes / fd.n
    payloads = []
    for wkr in workers:
        mean_k, var_k, _ = wkr.mean_var_payload()
        payloads.append((wkr.index, mean_k, var_k))
        ledger.record(1, wkr.index + 1, 2 * fd.d, 2 * fd.d)
    ledger.add("parameters", 2 * fd.n_sites * fd.d)
    mean = _aggregate_weighted([(i, m) for i, m, _ in payloads], props)
    within = _aggregate_weighted([(i, v) for i, _, v in payloads], props)
    between = _aggregate_weighted(
        [(i, (m - mean) ** 2) for i, m, _ in payloads], props
    )
    variance = within + between
    zero = tuple(int(j) for j in np.flatnonzero(variance == 0.0))
    scale = np.sqrt(np.where(variance > 0.0, variance, 1.0))
    sites = tuple(wkr.standardized(mean, scale) for wkr in workers)
    return StandardizationResult(
        mean=mean,
        variance=variance,
        zero_variance_coords=zero,
        dataset=FederatedDataset(sites=sites),
        ledger=ledger,
    )


def one_shot_moment_exchange(
    fd: FederatedDataset, ridge: float | None = None
) -> tuple[tuple[GaussianMoments, ...], np.ndarray, CommunicationLedger]:
    """Collect per-site Gaussian moments in a single communication round.

    Each site uploads its mean vector and covariance matrix (d + d^2
    floats; the row count rides along as metadata). The returned moments
    are exactly the local fits, untouched by the server.
    """
    workers = _make_workers(fd, 0, 3)
    ledger = CommunicationLedger(scheme="DW")
    moments = []
    for wkr in workers:
        moments.append(wkr.moment_payload(ridge))
        ledger.record(1, wkr.index + 1, fd.d + fd.d * fd.d, 0)
    ledger.add("parameters", fd.n_sites * (fd.d + fd.d * fd.d))
    props = fd.site_sizes / fd.n
    return tuple(moments), props, ledger
