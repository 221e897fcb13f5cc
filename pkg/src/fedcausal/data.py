"""Shared data model: records, site datasets, federations, and RNG streams.

Datasets are immutable after construction (arrays are marked read-only), so
they can be shared freely across workers. Covariates are stored row-major;
column views are computed on demand.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DimensionMismatch, EmptySite, InvalidTreatment, ValidationError

__all__ = [
    "Record",
    "SiteDataset",
    "FederatedDataset",
    "RngHandle",
    "validate_federation",
    "site_proportions",
    "load_csv",
    "save_csv",
]


@dataclass(frozen=True)
class Record:
    """One individual: covariates, treatment indicator, outcome, site label."""

    x: np.ndarray
    w: int
    y: float
    h: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SiteDataset:
    """All rows belonging to one site, stored as column-aligned arrays.

    ``x`` has shape (n_k, d), ``w`` and ``y`` have shape (n_k,). ``site_id``
    is the 1-based site label used in CSV files and reports.
    """

    site_id: int
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _readonly(np.atleast_2d(self.x)))
        object.__setattr__(self, "w", _readonly(np.asarray(self.w).ravel()))
        object.__setattr__(self, "y", _readonly(np.asarray(self.y).ravel()))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def records(self) -> list[Record]:
        return [
            Record(x=self.x[i], w=int(self.w[i]), y=float(self.y[i]), h=self.site_id)
            for i in range(self.n)
        ]

    def subset(self, indices: np.ndarray) -> "SiteDataset":
        """Row subset (used by bootstrap resampling); keeps the site label."""
        idx = np.asarray(indices)
        return SiteDataset(self.site_id, self.x[idx], self.w[idx], self.y[idx])


@dataclass(frozen=True)
class FederatedDataset:
    """An ordered collection of site datasets sharing one covariate space."""

    sites: tuple[SiteDataset, ...]

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n(self) -> int:
        return sum(s.n for s in self.sites)

    @property
    def d(self) -> int:
        return self.sites[0].d if self.sites else 0

    @property
    def site_sizes(self) -> np.ndarray:
        return np.array([s.n for s in self.sites])

    def pooled(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Concatenated (x, w, y, site_index) over all sites, in site order.

        ``site_index`` is the 0-based position in ``sites``, not the label.
        """
        x = np.vstack([s.x for s in self.sites])
        w = np.concatenate([s.w for s in self.sites])
        y = np.concatenate([s.y for s in self.sites])
        g = np.repeat(np.arange(self.n_sites), [s.n for s in self.sites])
        return x, w, y, g

    def iter_records(self) -> Iterator[Record]:
        for s in self.sites:
            yield from s.records


def validate_federation(fd: FederatedDataset) -> None:
    """Check every structural invariant; raise the first violation found.

    Idempotent and side-effect free: datasets are immutable and this function
    only reads them.
    """
    if fd.n_sites < 1:
        raise EmptySite("federation has no sites")
    d = fd.sites[0].d
    for s in fd.sites:
        if s.n < 1:
            raise EmptySite(f"site {s.site_id} has no records")
        if s.x.ndim != 2 or s.d != d:
            raise DimensionMismatch(
                f"site {s.site_id} has covariate dimension {s.d}, expected {d}"
            )
        if s.w.shape != (s.n,) or s.y.shape != (s.n,):
            raise DimensionMismatch(
                f"site {s.site_id}: w/y lengths do not match {s.n} rows"
            )
        if not np.isin(s.w, (0.0, 1.0)).all():
            bad = s.w[~np.isin(s.w, (0.0, 1.0))][0]
            raise InvalidTreatment(f"site {s.site_id} has treatment value {bad!r}")
        if not np.isfinite(s.x).all():
            raise ValidationError(f"site {s.site_id} has non-finite covariates")
        if not np.isfinite(s.y).all():
            raise ValidationError(f"site {s.site_id} has non-finite outcomes")


def site_proportions(fd: FederatedDataset) -> np.ndarray:
    """Sample-size shares n_k / n, the plug-in estimate of the site weights."""
    sizes = fd.site_sizes.astype(np.float64)
    return sizes / sizes.sum()


@dataclass(frozen=True)
class RngHandle:
    """Deterministic random stream keyed by (seed, stream_id).

    The same handle reproduces the identical draw sequence regardless of
    execution order or thread schedule; independent handles never share
    state. ``stream()`` derives child streams for sub-tasks (sites, bootstrap
    resamples, redraw attempts) so that parallelizing over them cannot change
    results.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        return self.stream()

    def stream(self, *subkeys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, *subkeys)
        )
        return np.random.default_rng(ss)

    def child(self, stream_id: int) -> "RngHandle":
        return RngHandle(self.seed, stream_id)


# -- CSV interchange ---------------------------------------------------------
# Layout: header ``site,w,y,x1,...,xd``; rows grouped by site in site order.


def save_csv(fd: FederatedDataset, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["site", "w", "y"] + [f"x{j + 1}" for j in range(fd.d)])
        for s in fd.sites:
            for i in range(s.n):
                writer.writerow(
                    [s.site_id, int(s.w[i]), f"{s.y[i]:.17g}"]
                    + [f"{v:.17g}" for v in s.x[i]]
                )


def load_csv(path) -> FederatedDataset:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:3] != ["site", "w", "y"]:
            raise DimensionMismatch(f"unexpected CSV header {header[:3]}")
        d = len(header) - 3
        rows_by_site: dict[int, list[list[float]]] = {}
        for row in reader:
            if not row:
                continue
            if len(row) != 3 + d:
                raise DimensionMismatch(
                    f"row has {len(row) - 3} covariates, expected {d}"
                )
            rows_by_site.setdefault(int(row[0]), []).append(
                [float(v) for v in row[1:]]
            )
    sites = []
    for site_id in sorted(rows_by_site):
        arr = np.array(rows_by_site[site_id])
        sites.append(
            SiteDataset(site_id=site_id, x=arr[:, 2:], w=arr[:, 0], y=arr[:, 1])
        )
    return FederatedDataset(sites=tuple(sites))
