"""Shared fixtures and frozen oracle values.

The two ground-truth effects below were computed once by the package's
brute-force Monte Carlo oracle (one million covariate draws, fixed streams
RngHandle(771100, 0) and RngHandle(771100, 1)) and frozen here together
with their standard errors. test_dgp.py re-derives both values from closed
form Gaussian-mixture moments as an independent check.
"""

import numpy as np
import pytest

from fedcausal import FederatedDataset, SiteDataset

# design A (three-site Gaussian design), any overlap regime
TRUE_ATE_A = 13.079891794758533
TRUE_ATE_A_SE = 0.012080682886222988
# design B (mixture + softmax assignment), any overlap regime
TRUE_ATE_B = 4.024129271018694
TRUE_ATE_B_SE = 0.0050665458069728145


def make_federation(site_specs, d=None):
    """Build a federation from (x, w, y) triples (site ids assigned 1..K)."""
    sites = []
    for k, (x, w, y) in enumerate(site_specs):
        sites.append(SiteDataset(site_id=k + 1, x=np.asarray(x), w=w, y=y))
    return FederatedDataset(sites=tuple(sites))


@pytest.fixture
def two_site_federation():
    rng = np.random.default_rng(42)
    x1 = rng.normal(size=(40, 3))
    x2 = rng.normal(size=(60, 3))
    return make_federation(
        [
            (x1, rng.integers(0, 2, 40).astype(float), rng.normal(size=40)),
            (x2, rng.integers(0, 2, 60).astype(float), rng.normal(size=60)),
        ]
    )
