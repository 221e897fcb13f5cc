import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcausal import (
    DimensionMismatch,
    EmptySite,
    FederatedDataset,
    InvalidTreatment,
    RngHandle,
    SiteDataset,
    load_csv,
    save_csv,
    site_proportions,
    validate_federation,
)


def _simple_site(site_id, n, d, w_value=None, rng=None):
    rng = rng or np.random.default_rng(site_id)
    w = rng.integers(0, 2, n).astype(float) if w_value is None else np.full(n, w_value)
    return SiteDataset(site_id=site_id, x=rng.normal(size=(n, d)), w=w,
                       y=rng.normal(size=n))


def test_validate_accepts_wellformed_two_site_federation():
    fd = FederatedDataset(sites=(_simple_site(1, 30, 10), _simple_site(2, 50, 10)))
    validate_federation(fd)  # must not raise


def test_validate_rejects_treatment_outside_binary():
    site = _simple_site(1, 20, 4)
    bad = SiteDataset(site_id=1, x=site.x, w=np.full(20, 2.0), y=site.y)
    with pytest.raises(InvalidTreatment):
        validate_federation(FederatedDataset(sites=(bad,)))


def test_validate_rejects_dimension_mismatch_between_sites():
    fd = FederatedDataset(sites=(_simple_site(1, 10, 10), _simple_site(2, 9, 9)))
    with pytest.raises(DimensionMismatch):
        validate_federation(fd)


def test_validate_rejects_empty_site():
    empty = SiteDataset(site_id=1, x=np.empty((0, 3)), w=np.empty(0), y=np.empty(0))
    with pytest.raises(EmptySite):
        validate_federation(FederatedDataset(sites=(empty,)))


def test_validate_is_idempotent_and_side_effect_free():
    fd = FederatedDataset(sites=(_simple_site(1, 15, 3),))
    before = fd.sites[0].x.copy()
    validate_federation(fd)
    validate_federation(fd)
    np.testing.assert_array_equal(fd.sites[0].x, before)
    assert not fd.sites[0].x.flags.writeable


@pytest.mark.parametrize(
    "sizes,expected",
    [
        ((500, 500, 500), (1 / 3, 1 / 3, 1 / 3)),
        ((2000, 2000, 2000), (1 / 3, 1 / 3, 1 / 3)),
        ((7,), (1.0,)),
    ],
)
def test_site_proportions(sizes, expected):
    fd = FederatedDataset(
        sites=tuple(_simple_site(k + 1, n, 2) for k, n in enumerate(sizes))
    )
    props = site_proportions(fd)
    np.testing.assert_allclose(props, expected, rtol=0, atol=2e-16)
    assert abs(props.sum() - 1.0) <= np.finfo(float).eps


@given(st.lists(st.integers(min_value=1, max_value=5000), min_size=1, max_size=8))
@settings(max_examples=60, deadline=None)
def test_site_proportions_simplex_property(sizes):
    fd = FederatedDataset(
        sites=tuple(
            SiteDataset(site_id=k + 1, x=np.zeros((n, 1)), w=np.zeros(n), y=np.zeros(n))
            for k, n in enumerate(sizes)
        )
    )
    props = site_proportions(fd)
    assert (props >= 0).all()
    assert abs(props.sum() - 1.0) <= 4 * np.finfo(float).eps


def test_rng_handle_reproduces_identical_sequences():
    a = RngHandle(seed=123, stream_id=5).generator().normal(size=100)
    b = RngHandle(seed=123, stream_id=5).generator().normal(size=100)
    np.testing.assert_array_equal(a, b)


def test_rng_streams_are_order_independent():
    h = RngHandle(seed=9, stream_id=0)
    first_then_second = (h.stream(0).normal(size=10), h.stream(1).normal(size=10))
    second_then_first = (h.stream(1).normal(size=10), h.stream(0).normal(size=10))
    np.testing.assert_array_equal(first_then_second[0], second_then_first[1])
    np.testing.assert_array_equal(first_then_second[1], second_then_first[0])


def test_distinct_streams_differ():
    h = RngHandle(seed=9)
    assert not np.array_equal(h.stream(0).normal(size=10), h.stream(1).normal(size=10))


def test_records_view_matches_arrays():
    site = _simple_site(3, 5, 2)
    recs = site.records
    assert len(recs) == 5
    assert recs[2].h == 3
    np.testing.assert_array_equal(recs[2].x, site.x[2])
    assert recs[2].w == site.w[2]
    assert recs[2].y == site.y[2]


def test_csv_roundtrip_is_exact(tmp_path, two_site_federation):
    path = tmp_path / "data.csv"
    save_csv(two_site_federation, path)
    back = load_csv(path)
    assert back.n_sites == two_site_federation.n_sites
    for a, b in zip(back.sites, two_site_federation.sites):
        assert a.site_id == b.site_id
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.w, b.w)
        np.testing.assert_array_equal(a.y, b.y)


def test_csv_header_is_stable(tmp_path, two_site_federation):
    path = tmp_path / "data.csv"
    save_csv(two_site_federation, path)
    header = path.read_text().splitlines()[0]
    assert header == "site,w,y,x1,x2,x3"


def test_pooled_concatenates_in_site_order(two_site_federation):
    x, w, y, g = two_site_federation.pooled()
    assert x.shape == (100, 3)
    np.testing.assert_array_equal(g, np.repeat([0, 1], [40, 60]))
    np.testing.assert_array_equal(x[:40], two_site_federation.sites[0].x)
