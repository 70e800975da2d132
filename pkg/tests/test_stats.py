import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedhal.errors import DataError, DimensionError, DomainError, ParseError, UnsupportedVersionError
from fedhal.numerics import Rng
from fedhal.stats import (
    VAR_FLOOR,
    DomainStats,
    IdStats,
    compute_ifs,
    estimate_dfs,
    parse_dfs,
    sample_domain_vectors,
    serialize_dfs,
)
from oracles import dfs_bruteforce


def test_ifs_identical_samples_have_zero_variance():
    ifs = compute_ifs(np.tile([[1.0, -2.0]], (4, 1)), [7, 7, 7, 7])
    assert np.all(ifs.variances == 0)
    assert ifs.id_index == {7: 0}


def test_ifs_population_variance():
    ifs = compute_ifs(np.array([[1.0], [3.0]]), [0, 0])
    assert ifs.means[0, 0] == 2.0 and ifs.variances[0, 0] == 1.0


def test_ifs_single_sample_identity():
    ifs = compute_ifs(np.array([[1.0], [3.0], [8.0]]), [0, 0, 1])
    assert ifs.variances[1, 0] == 0.0 and ifs.means[1, 0] == 8.0


def test_ifs_permutation_invariance():
    r = np.random.default_rng(0)
    F = r.normal(size=(20, 3))
    y = np.repeat(np.arange(4), 5)
    perm = r.permutation(20)
    a, b = compute_ifs(F, y), compute_ifs(F[perm], y[perm])
    assert np.allclose(a.means, b.means, atol=1e-15) and np.allclose(a.variances, b.variances, atol=1e-15)


def test_ifs_errors():
    with pytest.raises(DataError):
        compute_ifs(np.zeros((0, 3)), [])
    with pytest.raises(DimensionError):
        compute_ifs(np.zeros((3, 2)), [0, 1])


def ifs_from(means, variances):
    means, variances = np.asarray(means, float), np.asarray(variances, float)
    return IdStats(means, variances, {i: i for i in range(len(means))})


def test_dfs_hand_example():
    dfs = estimate_dfs(ifs_from([[0, 0], [2, 4]], [[1, 1], [3, 5]]))
    assert dfs.mu_hat.tolist() == [1, 2]
    assert dfs.sigma_hat_sq.tolist() == [1, 4]
    assert dfs.mu_tilde.tolist() == [2, 3]
    assert dfs.sigma_tilde_sq.tolist() == [1, 4]


def test_dfs_identical_ids_have_zero_spread():
    dfs = estimate_dfs(ifs_from([[1, 2]] * 3, [[3, 4]] * 3))
    assert np.all(dfs.sigma_hat_sq == 0) and np.all(dfs.sigma_tilde_sq == 0)


def test_dfs_duplicated_rows_unchanged():
    r = np.random.default_rng(1)
    m, v = r.normal(size=(5, 3)), r.uniform(size=(5, 3))
    a = estimate_dfs(ifs_from(m, v))
    b = estimate_dfs(ifs_from(np.vstack([m, m]), np.vstack([v, v])))
    for k in ("mu_hat", "sigma_hat_sq", "mu_tilde", "sigma_tilde_sq"):
        assert np.allclose(getattr(a, k), getattr(b, k), atol=1e-14)


def test_dfs_needs_two_identities():
    with pytest.raises(DataError):
        estimate_dfs(ifs_from([[1.0]], [[1.0]]))


@st.composite
def labelled_features(draw):
    d = draw(st.integers(1, 8))
    n_ids = draw(st.integers(2, 10))
    per = draw(st.lists(st.integers(1, 20), min_size=n_ids, max_size=n_ids))
    seed = draw(st.integers(0, 2**31))
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_ids), per)
    F = r.normal(size=(labels.size, d)) * r.uniform(0.1, 5) + r.normal(size=d)
    perm = r.permutation(labels.size)
    return F[perm], labels[perm]


@given(labelled_features())
def test_dfs_matches_bruteforce(data):
    F, y = data
    dfs = estimate_dfs(compute_ifs(F, y))
    ref = dfs_bruteforce(F, y)
    for got, want in zip((dfs.mu_hat, dfs.sigma_hat_sq, dfs.mu_tilde, dfs.sigma_tilde_sq), ref):
        assert np.allclose(got, want, rtol=0, atol=1e-9)


def test_domain_stats_invariants():
    with pytest.raises(DomainError):
        DomainStats(np.zeros(2), np.array([-1.0, 0]), np.zeros(2), np.zeros(2))
    with pytest.raises(DimensionError):
        DomainStats(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2))


def make_dfs(d=4, seed=0, client_id=0, epoch=0):
    r = np.random.default_rng(seed)
    return DomainStats(r.normal(size=d), r.uniform(size=d), r.uniform(size=d), r.uniform(size=d), client_id, epoch)


def test_sampling_degenerate_gaussians():
    dfs = DomainStats(np.array([1.0, -2.0]), np.zeros(2), np.array([0.5, 3.0]), np.zeros(2))
    dv = sample_domain_vectors(dfs, Rng(0))
    assert dv.mu.tolist() == [1.0, -2.0] and dv.sigma_sq.tolist() == [0.5, 3.0]


def test_sampling_clamps_variance():
    dfs = DomainStats(np.zeros(3), np.zeros(3), np.array([0.0, 1e-9, 1e-7]), np.zeros(3))
    assert sample_domain_vectors(dfs, Rng(0)).sigma_sq.tolist() == [VAR_FLOOR] * 3


@given(st.integers(0, 2**31))
def test_sampling_never_below_floor(seed):
    dfs = DomainStats(np.zeros(6), np.ones(6), np.full(6, 0.01), np.full(6, 4.0))
    assert np.all(sample_domain_vectors(dfs, Rng(seed)).sigma_sq >= VAR_FLOOR)


def test_sampling_monte_carlo_mean():
    dfs = make_dfs(d=3, seed=4)
    rng = Rng(8)
    n = 100_000
    draws = np.array([sample_domain_vectors(dfs, rng).mu for _ in range(n)])
    se = np.sqrt(dfs.sigma_hat_sq / n)
    assert np.all(np.abs(draws.mean(axis=0) - dfs.mu_hat) < 3 * se)


@given(st.integers(1, 16), st.integers(0, 2**31), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_codec_round_trip(d, seed, client_id, epoch):
    dfs = make_dfs(d, seed, client_id, epoch)
    blob = serialize_dfs(dfs)
    assert len(blob) == 16 + 32 * d
    assert parse_dfs(blob).same_values(dfs)


def test_codec_layout():
    dfs = make_dfs(2, 1, client_id=3, epoch=9)
    blob = serialize_dfs(dfs)
    assert blob[:4] == b"DFS1"
    assert struct.unpack_from("<III", blob, 4) == (3, 9, 2)
    body = struct.unpack_from("<8d", blob, 16)
    assert list(body[:2]) == dfs.mu_hat.tolist() and list(body[6:]) == dfs.sigma_tilde_sq.tolist()


def test_codec_errors():
    blob = serialize_dfs(make_dfs(3))
    for cut in (0, 5, 16, len(blob) - 1):
        with pytest.raises(ParseError):
            parse_dfs(blob[:cut])
    with pytest.raises(UnsupportedVersionError) as exc:
        parse_dfs(b"DFS2" + blob[4:])
    assert exc.value.offset == 3
    with pytest.raises(ParseError) as exc:
        parse_dfs(b"XFS1" + blob[4:])
    assert exc.value.offset == 0
    with pytest.raises(ParseError):
        parse_dfs(blob + b"\x00" * 8)
    negative = bytearray(blob)
    struct.pack_into("<d", negative, 16 + 8 * 3, -1.0)  # first sigma_hat_sq entry
    with pytest.raises(ParseError):
        parse_dfs(bytes(negative))


def test_payload_size_independent_of_data_volume():
    sizes = set()
    for n_ids, per in ((2, 2), (10, 50), (40, 5)):
        r = np.random.default_rng(n_ids)
        F = r.normal(size=(n_ids * per, 6))
        sizes.add(len(serialize_dfs(estimate_dfs(compute_ifs(F, np.repeat(np.arange(n_ids), per))))))
    assert sizes == {16 + 32 * 6}
