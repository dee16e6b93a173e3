import math

import numpy as np
import pytest
from conftest import ordered_tuple_moments, queues_from_counts, random_pmf, server_subset_sums, service_second

from codedlb.core import CovMatrix, NumericalError, QueuePMF, SystemParams
from codedlb.covariance import (
    jacobi_eigh,
    phi_enumeration,
    phi_matrix,
    phi_powerd,
    sqrt_psd,
    trace_bound,
    z_prelimit,
    z_prelimit_diag,
    zbar_diag,
    zbar_offdiag,
)


def test_phi_at_empty_state():
    for L, k in [(2, 1), (3, 2), (4, 4)]:
        p = SystemParams(n=10, lam=0.9, L=L, k=k)
        phi = phi_matrix(QueuePMF.point(0, 4), p).entries
        expect = np.zeros((5, 5))
        expect[:2, :2] = 0.9 * k * k * np.array([[1, -1], [-1, 1]])
        assert np.allclose(phi, expect, atol=1e-14)


def test_zbar_examples():
    e0 = QueuePMF.point(0, 4)
    assert 0.9 * 2 * zbar_diag(1, e0, 2, 1) == pytest.approx(0.9, abs=1e-15)
    assert 0.9 * 2 * zbar_offdiag(0, 1, e0, 2, 1) == pytest.approx(-0.9, abs=1e-15)
    r = np.array([0.0, 0.0, 0.5, 0.5, 0.0])
    assert zbar_diag(1, r, 3, 2) == 0.0
    assert zbar_offdiag(1, 4, r, 3, 2) == 0.0


@pytest.mark.parametrize("L, k", [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3), (4, 1), (4, 2), (4, 3), (4, 4)])
def test_phi_matches_ordered_tuple_oracle(rng, L, k):
    K = 5
    p_ = SystemParams(n=10, lam=0.8, L=L, k=k)
    for tail in (0.0, 0.1):
        for _ in range(3):
            p, t = random_pmf(rng, K, tail=tail)
            _, second = ordered_tuple_moments(p, t, p_.lam, L, k, K)
            expect = second + service_second(p, k)
            got = phi_matrix(QueuePMF(p, t), p_, K).entries
            assert np.allclose(got, expect, rtol=0, atol=1e-12)


def test_zbar_entries_match_oracle(rng):
    K = 8
    for L, k in [(2, 1), (3, 1), (3, 2), (3, 3)]:
        p, t = random_pmf(rng, K)
        _, second = ordered_tuple_moments(p, t, 1.0, L, k, K)
        for i in range(K + 1):
            assert math.factorial(L) * zbar_diag(i, p, L, k) == pytest.approx(second[i, i], abs=1e-12)
            for j in range(i + 1, K + 1):
                assert math.factorial(L) * zbar_offdiag(i, j, p, L, k) == pytest.approx(second[i, j], abs=1e-12)
                assert zbar_offdiag(j, i, p, L, k) == zbar_offdiag(i, j, p, L, k)


def test_phi_exactly_symmetric_and_psd(rng):
    for L, k in [(2, 1), (3, 2), (5, 4), (5, 1)]:
        p_ = SystemParams(n=10, lam=0.9, L=L, k=k)
        for _ in range(50):
            p, t = random_pmf(rng, 20, tail=rng.choice([0.0, 0.01]))
            m = phi_matrix(QueuePMF(p, t), p_)
            assert np.array_equal(m.entries, m.entries.T)
            assert m.min_relative_eigenvalue() >= -1e-10
            assert np.trace(m.entries) <= trace_bound(p_)


def test_phi_row_sums_vanish(rng):
    p_ = SystemParams(n=10, lam=0.9, L=3, k=2)
    p, _ = random_pmf(rng, 10, support=7)
    phi = phi_matrix(p, p_).entries
    assert np.allclose(phi.sum(axis=1)[:-1], 0, atol=1e-14)


def test_phi_powerd_examples(rng):
    e0 = QueuePMF.point(0, 3)
    m = phi_powerd(e0, 2, 0.9).entries
    assert m[0, 0] == pytest.approx(0.9) and m[1, 1] == pytest.approx(0.9) and m[0, 1] == pytest.approx(-0.9)
    m = phi_powerd(np.array([0.5, 0.5, 0.0]), 1, 0.9).entries
    expect = np.array([[0.95, -0.95, 0.0], [-0.95, 1.4, -0.45], [0.0, -0.45, 0.45]])
    assert np.allclose(m, expect, atol=1e-15)
    for d in (1, 2, 3, 4):
        for _ in range(10):
            p, t = random_pmf(rng, 12, tail=0.02)
            r = QueuePMF(p, t)
            a = phi_powerd(r, d, 0.9).entries
            b = phi_matrix(r, SystemParams(n=10, lam=0.9, L=d, k=1)).entries
            assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_phi_enumeration_agrees_when_no_tail(rng):
    p_ = SystemParams(n=10, lam=0.9, L=3, k=2)
    p, _ = random_pmf(rng, 7)
    assert np.allclose(phi_enumeration(p, p_, 7), phi_matrix(p, p_, 7).entries, atol=1e-13)


def test_z_prelimit_examples_and_brute_force(rng):
    assert z_prelimit_diag(1, [3, 0, 0], 2, 1) == 3
    assert z_prelimit_diag(2, [3, 0, 0, 0], 2, 1) == 0
    for L, k in [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)]:
        for _ in range(10):
            n = int(rng.integers(L, 7))
            queues = rng.integers(0, 4, size=n).tolist()
            counts = np.bincount(queues, minlength=6)
            _, second = server_subset_sums(queues_from_counts(counts), L, k)
            for i in range(second.shape[0]):
                for j in range(i, second.shape[0]):
                    assert z_prelimit(i, j, counts, L, k) == second[i, j]


def test_jacobi_against_eigh(rng):
    for n in (1, 2, 3, 8, 21, 40):
        b = rng.normal(size=(n, n))
        a = b + b.T
        w, v = jacobi_eigh(a)
        assert np.allclose(w, np.linalg.eigvalsh(a), atol=1e-12 * max(1, np.abs(w).max()))
        assert np.allclose(v.T @ v, np.eye(n), atol=1e-12)
        assert np.allclose((v * w) @ v.T, a, atol=1e-12 * max(1, np.abs(a).max()))


def test_jacobi_repeated_eigenvalues():
    w, v = jacobi_eigh(np.diag([3.0, 3.0, 1.0]))
    assert w.tolist() == [1.0, 3.0, 3.0]
    w, _ = jacobi_eigh(np.ones((4, 4)))
    assert np.allclose(w, [0, 0, 0, 4], atol=1e-14)


def test_sqrt_psd_examples():
    assert np.allclose(sqrt_psd(np.eye(3)).entries, np.eye(3), atol=1e-15)
    assert np.allclose(sqrt_psd(np.diag([4.0, 9.0, 0.0])).entries, np.diag([2.0, 3.0, 0.0]), atol=1e-15)
    phi = phi_matrix(QueuePMF.point(0, 2), SystemParams(n=10, lam=0.9, L=2, k=1))
    a = sqrt_psd(phi).entries
    expect = np.sqrt(0.9) / np.sqrt(2) * np.array([[1, -1, 0], [-1, 1, 0], [0, 0, 0]])
    assert np.allclose(a, expect, atol=1e-14)
    assert isinstance(sqrt_psd(phi), CovMatrix)


def test_sqrt_psd_rejects_indefinite():
    with pytest.raises(NumericalError, match="not PSD"):
        sqrt_psd(np.diag([1.0, -0.5]))
    a = sqrt_psd(np.diag([1.0, -1e-13])).entries
    assert a[1, 1] == 0.0
