import numpy as np
import pytest
from conftest import random_pmf

from codedlb.core import FluctuationVector, SystemParams
from codedlb.drift import (
    drift_G,
    drift_G_matrix,
    drift_G_powerd,
    drift_G_supermarket2,
    xi_components,
    xi_vectors,
)
from codedlb.rates import drift_F, drift_F_powerd


def _zero_sum(rng, size, support=None):
    x = np.zeros(size)
    top = size if support is None else support
    x[:top] = rng.normal(size=top)
    x[:top] -= x[:top].mean()
    return x


def _central_difference(f, r, x, u):
    return (f(r + u * x) - f(r - u * x)) / (2 * u)


def test_xi_examples():
    r = np.array([0.5, 0.0, 0.5, 0.0])
    zero = np.zeros(4)
    for which in (1, 2, 3, 4):
        assert xi_components(zero, r, 2, 1, which, 1) == 0.0
    x = np.array([1.0, -1.0, 0.0, 0.0])
    assert xi_components(x, r, 2, 1, 4, 0) == -2.0
    assert xi_components(x, r, 2, 1, 4, 1) == 1.0
    # r_1 = 0: only the single-server term at level 1 survives, weighted by the mass above
    x = np.array([1.0, -2.0, 1.0, 0.0])
    assert xi_components(x, r, 2, 1, 2, 1) == pytest.approx(0.5 * -2.0, abs=1e-15)
    with pytest.raises(ValueError):
        xi_components(x, r, 2, 1, 5, 1)


@pytest.mark.parametrize("L, k", [(1, 1), (2, 1), (2, 2), (3, 2), (4, 1), (4, 3), (5, 4)])
@pytest.mark.parametrize("u", [1e-5, 1e-6])
def test_gradient_check(rng, L, k, u):
    K = 12
    p_ = SystemParams(n=10, lam=0.9, L=L, k=k)
    for _ in range(15):
        r, _ = random_pmf(rng, K, support=K - 2)
        r = 0.9 * r + 0.1 / (K - 1) * (np.arange(K + 1) < K - 1)
        x = _zero_sum(rng, K + 1, support=K - 1)
        fd = _central_difference(lambda v: drift_F(v, p_, K), r, x, u)
        g = drift_G(x, r, p_, K)
        assert np.abs(g - fd).max() <= 1e-5 * max(1.0, np.abs(g).max())


def test_linearity_and_zero_sum(rng):
    p_ = SystemParams(n=10, lam=0.9, L=3, k=2)
    K = 10
    r, _ = random_pmf(rng, K, support=7)
    x = _zero_sum(rng, K + 1, support=8)
    y = _zero_sum(rng, K + 1, support=8)
    a, b = 1.7, -0.3
    lhs = drift_G(a * x + b * y, r, p_, K)
    rhs = a * drift_G(x, r, p_, K) + b * drift_G(y, r, p_, K)
    assert np.allclose(lhs, rhs, atol=1e-12)
    assert abs(drift_G(x, r, p_, K).sum()) < 1e-12
    assert np.all(drift_G(np.zeros(K + 1), r, p_, K) == 0)


def test_matrix_form(rng):
    p_ = SystemParams(n=10, lam=0.9, L=4, k=2)
    r, _ = random_pmf(rng, 9)
    x = _zero_sum(rng, 10)
    assert np.allclose(drift_G_matrix(r, p_) @ x, drift_G(FluctuationVector(x), r, p_), atol=1e-13)


def test_powerd_forms(rng):
    K = 12
    for d in (1, 2, 3, 4):
        p_ = SystemParams(n=10, lam=0.85, L=d, k=1)
        for _ in range(10):
            r, _ = random_pmf(rng, K, support=K - 2)
            x = _zero_sum(rng, K + 1, support=K - 1)
            gd = drift_G_powerd(x, r, d, 0.85, K)
            assert np.allclose(gd, drift_G(x, r, p_, K), rtol=0, atol=1e-10)
            fd = _central_difference(lambda v: drift_F_powerd(v, d, 0.85, K), r, x, 1e-6)
            assert np.abs(gd - fd).max() <= 1e-6 * max(1.0, np.abs(gd).max())
    assert np.all(drift_G_powerd(np.zeros(5), np.array([0.2] * 5), 3, 0.9) == 0)


def test_supermarket2_expanded_form(rng):
    p_ = SystemParams(n=10, lam=0.9, L=2, k=1)
    for _ in range(20):
        r, _ = random_pmf(rng, 10, support=8)
        x = _zero_sum(rng, 11, support=9)
        assert np.allclose(drift_G_supermarket2(x, r, 0.9), drift_G(x, r, p_), rtol=0, atol=1e-10)


def test_xi_vectors_pieces_sum_to_arrival_derivative(rng):
    p_ = SystemParams(n=10, lam=0.9, L=3, k=2)
    r, _ = random_pmf(rng, 8, support=6)
    x = _zero_sum(rng, 9, support=7)
    xi1, xi2, xi3, xi4 = xi_vectors(x, r, 3, 2)
    assert np.allclose(xi4, np.append(x[1:], 0) - x)
    total = xi1 + xi2 + xi3
    assert np.isfinite(total).all()


def test_lipschitz_in_x_is_finite(rng):
    p_ = SystemParams(n=10, lam=0.9, L=3, k=2)
    r, _ = random_pmf(rng, 15)
    J = drift_G_matrix(r, p_)
    worst = 0.0
    for _ in range(2000):
        x = _zero_sum(rng, 16)
        y = _zero_sum(rng, 16)
        worst = max(worst, np.linalg.norm(J @ (x - y)) / np.linalg.norm(x - y))
    assert np.isfinite(worst) and worst <= np.linalg.norm(J, 2) + 1e-12
