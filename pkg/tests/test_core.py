import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codedlb.core import (
    CountVector,
    CovMatrix,
    FluctuationVector,
    QueuePMF,
    SystemParams,
    TruncationConfig,
    TruncationLeakWarning,
    ValidationError,
    as_probs,
    d0_distance,
    normalize,
    pmf_from_counts,
    spawn_rng,
)


@pytest.mark.parametrize(
    "v, expected",
    [((1, 0, 0), (1, 0, 0)), ((2, 2), (0.5, 0.5)), ((1, 1, 2), (0.25, 0.25, 0.5))],
)
def test_normalize_examples(v, expected):
    pmf = normalize(v)
    assert np.allclose(pmf.probs, expected, rtol=0, atol=1e-15)
    assert pmf.tail_mass == 0.0


@pytest.mark.parametrize("v", [(0, 0, 0), (1, -1, 2), (np.nan, 1.0)])
def test_normalize_rejects(v):
    with pytest.raises(ValidationError):
        normalize(v)


@pytest.mark.parametrize(
    "counts, K, probs, tail",
    [
        ((3, 0), 2, (1, 0, 0), 0.0),
        ((1, 2, 1), 2, (0.25, 0.5, 0.25), 0.0),
        ((0, 0, 0, 4), 2, (0, 0, 0), 1.0),
    ],
)
def test_pmf_from_counts_examples(counts, K, probs, tail):
    pmf = pmf_from_counts(CountVector(counts), TruncationConfig(K))
    assert np.array_equal(pmf.probs, probs)
    assert pmf.tail_mass == tail


def test_params_validation_messages():
    with pytest.raises(ValidationError, match="k must satisfy k <= L"):
        SystemParams(n=10, lam=0.9, L=2, k=3)
    with pytest.raises(ValidationError, match="L must satisfy L <= n"):
        SystemParams(n=2, lam=0.9, L=3, k=1)
    with pytest.raises(ValidationError):
        SystemParams(n=10, lam=-1.0, L=2, k=1)
    with pytest.raises(ValidationError):
        SystemParams(n=10, lam=0.9, L=2, k=1, T=0)
    with pytest.raises(ValidationError):
        SystemParams(n=10, lam=0.9, L=2, k=1, c=0)
    assert SystemParams(n=1, lam=0.5, L=1, k=1).k == 1


def test_truncation_config():
    with pytest.raises(ValidationError):
        TruncationConfig(K=1)
    t = TruncationConfig(K=5, leak_tol=1e-3)
    assert t.size == 6
    with pytest.warns(TruncationLeakWarning):
        t.check_leak(0.01)


def test_queue_pmf_invariants():
    with pytest.raises(ValidationError):
        QueuePMF(np.array([0.5, 0.4]))
    with pytest.raises(ValidationError):
        QueuePMF(np.array([1.5, -0.5]))
    pmf = QueuePMF(np.array([0.5, 0.25]), 0.25)
    with pytest.raises(ValueError):
        pmf.probs[0] = 1.0
    small = QueuePMF(np.array([0.5, 0.25, 0.25])).resized(1)
    assert small.tail_mass == 0.25 and small.K == 1
    assert QueuePMF.point(4, 2).tail_mass == 1.0


def test_count_vector_from_pmf_rounds_to_n():
    c = CountVector.from_pmf(np.array([1 / 3, 1 / 3, 1 / 3]), 10)
    assert c.counts.sum() == 10
    assert sorted(c.counts.tolist()) == [3, 3, 4]
    with pytest.raises(ValidationError):
        CountVector([1, 2], n=4)
    with pytest.raises(ValidationError):
        CountVector([1, -1, 2])


def test_fluctuation_vector_zero_sum():
    FluctuationVector(np.array([1.0, -2.0, 1.0]))
    with pytest.raises(ValidationError):
        FluctuationVector(np.array([1.0, 0.0]))
    x = FluctuationVector.project(np.array([3.0, 1.0, 2.0]))
    assert abs(x.coords.sum()) < 1e-15


def test_cov_matrix_symmetry():
    with pytest.raises(ValidationError):
        CovMatrix(np.array([[1.0, 0.1], [0.0, 1.0]]))
    m = CovMatrix(np.eye(3))
    assert m.min_relative_eigenvalue() == 1.0


def test_as_probs_tail_is_missing_mass():
    p, tail = as_probs(np.array([0.5, 0.25]))
    assert tail == 0.25
    p, tail = as_probs(np.array([0.5, 0.25, 0.25]), K=1)
    assert p.tolist() == [0.5, 0.25] and tail == 0.25


def test_d0_distance():
    assert d0_distance([1, 0], [0, 1]) == 1.5
    assert d0_distance([1], [1, 0, 0]) == 0.0


def test_spawn_rng_independent_of_order():
    a = spawn_rng(7, 3).random()
    spawn_rng(7, 1).random()
    assert spawn_rng(7, 3).random() == a
    assert spawn_rng(7, 4).random() != a


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=12), st.integers(2, 15))
def test_pmf_from_counts_is_valid(counts, K):
    if sum(counts) == 0:
        counts = counts + [1]
    pmf = pmf_from_counts(CountVector(counts), K)
    assert np.all(pmf.probs >= 0)
    assert abs(pmf.probs.sum() + pmf.tail_mass - 1) <= 1e-12
