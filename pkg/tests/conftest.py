"""Shared oracles for the test suite.

The oracles here enumerate raw outcomes directly (ordered i.i.d. level
tuples for the limit kernels, actual server subsets for the finite-n
kernels) and never call the package's own enumeration helpers.
"""

import itertools
import math

import numpy as np
import pytest


def random_pmf(rng, K, support=None, tail=0.0):
    """Random distribution on 0..K; ``support`` limits the nonzero levels."""
    top = K if support is None else support
    p = np.zeros(K + 1)
    p[: top + 1] = rng.dirichlet(np.ones(top + 1) * 0.7)
    p *= 1.0 - tail
    return p, tail


def ordered_tuple_moments(p, tail, lam, L, k, K):
    """Arrival drift and second-moment matrix by summing over ordered L-tuples.

    Each sampled server independently sits at level ``j`` with probability
    ``p[j]``, or beyond ``K`` (pseudo-level ``K+1``) with probability ``tail``.
    The ``k`` shortest receive one job each; returns ``(mean, second)`` of the
    jump restricted to coordinates ``0..K``, scaled by ``lam``.
    """
    probs = np.append(p, tail)
    tuples = np.array(list(itertools.product(range(K + 2), repeat=L)), dtype=np.int64).reshape(-1, L)
    w = probs[tuples].prod(axis=1)
    keep = w > 0
    tuples, w = tuples[keep], w[keep]
    chosen = np.sort(tuples, axis=1)[:, :k]
    delta = np.zeros((tuples.shape[0], K + 3))
    rows = np.repeat(np.arange(tuples.shape[0]), k)
    np.add.at(delta, (rows, chosen.ravel()), -1.0)
    np.add.at(delta, (rows, chosen.ravel() + 1), 1.0)
    dv = delta[:, : K + 1]
    mean = w @ dv
    second = dv.T @ (w[:, None] * dv)
    return lam * mean, lam * second


def service_second(p, k):
    K = p.size - 1
    out = np.zeros((K + 1, K + 1))
    for i in range(1, K + 1):
        e = np.zeros(K + 1)
        e[i - 1] += 1
        e[i] -= 1
        out += k * p[i] * np.outer(e, e)
    return out


def server_subset_sums(queues, L, k):
    """Sum of the jump vector and its outer product over every L-subset of servers."""
    top = max(queues) + 2
    first = np.zeros(top + 1)
    second = np.zeros((top + 1, top + 1))
    count = 0
    for subset in itertools.combinations(range(len(queues)), L):
        levels = sorted(queues[s] for s in subset)
        d = np.zeros(top + 1)
        for lv in levels[:k]:
            d[lv] -= 1
            d[lv + 1] += 1
        first += d
        second += np.outer(d, d)
        count += 1
    assert count == math.comb(len(queues), L)
    return first, second


def queues_from_counts(counts):
    out = []
    for lv, c in enumerate(counts):
        out += [lv] * int(c)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    """Record one acceptance verdict; all of them are echoed in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((criterion, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES, key=lambda item: item[0]):
        terminalreporter.write_line(line)
