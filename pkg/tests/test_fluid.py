import numpy as np
import pytest

from codedlb.core import NumericalError, QueuePMF, SystemParams, TruncationConfig, TruncationLeakWarning
from codedlb.fluid import solve_ode
from codedlb.rates import drift_F, fixed_point_powerd, tail_sums


def test_lambda_zero_empty_is_fixed():
    p = SystemParams(n=10, lam=0.0, L=2, k=1, T=5.0)
    traj = solve_ode(QueuePMF.point(0, 10), p, TruncationConfig(10))
    assert np.all(traj.probs[:, 0] == 1.0)
    assert np.all(traj.probs[:, 1:] == 0.0)


def test_lambda_zero_drains():
    p = SystemParams(n=10, lam=0.0, L=2, k=1, T=20.0)
    traj = solve_ode(QueuePMF.point(2, 10), p, TruncationConfig(10))
    assert traj.probs[-1, 0] > 0.999


@pytest.mark.parametrize("L, k", [(2, 1), (3, 2), (5, 4)])
def test_mass_positivity_and_accuracy(L, k):
    p = SystemParams(n=10, lam=0.9, L=L, k=k, T=10.0)
    traj = solve_ode(QueuePMF.point(0, 20), p, TruncationConfig(20))
    totals = traj.probs.sum(axis=1) + traj.leak
    assert np.abs(totals - 1).max() <= 1e-9
    assert traj.mass_drift <= 1e-9
    assert traj.probs.min() >= -1e-12
    assert traj.clamped <= 1e-12
    assert traj.doubling_error <= 1e-6
    assert traj.leak[-1] < 1e-12
    assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(10.0)


def test_mean_queue_length_matches_work_balance():
    # jobs arrive at rate lambda*k per server and leave at k per busy server
    p = SystemParams(n=10, lam=0.9, L=3, k=2, T=10.0)
    traj = solve_ode(QueuePMF.point(0, 20), p, TruncationConfig(20))
    levels = np.arange(21)
    mean_len = traj.probs @ levels
    busy = 1 - traj.probs[:, 0]
    dt = np.diff(traj.times)
    rhs = 2 * (0.9 - busy)
    integral = np.concatenate(([0.0], np.cumsum(dt * (rhs[1:] + rhs[:-1]) / 2)))
    assert np.abs(mean_len - integral).max() < 5e-3


def test_long_horizon_reaches_fixed_point():
    p = SystemParams(n=10, lam=0.9, L=2, k=1, T=250.0)
    traj = solve_ode(QueuePMF.point(0, 20), p, TruncationConfig(20), grid=np.linspace(0, 250, 26), check_doubling=False)
    v = tail_sums(traj.probs[-1])
    star = tail_sums(fixed_point_powerd(2, 0.9, 20).probs)
    assert np.abs(v[1:5] - star[1:5]).max() <= 1e-6
    assert np.abs(drift_F(traj.pmf(len(traj) - 1), p)).max() <= 1e-6


def test_step_doubling_failure_names_time():
    p = SystemParams(n=10, lam=0.9, L=5, k=4, T=1.0)
    with pytest.raises(NumericalError, match=r"at t="):
        solve_ode(QueuePMF.point(0, 10), p, TruncationConfig(10), h=0.5, grid=[0.0, 0.5, 1.0])


def test_step_must_not_exceed_grid_spacing():
    p = SystemParams(n=10, lam=0.9, L=2, k=1, T=1.0)
    with pytest.raises(ValueError):
        solve_ode(QueuePMF.point(0, 10), p, h=0.2, grid=[0.0, 0.1, 1.0])


def test_leak_warning_for_small_truncation():
    p = SystemParams(n=10, lam=0.9, L=2, k=1, T=10.0)
    with pytest.warns(TruncationLeakWarning):
        traj = solve_ode(QueuePMF.point(3, 4), p, TruncationConfig(4, leak_tol=1e-9))
    assert traj.leak[-1] > 1e-9
    assert np.abs(traj.probs.sum(axis=1) + traj.leak - 1).max() <= 1e-9


def test_grid_lookup_and_csv(tmp_path):
    p = SystemParams(n=10, lam=0.9, L=2, k=1, T=1.0)
    traj = solve_ode(QueuePMF.point(0, 8), p, TruncationConfig(8))
    assert traj.index(0.3) == 3
    with pytest.raises(KeyError):
        traj.index(0.35)
    assert traj.at(1.0).probs.sum() == pytest.approx(1.0)
    out = tmp_path / "f.csv"
    traj.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "time," + ",".join(f"pi_{j}" for j in range(9)) + ",leak"
    assert len(lines) == 12


def test_deterministic():
    p = SystemParams(n=10, lam=0.9, L=3, k=2, T=2.0)
    a = solve_ode(QueuePMF.point(0, 12), p, TruncationConfig(12))
    b = solve_ode(QueuePMF.point(0, 12), p, TruncationConfig(12))
    assert np.array_equal(a.probs, b.probs)
