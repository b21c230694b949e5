import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shadowda.metrics import (
    ScoreSet,
    boundary_discontinuity,
    discontinuity,
    format_table,
    mse,
    mse_observed,
    obs_discrepancy,
    score,
)
from shadowda.models import linear_model, lorenz63
from shadowda.obs import ObservationSet, generate_truth, observe, selector


def _obs(values, H):
    values = np.asarray(values, dtype=float)
    return ObservationSet(np.arange(values.shape[0]), values, np.asarray(H, dtype=float), 1.0, 0)


def test_mse_examples():
    x = np.zeros((3, 1))
    u = np.array([[7.0], [1.0], [2.0]])
    assert mse(u, x) == 2.5
    assert mse(x, x) == 0.0
    with pytest.raises(ValueError):
        mse(u, np.zeros((4, 1)))


def test_obs_discrepancy_examples():
    u = np.zeros((3, 2))
    ob = _obs([[5.0], [1.0], [3.0]], [[1.0, 0.0]])
    assert obs_discrepancy(u, ob) == 5.0
    x = generate_truth(lorenz63(), 1.0, 0)
    assert obs_discrepancy(x, observe(x, nu=0.0)) == 0.0


def test_obs_discrepancy_on_truth_grid():
    x = generate_truth(lorenz63(), 1.0, 0)
    ob = observe(x, nu=0.5, every_k=4, seed=1)
    assert obs_discrepancy(x, ob) == obs_discrepancy(x[::4], ob)
    with pytest.raises(ValueError):
        obs_discrepancy(x[:10], ob)


def test_discontinuity_examples():
    m = linear_model(np.eye(2))
    u = np.zeros((11, 2))
    assert discontinuity(u, m) == 0.0
    u[6:] = [0.5, -1.0]
    assert discontinuity(u, m) == pytest.approx(0.1)
    assert boundary_discontinuity(u, m, [0, 6, 10]) == pytest.approx(1.0)
    assert boundary_discontinuity(u, m, [0, 10]) == 0.0


def test_c_of_truth_converges_to_b_nu2():
    x = generate_truth(lorenz63(), 20.0, 1)
    for H, nu in [(None, 1.0), (selector(3, [0]), 2.0)]:
        ob = observe(x, H=H, nu=nu, seed=3)
        b = ob.H.shape[0]
        assert abs(obs_discrepancy(x, ob) / (b * nu**2) - 1) < 0.1


def test_score_and_table():
    m = lorenz63()
    x = generate_truth(m, 1.0, 2)
    ob = observe(x, H=selector(3, [0, 2]), nu=0.5, seed=4)
    u = x + 0.01
    s = score(u, x, ob, m, boundaries=[0, 100, 200], iterations=4.5, n_windows=2)
    assert isinstance(s, ScoreSet)
    assert s.MSE == pytest.approx(3e-4)
    assert s.MSE_observed == pytest.approx(2e-4)
    assert s.iterations == 4.5 and s.n_windows == 2
    assert all(v >= 0 for v in s.as_row().values())
    assert np.isnan(score(u, x, observe(x, nu=0.5), m).MSE_observed)
    text = format_table(["p=2", "p=3"], [s, s], c_obs=obs_discrepancy(x, ob))
    lines = text.splitlines()
    assert lines[0].split("|")[0].strip() == "Property"
    assert any(line.startswith("Error between Estimate and the Truth MSE") for line in lines)
    assert len(lines) == 2 + 1 + 5


def test_mse_observed():
    x = np.zeros((3, 3))
    u = np.ones((3, 3))
    ob = _obs(np.zeros((3, 1)), selector(3, [1]))
    assert mse_observed(u, x, ob) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_metrics_permutation_covariant(d, n, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(d)
    u, x, y = rng.standard_normal((3, n, d))
    A = rng.standard_normal((d, d))
    P = np.eye(d)[perm]
    ob = _obs(y, np.eye(d))
    ob_p = _obs(y[:, perm], np.eye(d))
    assert mse(u[:, perm], x[:, perm]) == pytest.approx(mse(u, x))
    assert obs_discrepancy(u[:, perm], ob_p) == pytest.approx(obs_discrepancy(u, ob))
    m, m_p = linear_model(A), linear_model(P @ A @ P.T)
    assert discontinuity(u[:, perm], m_p) == pytest.approx(discontinuity(u, m))
