import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import nnls

from mini import mini_cell
from rflscm.errors import ConfigError
from rflscm.trainer import Observation
from rflscm.wnomp import WnompConfig, _nnls_pg, wnomp_batch, wnomp_solve
from wnomp_oracle import support_recovery_trial


@given(st.integers(0, 10_000))
def test_projected_gradient_nnls_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    B = rng.uniform(size=(12, 3))
    B /= np.linalg.norm(B, axis=0)
    r = rng.normal(size=12)
    ref, _ = nnls(B, r)
    got = _nnls_pg(B, r, np.zeros(3), 20_000)
    assert np.linalg.norm(B @ got - r) <= np.linalg.norm(B @ ref - r) + 1e-9
    assert np.all(got >= 0)


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_solution_is_sparse_non_negative_and_monotone(seed, k):
    rng = np.random.default_rng(seed)
    A = rng.uniform(size=(8, 20))
    r = rng.uniform(0.1, 1.0, size=8)
    hist = []
    x = wnomp_solve(A, r, WnompConfig(max_sparsity=k), history=hist)
    assert np.all(x >= 0) and np.count_nonzero(x) <= k
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_exact_one_sparse_recovery():
    rng = np.random.default_rng(0)
    A = rng.uniform(size=(8, 30))
    x = np.zeros(30)
    x[7] = 2.5
    got = wnomp_solve(A, A @ x, WnompConfig(max_sparsity=3, nnls_iters=2000))
    assert np.flatnonzero(got).tolist() == [7]
    assert got[7] == pytest.approx(2.5, rel=1e-6)


def test_support_matches_exhaustive_enumeration():
    rng = np.random.default_rng(99)
    trials = [support_recovery_trial(rng, m=16, n=24) for _ in range(8)]
    assert all(best == truth for truth, _, best in trials)  # noiseless 2-sparse supports are unique
    assert sum(est == truth for truth, est, _ in trials) >= 7


def test_unreported_rows_are_ignored():
    A = np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    x = wnomp_solve(A, np.array([2.0, 0.0, 0.0]), WnompConfig(max_sparsity=2, nnls_iters=2000))
    assert x[0] == pytest.approx(2.0, rel=1e-6) and x[1] == 0.0
    assert np.all(wnomp_solve(A, np.zeros(3)) == 0)


def test_custom_weights_and_errors():
    A = np.eye(3)
    x = wnomp_solve(A, np.array([1.0, 2.0, 3.0]), WnompConfig(max_sparsity=1, column_weights=(10.0, 1.0, 1.0)))
    assert np.flatnonzero(x).tolist() == [0]
    with pytest.raises(ConfigError):
        wnomp_solve(A, np.ones(3), WnompConfig(column_weights=(1.0, 1.0)))
    with pytest.raises(ConfigError):
        wnomp_solve(A, np.ones(2))
    with pytest.raises(ConfigError):
        WnompConfig(max_sparsity=0)


def test_batch_stacks_codebooks_and_predicts():
    cell = mini_cell()
    rng = np.random.default_rng(1)
    n = cell.grid.size
    a1, a2 = rng.uniform(size=(4, n)), rng.uniform(size=(4, n))
    x = np.zeros(n)
    x[5] = 1.0
    train = [Observation(cell, "g0", (1, 1, 1), a1, a1 @ x), Observation(cell, "g0", (1, 1, 1), a2, a2 @ x)]
    test = [Observation(cell, "g0", (1, 1, 1), a2, a2 @ x), Observation(cell, "gX", (1, 1, 1), a2, a2 @ x)]
    res = wnomp_batch(train, test, WnompConfig(max_sparsity=1, nnls_iters=2000))
    assert np.flatnonzero(res.aps[(cell.key, "g0")]).tolist() == [5]
    assert np.allclose(res.predictions[0], a2 @ x, rtol=1e-6)
    assert np.all(res.predictions[1] == 0)  # unseen link
