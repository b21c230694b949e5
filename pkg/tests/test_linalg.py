import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shadowda.errors import FactorizationError, RankDeficientError, SingularUpdateError
from shadowda.linalg import BlockCholesky, BlockTridiagonalSPD, block_tridiag_factor_solve, mgs_qr, smw_solve


def random_spd(rng, N, m):
    J = rng.standard_normal((N, m, m))
    return BlockTridiagonalSPD(J @ np.swapaxes(J, 1, 2) + np.eye(m), -np.swapaxes(J[1:], 1, 2))


def householder_oracle(A):
    Q, R = np.linalg.qr(A)
    s = np.sign(np.diag(R))
    return Q * s, R * s[:, None]


def test_mgs_identity_and_orthogonal_columns():
    Q, R = mgs_qr(np.eye(4))
    np.testing.assert_array_equal(Q, np.eye(4))
    np.testing.assert_array_equal(R, np.eye(4))
    Q, R = mgs_qr(np.array([[2.0, 0], [0, 3], [0, 0]]))
    np.testing.assert_allclose(Q, np.eye(3)[:, :2])
    np.testing.assert_allclose(R, np.diag([2.0, 3.0]))


def test_mgs_random_10x4(rng):
    A = rng.standard_normal((10, 4))
    Q, R = mgs_qr(A)
    assert np.abs(Q @ R - A).max() <= 1e-10 * np.abs(A).max()
    assert np.abs(Q.T @ Q - np.eye(4)).max() <= 1e-12
    assert np.all(np.diag(R) > 0)
    assert np.allclose(np.tril(R, -1), 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 6), st.integers(0, 2**31 - 1), st.booleans())
def test_mgs_matches_householder(p, extra, seed, reorth):
    A = np.random.default_rng(seed).standard_normal((p + extra, p))
    Q, R = mgs_qr(A, reorthogonalize=reorth)
    Qh, Rh = householder_oracle(A)
    assert np.abs(Q - Qh).max() < 1e-10 * max(1.0, np.linalg.cond(A))
    assert np.abs(R - Rh).max() < 1e-10 * max(1.0, np.abs(A).max() * np.linalg.cond(A))


def test_mgs_preserves_column_order():
    A = np.array([[0.0, 5.0], [1.0, 0.0], [0.0, 0.0]])
    Q, _ = mgs_qr(A)
    np.testing.assert_allclose(Q[:, 0], [0, 1, 0])
    np.testing.assert_allclose(Q[:, 1], [1, 0, 0])


def test_mgs_rank_deficiency_names_column():
    A = np.array([[1.0, 2.0, 0.0], [1.0, 2.0, 1.0], [0.0, 0.0, 1.0]])
    with pytest.raises(RankDeficientError) as info:
        mgs_qr(A)
    assert info.value.column == 1


def test_block_solve_examples():
    M = BlockTridiagonalSPD(2 * np.eye(3)[None], np.zeros((0, 3, 3)))
    np.testing.assert_allclose(block_tridiag_factor_solve(M, np.full(3, 2.0)), np.ones(3))
    eye = BlockTridiagonalSPD(np.broadcast_to(np.eye(2), (5, 2, 2)), np.zeros((4, 2, 2)))
    b = np.arange(10.0)
    np.testing.assert_array_equal(block_tridiag_factor_solve(eye, b), b)


def test_block_solve_n3_dense_oracle(rng):
    M = random_spd(rng, 3, 4)
    b = rng.standard_normal(12)
    x = block_tridiag_factor_solve(M, b)
    x_ref = np.linalg.solve(M.to_dense(), b)
    assert np.linalg.norm(x - x_ref) <= 1e-10 * np.linalg.norm(x_ref)
    assert np.linalg.norm(M.matvec(x) - b) <= 1e-10 * np.linalg.norm(b)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_block_solve_residual(N, m, seed):
    rng = np.random.default_rng(seed)
    M = random_spd(rng, N, m)
    b = rng.standard_normal(N * m)
    x = block_tridiag_factor_solve(M, b)
    assert np.linalg.norm(M.matvec(x) - b) <= 1e-10 * np.linalg.norm(b) * max(1.0, np.linalg.cond(M.to_dense()) / 1e4)
    np.testing.assert_allclose(M.matvec(x), M.to_dense() @ x, atol=1e-9)


def test_factor_is_block_cholesky(rng):
    M = random_spd(rng, 4, 3)
    fac = M.factor()
    assert isinstance(fac, BlockCholesky)
    L = np.zeros((12, 12))
    for n in range(4):
        L[3 * n : 3 * n + 3, 3 * n : 3 * n + 3] = fac.chol[n]
        if n < 3:
            L[3 * n + 3 : 3 * n + 6, 3 * n : 3 * n + 3] = fac.coupling[n].T
    np.testing.assert_allclose(L @ L.T, M.to_dense(), atol=1e-10)


def test_solve_many_right_hand_sides(rng):
    M = random_spd(rng, 5, 2)
    B = rng.standard_normal((10, 3))
    np.testing.assert_allclose(M.factor().solve(B), np.linalg.solve(M.to_dense(), B), atol=1e-9)


def test_indefinite_block_reports_index():
    diag = np.stack([np.eye(2), np.eye(2), -np.eye(2)])
    M = BlockTridiagonalSPD(diag, np.zeros((2, 2, 2)))
    with pytest.raises(FactorizationError) as info:
        M.factor()
    assert info.value.block == 2


def test_smw_zero_update_is_plain_solve(rng):
    M = random_spd(rng, 4, 3)
    b = rng.standard_normal(12)
    x0 = block_tridiag_factor_solve(M, b)
    np.testing.assert_array_equal(smw_solve(M, np.zeros((12, 0)), b), x0)
    np.testing.assert_allclose(smw_solve(M, np.zeros((12, 2)), b), x0, atol=1e-14)


@pytest.mark.parametrize("N,m,q", [(5, 3, 1), (4, 3, 3)])
def test_smw_dense_oracle(N, m, q, rng):
    M = random_spd(rng, N, m)
    U = rng.standard_normal((N * m, q))
    b = rng.standard_normal(N * m)
    x_ref = np.linalg.solve(M.to_dense() + U @ U.T, b)
    assert np.linalg.norm(smw_solve(M, U, b) - x_ref) <= 1e-9 * np.linalg.norm(x_ref)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_smw_property(N, m, q, seed):
    rng = np.random.default_rng(seed)
    M = random_spd(rng, N, m)
    U = rng.standard_normal((N * m, q))
    b = rng.standard_normal(N * m)
    dense = M.to_dense() + U @ U.T
    x_ref = np.linalg.solve(dense, b)
    tol = 1e-9 * max(1.0, np.linalg.cond(dense) / 1e3)
    assert np.linalg.norm(smw_solve(M, U, b) - x_ref) <= tol * np.linalg.norm(x_ref)


def test_smw_degenerate_update_is_refused():
    M = BlockTridiagonalSPD(np.eye(2)[None], np.zeros((0, 2, 2)))
    # two identical huge columns: I + U^T M^-1 U has condition ~ 4e16
    U = 1e8 * np.ones((2, 2))
    with pytest.raises(SingularUpdateError):
        smw_solve(M, U, np.ones(2))
