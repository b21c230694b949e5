"""Dense kernels for the Newton solves.

* :func:`mgs_qr` -- thin QR by modified Gram-Schmidt, column order preserved.
* :class:`BlockTridiagonalSPD` -- symmetric positive definite block tridiagonal
  matrices, factored by block Cholesky (block Thomas) in O(N m^3).
* :func:`smw_solve` -- ``(M + U U^T) x = b`` through Sherman-Morrison-Woodbury.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import FactorizationError, RankDeficientError, SingularUpdateError

RANK_TOL = 1e-13


@dataclass(frozen=True, eq=False)
class ThinQR:
    Q: np.ndarray
    R: np.ndarray

    def __iter__(self):
        return iter((self.Q, self.R))


def mgs_qr(A, reorthogonalize=False, rank_tol=RANK_TOL):
    """Thin QR factorization ``A = Q R`` by modified Gram-Schmidt.

    ``R`` has a positive diagonal. With ``reorthogonalize`` each projection is
    applied twice, which keeps ``Q`` orthonormal for badly conditioned input.

    Raises
    ------
    RankDeficientError
        If a pivot ``R[j, j]`` falls below ``rank_tol * ||A||_F``.
    """
    V = np.array(A, dtype=float)
    if V.ndim != 2:
        raise ValueError("mgs_qr expects a 2-d array")
    d, p = V.shape
    if p > d:
        raise RankDeficientError(d)
    R = np.zeros((p, p))
    thresh = rank_tol * np.linalg.norm(V)
    for j in range(p):
        v = V[:, j]
        nrm = np.sqrt(v @ v)
        if not nrm > thresh:
            raise RankDeficientError(j)
        R[j, j] = nrm
        v /= nrm
        if j + 1 < p:
            rest = V[:, j + 1 :]
            coef = v @ rest
            rest -= np.outer(v, coef)
            if reorthogonalize:
                extra = v @ rest
                rest -= np.outer(v, extra)
                coef = coef + extra
            R[j, j + 1 :] = coef
    return ThinQR(V, R)


@dataclass(frozen=True, eq=False)
class BlockTridiagonalSPD:
    """Symmetric block tridiagonal matrix.

    ``diag`` has shape ``(N, m, m)``; ``upper[n]`` is the block in row ``n``,
    column ``n + 1`` (shape ``(N - 1, m, m)``). The block below the diagonal
    is its transpose.
    """

    diag: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.diag, dtype=float)
        N, m = D.shape[0], D.shape[1]
        U = np.asarray(self.upper, dtype=float).reshape(max(N - 1, 0), m, m)
        object.__setattr__(self, "diag", D)
        object.__setattr__(self, "upper", U)

    @property
    def n_blocks(self):
        return self.diag.shape[0]

    @property
    def block_size(self):
        return self.diag.shape[1]

    def matvec(self, x):
        N, m = self.n_blocks, self.block_size
        X = np.asarray(x, dtype=float).reshape(N, m, -1)
        Y = self.diag @ X
        if N > 1:
            Y[:-1] += self.upper @ X[1:]
            Y[1:] += np.swapaxes(self.upper, 1, 2) @ X[:-1]
        return Y.reshape(np.shape(x))

    def to_dense(self):
        N, m = self.n_blocks, self.block_size
        M = np.zeros((N * m, N * m))
        for n in range(N):
            M[n * m : (n + 1) * m, n * m : (n + 1) * m] = self.diag[n]
            if n + 1 < N:
                M[n * m : (n + 1) * m, (n + 1) * m : (n + 2) * m] = self.upper[n]
                M[(n + 1) * m : (n + 2) * m, n * m : (n + 1) * m] = self.upper[n].T
        return M

    def factor(self):
        return BlockCholesky.from_matrix(self)


@dataclass(frozen=True, eq=False)
class BlockCholesky:
    """Block Cholesky factor ``M = L L^T``.

    ``chol[n]`` is the lower triangular factor of the n-th Schur complement and
    ``coupling[n] = chol[n]^{-1} upper[n]``, so that block ``(n + 1, n)`` of
    ``L`` is ``coupling[n]^T``. Each stage touches only blocks ``n`` and ``n + 1``.
    """

    chol: np.ndarray
    coupling: np.ndarray

    @classmethod
    def from_matrix(cls, M: BlockTridiagonalSPD):
        N, m = M.n_blocks, M.block_size
        chol = np.empty((N, m, m))
        coupling = np.empty((max(N - 1, 0), m, m))
        S = M.diag[0]
        for n in range(N):
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise FactorizationError(n) from None
            chol[n] = L
            if n + 1 < N:
                W = solve_triangular(L, M.upper[n], lower=True, check_finite=False)
                coupling[n] = W
                S = M.diag[n + 1] - W.T @ W
        return cls(chol, coupling)

    def solve(self, b):
        """Solve ``M x = b`` for a stacked vector or a stack of column vectors."""
        N, m = self.chol.shape[0], self.chol.shape[1]
        b = np.asarray(b, dtype=float)
        B = b.reshape(N, m, -1)
        z = np.empty_like(B)
        rhs = B[0]
        for n in range(N):
            z[n] = solve_triangular(self.chol[n], rhs, lower=True, check_finite=False)
            if n + 1 < N:
                rhs = B[n + 1] - self.coupling[n].T @ z[n]
        x = np.empty_like(B)
        rhs = z[N - 1]
        for n in range(N - 1, -1, -1):
            x[n] = solve_triangular(self.chol[n], rhs, lower=True, trans="T", check_finite=False)
            if n > 0:
                rhs = z[n - 1] - self.coupling[n - 1] @ x[n]
        return x.reshape(b.shape)


def block_tridiag_factor_solve(M: BlockTridiagonalSPD, b):
    """Solve ``M x = b`` with a block Cholesky factorization of ``M``."""
    return M.factor().solve(b)


def smw_solve(M, U, b):
    """Solve ``(M + U U^T) x = b`` by the Sherman-Morrison-Woodbury identity.

    ``M`` may be a :class:`BlockTridiagonalSPD` or an existing
    :class:`BlockCholesky`. Costs two block solves (one with ``q`` right-hand
    sides) and a dense ``q x q`` solve. With ``q = 0`` this is exactly the
    plain block solve.
    """
    fac = M if isinstance(M, BlockCholesky) else M.factor()
    b = np.asarray(b, dtype=float)
    U = np.asarray(U, dtype=float).reshape(b.size, -1)
    x0 = fac.solve(b.ravel())
    if U.shape[1] == 0:
        return x0.reshape(b.shape)
    MU = fac.solve(U)
    cap = np.eye(U.shape[1]) + U.T @ MU
    try:
        if np.linalg.cond(cap) > 1e14:
            raise np.linalg.LinAlgError
        y = np.linalg.solve(cap, U.T @ x0)
    except np.linalg.LinAlgError:
        raise SingularUpdateError("capacitance matrix I + U^T M^-1 U is singular") from None
    return (x0 - MU @ y).reshape(b.shape)
