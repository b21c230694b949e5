"""QR propagation of tangent frames along a trajectory.

Along ``u_0 .. u_N`` the frames satisfy ``Q[n+1] R[n] = DF(u_n) Q[n]``, where
``R[n]`` is upper triangular with positive diagonal. Note the offset: ``R[n]``
is the factor produced by the step from ``n`` to ``n + 1``. The span of the
leading columns of ``Q[n]`` approximates the leading Lyapunov subspace, and
``P_n = Q[n] Q[n]^T`` is the non-stable projector used by the assimilation.
"""

from dataclasses import dataclass

import numpy as np

from ._csv import write_rows
from .errors import FrameRankError, RankDeficientError
from .linalg import mgs_qr


@dataclass(frozen=True, eq=False)
class TangentFrame:
    """Orthonormal frames ``Q`` (``(N+1, d, p)``) and factors ``R`` (``(N, p, p)``)."""

    Q: np.ndarray
    R: np.ndarray

    @property
    def p(self):
        return self.Q.shape[2]

    @property
    def n_steps(self):
        return self.R.shape[0]

    def project(self, n, v):
        """Apply ``P_n`` to a vector without forming the matrix."""
        Qn = self.Q[n]
        return Qn @ (Qn.T @ v)

    def project_all(self, V):
        """Apply ``P_n`` to ``V[n]`` for every ``n``."""
        coef = np.einsum("ndp,nd->np", self.Q, V)
        return np.einsum("ndp,np->nd", self.Q, coef)

    def projector(self, n):
        """Materialized ``d x d`` projector ``P_n``."""
        return self.Q[n] @ self.Q[n].T


def propagate_frames(model, traj, Q0, reorthogonalize=False, jacobians=None):
    """Carry the orthonormal basis ``Q0`` along ``traj`` by repeated thin QR.

    Parameters
    ----------
    model : ModelSystem
    traj : array, shape (N + 1, d)
    Q0 : array, shape (d, p)
        Column-orthonormal starting frame.
    jacobians : array, shape (N, d, d), optional
        Precomputed ``DF(traj[n])``; computed here when omitted.

    Raises
    ------
    FrameRankError
        If ``DF Q`` loses rank at some step.
    """
    traj = np.asarray(traj, dtype=float)
    Q0 = np.asarray(Q0, dtype=float)
    N = traj.shape[0] - 1
    if jacobians is None:
        jacobians = model.jacobian(traj[:-1])
    d, p = Q0.shape
    Q = np.empty((N + 1, d, p))
    R = np.empty((N, p, p))
    Q[0] = Q0
    for n in range(N):
        try:
            Q[n + 1], R[n] = mgs_qr(jacobians[n] @ Q[n], reorthogonalize)
        except RankDeficientError as exc:
            raise FrameRankError(n, exc.column) from None
    return TangentFrame(Q, R)


def fixed_frame(model, traj, basis, jacobians=None):
    """Frame with a constant basis (e.g. a coordinate selector).

    The coupling blocks are ``R[n] = B^T DF(u_n) B``; they are not triangular in
    general, and the basis is not an invariant subspace.
    """
    traj = np.asarray(traj, dtype=float)
    B = np.asarray(basis, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    N = traj.shape[0] - 1
    if jacobians is None:
        jacobians = model.jacobian(traj[:-1])
    R = B.T @ jacobians @ B
    Q = np.broadcast_to(B, (N + 1,) + B.shape).copy()
    return TangentFrame(Q, R)


def lyapunov_exponents(frame: TangentFrame, dt_map=1.0):
    """Time averaged log of ``diag(R)``, per unit model time."""
    diag = np.diagonal(frame.R, axis1=1, axis2=2)
    return np.log(diag).sum(axis=0) / (frame.n_steps * dt_map)


def running_exponents(frame: TangentFrame, dt_map=1.0):
    """Cumulative exponent estimates after each step, shape ``(N, p)``."""
    logs = np.log(np.diagonal(frame.R, axis1=1, axis2=2))
    steps = np.arange(1, frame.n_steps + 1)[:, None]
    return np.cumsum(logs, axis=0) / (steps * dt_map)


def seed_basis(d, p):
    """First ``p`` columns of the identity."""
    return np.eye(d)[:, :p].copy()


def spin_up_frame(model, pre_traj, p, n_spin, seed=None, reorthogonalize=False):
    """Warm up a ``d x p`` frame along the last ``n_spin`` steps of ``pre_traj``.

    The frame arrives at the final state of ``pre_traj``. With ``n_spin = 0``
    the seed basis is returned unchanged.
    """
    pre_traj = np.asarray(pre_traj, dtype=float)
    d = pre_traj.shape[1]
    Q0 = seed_basis(d, p) if seed is None else np.asarray(seed, dtype=float)
    if n_spin == 0:
        return Q0.copy()
    if n_spin > pre_traj.shape[0] - 1:
        raise ValueError(f"pre-trajectory has {pre_traj.shape[0] - 1} steps, need {n_spin}")
    frame = propagate_frames(model, pre_traj[-(n_spin + 1) :], Q0, reorthogonalize)
    return frame.Q[-1]


def subspace_angle(A, B):
    """Largest principal angle (radians) between the column spans of A and B."""
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1.0, 1.0)))


def write_exponent_csv(path, frame: TangentFrame, dt_map=1.0, start=0, tags=None):
    """Dump ``diag(R_n)`` and running exponent estimates, one row per step."""
    diag = np.diagonal(frame.R, axis1=1, axis2=2)
    run = running_exponents(frame, dt_map)
    p = frame.p
    header = ["time_index"] + [f"r{i + 1}" for i in range(p)] + [f"lambda{i + 1}" for i in range(p)]
    rows = ([start + n + 1] + list(diag[n]) + list(run[n]) for n in range(frame.n_steps))
    write_rows(path, header, rows, tags)
