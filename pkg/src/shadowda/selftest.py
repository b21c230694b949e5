"""Fast invariant checks behind ``shadow-da selftest``.

Each check compares a package routine with an independent dense computation
on a small random instance and returns ``(name, passed, error)``.
"""

import numpy as np

from .assimilate import NewtonSettings, full_newton, projected_newton_step, residual, synchronize_stable
from .baseline4dvar import WindowObs, cost_and_gradient
from .linalg import BlockTridiagonalSPD, mgs_qr, smw_solve
from .models import lorenz63, lorenz96
from .tangent import propagate_frames, seed_basis


def _spd_blocks(rng, N, m):
    J = rng.standard_normal((N, m, m))
    diag = J @ np.swapaxes(J, 1, 2) + np.eye(m)
    upper = -np.swapaxes(J[1:], 1, 2)
    return BlockTridiagonalSPD(diag, upper)


def check_tangent(rng):
    m = lorenz96(8, substeps=3)
    x = 3 * rng.standard_normal(8)
    v = rng.standard_normal(8)
    h = 1e-6
    fd = (m.step(x + h * v) - m.step(x - h * v)) / (2 * h)
    err = np.linalg.norm(m.jacobian(x) @ v - fd) / np.linalg.norm(fd)
    return "tangent vs central differences", err < 1e-6, err


def check_adjoint(rng):
    m = lorenz63(substeps=4)
    x = 5 * rng.standard_normal(3)
    v, w = rng.standard_normal(3), rng.standard_normal(3)
    lhs = (m.jacobian(x) @ v) @ w
    err = abs(lhs - v @ m.adjoint(x, w)) / abs(lhs)
    return "adjoint dot-product identity", err < 1e-12, err


def check_qr(rng):
    A = rng.standard_normal((12, 5))
    Q, R = mgs_qr(A)
    err = max(np.abs(Q @ R - A).max(), np.abs(Q.T @ Q - np.eye(5)).max())
    return "mgs_qr reconstruction and orthogonality", err < 1e-10, err


def check_block_solve(rng):
    M = _spd_blocks(rng, 6, 3)
    b = rng.standard_normal(18)
    x = M.factor().solve(b)
    err = np.abs(x - np.linalg.solve(M.to_dense(), b)).max()
    return "block tridiagonal solve vs dense", err < 1e-9, err


def check_smw(rng):
    M = _spd_blocks(rng, 5, 3)
    U = rng.standard_normal((15, 2))
    b = rng.standard_normal(15)
    x = smw_solve(M, U, b)
    err = np.abs(x - np.linalg.solve(M.to_dense() + U @ U.T, b)).max()
    return "Sherman-Morrison-Woodbury vs dense", err < 1e-9, err


def check_full_rank_projection(rng):
    m = lorenz63()
    u = m.integrate(m.integrate(rng.standard_normal(3), 1000)[-1], 40)
    u = u + 0.01 * rng.standard_normal(u.shape)
    frame = propagate_frames(m, u, seed_basis(3, 3))
    ubar = projected_newton_step(m, u, frame).ubar
    full = full_newton(m, u, NewtonSettings(max_iter=1)).estimate
    err = np.abs(ubar - full).max()
    return "projected step with p = d equals full Newton step", err < 1e-8, err


def check_sync_noop(rng):
    m = lorenz63()
    x = m.integrate(m.integrate(rng.standard_normal(3), 1000)[-1], 30)
    frame = propagate_frames(m, x, seed_basis(3, 2))
    # pseudo-orbit whose defects F(u_n) - u_{n+1} lie in span Q_{n+1}
    ubar = x.copy()
    for n in range(30):
        ubar[n + 1] = m.step(ubar[n]) + frame.project(n + 1, 1e-3 * rng.standard_normal(3))
    out = synchronize_stable(m, ubar, frame)
    err = np.abs(out - ubar).max()
    return "sync pass is a no-op for non-stable defects", err < 1e-10, err


def check_4dvar_gradient(rng):
    m = lorenz96(8, substeps=2)
    x0 = m.integrate(3 * rng.standard_normal(8), 200)[-1]
    y = m.integrate(x0, 10) + 0.3 * rng.standard_normal((11, 8))
    w = WindowObs.every_step(y)
    u0 = x0 + 0.1 * rng.standard_normal(8)
    v = rng.standard_normal(8)
    _, g = cost_and_gradient(m, u0, w)
    h = 1e-6
    fd = (cost_and_gradient(m, u0 + h * v, w).cost - cost_and_gradient(m, u0 - h * v, w).cost) / (2 * h)
    err = abs(fd - g @ v) / abs(fd)
    return "4DVar adjoint gradient vs central differences", err < 1e-6, err


def check_orbit_residual(rng):
    m = lorenz63()
    x = m.integrate(rng.standard_normal(3), 100)
    err = np.abs(residual(m, x)).max()
    return "integrated orbit has zero residual", err < 1e-13, err


CHECKS = (
    check_tangent,
    check_adjoint,
    check_qr,
    check_block_solve,
    check_smw,
    check_full_rank_projection,
    check_sync_noop,
    check_4dvar_gradient,
    check_orbit_residual,
)


def run_selftest(seed=0, verbose=False):
    rng = np.random.default_rng(seed)
    ok = True
    for check in CHECKS:
        name, passed, err = check(rng)
        ok &= bool(passed)
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}  (error {err:.2e})")
    return ok
