"""Shadowing refinement of pseudo-orbits.

The unknown is a whole trajectory ``u = (u_0, ..., u_N)``. Its defect is the
stacked residual ``G_n(u) = u_{n+1} - F(u_n)``; zeros of ``G`` are model orbits.

* :func:`full_newton` applies Newton's method to ``G(u) = 0`` with the
  minimum-norm (right pseudoinverse) update. The Gram matrix ``G' G'^T`` is
  block tridiagonal with diagonal ``DF_n DF_n^T + I`` and off-diagonal
  ``-DF_{n+1}^T``.
* :func:`projected_newton_step` solves the same problem restricted to the
  span of the tangent frames, in ``p``-dimensional coordinates.
* :func:`synchronize_stable` rebuilds the stable complement by a forward
  pass in which the model is driven by the corrected non-stable component.
* :func:`window_driver` chains windows: full Newton on the first one, then
  projected Newton with continuity of the stable component across boundaries.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    DivergenceError,
    FactorizationError,
    FrameRankError,
    ParameterUnidentifiableError,
    ShadowDAError,
    SingularUpdateError,
    SyncDivergenceError,
)
from .linalg import BlockTridiagonalSPD, smw_solve
from .tangent import TangentFrame, fixed_frame, propagate_frames, seed_basis, spin_up_frame

log = logging.getLogger(__name__)

SYNC_MODES = ("interleaved", "deferred")


@dataclass(frozen=True)
class NewtonSettings:
    """Iteration controls shared by the full and projected solvers.

    ``tol`` is the target for ``||b||_2 / ||u||_2`` (``b`` is the full
    residual for full Newton, the projected one otherwise). Rounding can keep
    long windows from ever reaching ``tol``; once the ratio is below
    ``floor_tol`` and stops improving (or the iteration cap is hit) the window
    is accepted and flagged ``floor_accepted``.
    """

    tol: float = 1e-15
    max_iter: int = 50
    p: Optional[int] = None
    sync_mode: str = "interleaved"
    floor_tol: float = 1e-12
    reorthogonalize: bool = False
    divergence_factor: float = 1e6
    auto_restart: bool = False
    n_spin: Optional[int] = None

    def __post_init__(self):
        if not self.tol > 0 or not self.floor_tol > 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.p is not None and self.p < 1:
            raise ValueError("p must be >= 1")
        if self.sync_mode not in SYNC_MODES:
            raise ValueError(f"sync_mode must be one of {SYNC_MODES}")

    def projection_dim(self, d):
        p = d if self.p is None else self.p
        if not 1 <= p <= d:
            raise ValueError(f"projection dimension {p} outside [1, {d}]")
        return p


@dataclass(frozen=True)
class WindowSchedule:
    """First window of length ``tau1``, then windows of ``dtau`` up to ``T``."""

    tau1: float
    dtau: float
    T: float
    dt_map: float

    def __post_init__(self):
        if not (self.tau1 > 0 and self.dtau > 0 and self.T > 0 and self.dt_map > 0):
            raise ValueError("window lengths and dt_map must be positive")
        for name in ("tau1", "dtau", "T"):
            _steps(getattr(self, name), self.dt_map, name)
        if self.tau1 < self.T:
            m = (self.T - self.tau1) / self.dtau
            if abs(m - round(m)) > 1e-9:
                raise ValueError("T - tau1 must be an integer multiple of dtau")

    @property
    def n_steps(self):
        return _steps(self.T, self.dt_map, "T")

    def boundaries(self):
        """Map-step indices ``0 = n_0 < n_1 < ... < n_{M+1} = N``."""
        N = self.n_steps
        first = min(_steps(self.tau1, self.dt_map, "tau1"), N)
        step = _steps(self.dtau, self.dt_map, "dtau")
        out = [0, first]
        while out[-1] < N:
            out.append(min(out[-1] + step, N))
        return out

    def windows(self):
        b = self.boundaries()
        return list(zip(b[:-1], b[1:]))


def _steps(length, dt, name):
    k = length / dt
    if abs(k - round(k)) > 1e-6 or round(k) < 1:
        raise ValueError(f"{name}={length} is not a positive multiple of dt_map={dt}")
    return int(round(k))


@dataclass
class WindowDiagnostics:
    index: int
    start: int
    stop: int
    method: str
    iterations: int = 0
    converged: bool = False
    floor_accepted: bool = False
    residual_history: list = field(default_factory=list)
    message: str = ""


@dataclass(frozen=True, eq=False)
class AssimilationReport:
    """Estimate trajectory plus per-window diagnostics and optional scores."""

    estimate: np.ndarray
    windows: tuple
    scores: Optional[object] = None
    params: Optional[np.ndarray] = None

    @property
    def iterations(self):
        return [w.iterations for w in self.windows]

    @property
    def converged(self):
        return all(w.converged for w in self.windows)

    @property
    def failed_windows(self):
        return [w.index for w in self.windows if not w.converged]

    def mean_iterations(self, method=None):
        its = [w.iterations for w in self.windows if method is None or w.method == method]
        return float(np.mean(its)) if its else float("nan")

    def with_scores(self, scores):
        return replace(self, scores=scores)


class ProjectedStep(NamedTuple):
    ubar: np.ndarray
    mu: np.ndarray
    b: np.ndarray


def residual(model, u, params=None):
    """Stacked one-step defects ``u[n+1] - F(u[n])``, shape ``(N, d)``."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[0] < 2:
        raise ValueError("trajectory must have shape (N + 1, d) with N >= 1")
    return u[1:] - model.step(u[:-1], params)


def _check_convergence(hist, settings):
    """Return (stop, converged, floor_accepted) for the ratio history."""
    r = hist[-1]
    if not math.isfinite(r):
        return True, False, False
    if r < settings.tol:
        return True, True, False
    if r < settings.floor_tol and len(hist) >= 2 and r > 0.5 * hist[-2]:
        return True, True, True
    if len(hist) >= 2 and r > settings.divergence_factor * max(hist[0], 1e-300):
        return True, False, False
    return False, False, False


def _gram(J):
    """Block tridiagonal ``A A^T`` for ``A`` with block rows ``[-J_n, I]``."""
    m = J.shape[1]
    return BlockTridiagonalSPD(J @ np.swapaxes(J, 1, 2) + np.eye(m), -np.swapaxes(J[1:], 1, 2))


def _apply_adjoint(J, y):
    """``A^T y`` for ``A`` with block rows ``[-J_n, I]``: shape ``(N + 1, m)``."""
    N, m = y.shape
    out = np.zeros((N + 1, m))
    out[:-1] -= np.einsum("nij,ni->nj", J, y)
    out[1:] += y
    return out


def newton_core(model, u0, settings, free=None, time_dependent=False, index=0, start=0):
    """Newton iteration on ``G(u; alpha) = 0`` with optional free parameters.

    Returns ``(u, params, diagnostics)``. ``params`` is the full parameter
    array of the model (shape ``(q_all,)``, or ``(N, q_all)`` when
    ``time_dependent``). With no free parameters this is plain full Newton.
    """
    u = np.array(u0, dtype=float)
    N = u.shape[0] - 1
    cols = model.param_index(free) if free is not None else []
    params = model.params.copy()
    if time_dependent:
        params = np.broadcast_to(params, (N,) + params.shape[-1:]).copy()
    diag = WindowDiagnostics(index, start, start + N, "full_newton")
    last_good = (u.copy(), params.copy())
    for k in range(settings.max_iter):
        diag.iterations = k + 1
        try:
            Fu, J, S = model.linearize(u[:-1], params, cols if cols else None)
        except DivergenceError as exc:
            diag.message = f"divergence: {exc}"
            break
        r = u[1:] - Fu
        diag.residual_history.append(float(np.linalg.norm(r) / np.linalg.norm(u)))
        stop, ok, floor = _check_convergence(diag.residual_history, settings)
        if stop:
            diag.converged, diag.floor_accepted = ok, floor
            if not ok:
                diag.message = "residual diverged"
            break
        last_good = (u.copy(), params.copy())
        M = _gram(J)
        try:
            if cols and time_dependent:
                M = BlockTridiagonalSPD(M.diag + S @ np.swapaxes(S, 1, 2), M.upper)
                y = M.factor().solve(-r.ravel()).reshape(N, -1)
                params[:, cols] -= np.einsum("nij,ni->nj", S, y)
            else:
                U = -S.reshape(N * model.dimension, -1) if cols else np.zeros((r.size, 0))
                y = smw_solve(M, U, -r.ravel())
                if cols:
                    params[cols] += U.T @ y
                y = y.reshape(N, -1)
        except FactorizationError as exc:
            diag.message = f"solver failure: {exc}"
            break
        except SingularUpdateError as exc:
            raise ParameterUnidentifiableError(str(exc)) from None
        u = u + _apply_adjoint(J, y)
        if not np.all(np.isfinite(u)):
            diag.message = "non-finite update"
            u, params = last_good
            break
    else:
        _accept_at_cap(diag, settings)
    if not np.all(np.isfinite(u)):
        u, params = last_good
    return u, params, diag


def _accept_at_cap(diag, settings):
    if diag.residual_history and diag.residual_history[-1] < settings.floor_tol:
        diag.converged = True
        diag.floor_accepted = True
        log.warning("window %d: tolerance %.1e not reached, accepted at %.2e",
                    diag.index, settings.tol, diag.residual_history[-1])
    else:
        diag.message = diag.message or "max iterations reached"


def full_newton(model, u0, settings=None):
    """Refine ``u0`` to a model orbit with the full Newton method."""
    settings = settings or NewtonSettings()
    u, _, diag = newton_core(model, u0, settings)
    return AssimilationReport(u, (diag,))


def reduced_residual(frame: TangentFrame, r):
    """``b_n = Q_{n+1}^T r_n``, shape ``(N, p)``."""
    return np.einsum("ndp,nd->np", frame.Q[1:], r)


def projected_newton_step(model, u, frame: TangentFrame, r=None):
    """One Newton step restricted to the frame span.

    Solves ``G~' mu = -b`` with the right pseudoinverse, where ``G~'`` has
    block rows ``[-R[n], I_p]``, and returns ``ubar_n = u_n + Q_n mu_n``.

    Raises
    ------
    FactorizationError
        If the reduced Gram matrix cannot be factored.
    """
    u = np.asarray(u, dtype=float)
    if r is None:
        r = residual(model, u)
    b = reduced_residual(frame, r)
    y = _gram(frame.R).factor().solve(-b.ravel()).reshape(b.shape)
    mu = _apply_adjoint(frame.R, y)
    ubar = u + np.einsum("ndp,np->nd", frame.Q, mu)
    return ProjectedStep(ubar, mu, b)


def synchronize_stable(model, ubar, frame: TangentFrame, delta0=None, divergence_factor=1e6):
    """Forward pass ``u_{n+1} = P_{n+1} ubar_{n+1} + (I - P_{n+1}) F(u_n)``.

    Starts from ``u_0 = ubar_0 + (I - P_0) delta0``; ``delta0`` is re-projected
    here, so any component in the frame span is discarded.

    Raises
    ------
    SyncDivergenceError
        If the pass produces non-finite states or grows beyond
        ``divergence_factor`` times the scale of ``ubar``.
    """
    ubar = np.asarray(ubar, dtype=float)
    N, d = ubar.shape[0] - 1, ubar.shape[1]
    Q = frame.Q
    if frame.p == d:
        return ubar.copy()
    u = np.empty_like(ubar)
    u[0] = ubar[0]
    if delta0 is not None:
        delta0 = np.asarray(delta0, dtype=float)
        u[0] += delta0 - Q[0] @ (Q[0].T @ delta0)
    limit = divergence_factor * max(1.0, float(np.abs(ubar).max()))
    for n in range(N):
        try:
            v = model.step(u[n]) - ubar[n + 1]
        except DivergenceError:
            raise SyncDivergenceError("synchronization diverged", step=n + 1) from None
        Qn = Q[n + 1]
        u[n + 1] = ubar[n + 1] + v - Qn @ (Qn.T @ v)
        if not np.abs(u[n + 1]).max() < limit:
            raise SyncDivergenceError("synchronization diverged", step=n + 1)
    return u


def _frame_for(model, u, Q0, settings, basis):
    if basis is not None:
        return fixed_frame(model, u, basis)
    return propagate_frames(model, u, Q0, settings.reorthogonalize)


def _stable_offset(frame, anchor, u0):
    if anchor is None:
        return None
    return np.asarray(anchor, dtype=float) - u0


@dataclass(frozen=True, eq=False)
class WindowResult:
    estimate: np.ndarray
    frame: Optional[TangentFrame]
    diagnostics: WindowDiagnostics


def assimilate_window(model, u_init, settings=None, Q0=None, anchor=None, basis=None,
                      index=0, start=0):
    """Projected Newton plus stable synchronization on a single window.

    Each outer iteration (1) propagates frames from ``Q0`` along the current
    iterate, (2) takes one projected Newton step, and (3) runs the
    synchronization pass. With ``sync_mode="deferred"`` step (2) is repeated
    until the projected residual converges before synchronizing.

    ``anchor`` is the terminal state of the previous window: the stable
    component of the new initial state is tied to it through
    ``(I - P_0)(anchor - u_0)``. ``basis`` replaces the Lyapunov frames by a
    fixed basis (for instance a coordinate selector).

    Failures (non-convergence, factorization breakdown, divergence) are
    reported in the diagnostics together with the last finite iterate.
    """
    settings = settings or NewtonSettings()
    u = np.array(u_init, dtype=float)
    d = u.shape[1]
    if basis is None:
        p = settings.projection_dim(d)
        Q0 = seed_basis(d, p) if Q0 is None else np.asarray(Q0, dtype=float)
    N = u.shape[0] - 1
    diag = WindowDiagnostics(index, start, start + N, "projected")
    frame = None
    try:
        while diag.iterations < settings.max_iter:
            frame = _frame_for(model, u, Q0, settings, basis)
            r = residual(model, u)
            b = reduced_residual(frame, r)
            diag.iterations += 1
            diag.residual_history.append(float(np.linalg.norm(b) / np.linalg.norm(u)))
            stop, ok, floor = _check_convergence(diag.residual_history, settings)
            if stop:
                diag.converged, diag.floor_accepted = ok, floor
                if not ok:
                    diag.message = "residual diverged"
                break
            step = projected_newton_step(model, u, frame, r)
            ubar = step.ubar
            if settings.sync_mode == "deferred":
                ubar, frame = _inner_projected(model, ubar, Q0, settings, basis, diag)
            u_new = synchronize_stable(
                model, ubar, frame, _stable_offset(frame, anchor, u[0]), settings.divergence_factor
            )
            u = u_new
        else:
            _accept_at_cap(diag, settings)
    except (FactorizationError, FrameRankError, DivergenceError, ShadowDAError) as exc:
        diag.converged = False
        diag.message = f"{type(exc).__name__}: {exc}"
    return WindowResult(u, frame, diag)


def _inner_projected(model, ubar, Q0, settings, basis, diag):
    """Iterate projected steps on ``ubar`` until the projected residual settles."""
    hist = []
    frame = _frame_for(model, ubar, Q0, settings, basis)
    while diag.iterations < settings.max_iter:
        r = residual(model, ubar)
        b = reduced_residual(frame, r)
        hist.append(float(np.linalg.norm(b) / np.linalg.norm(ubar)))
        stop, _, _ = _check_convergence(hist, settings)
        if stop:
            break
        diag.iterations += 1
        ubar = projected_newton_step(model, ubar, frame, r).ubar
        frame = _frame_for(model, ubar, Q0, settings, basis)
    return ubar, frame


def window_driver(model, obs_proxy, schedule: WindowSchedule, settings=None, basis=None):
    """Sequential assimilation over the windows of ``schedule``.

    The first window is smoothed by full Newton; a frame is spun up along its
    estimate. Every later window runs :func:`assimilate_window` from the
    observation proxy, anchored to the previous window's terminal state, with
    the frame carried over from the previous window. Adjacent windows share
    their boundary index; the later window's value is kept.

    A failed window is flagged; the next window then starts from the proxy
    alone (no anchor), or from full Newton if ``settings.auto_restart``.
    """
    settings = settings or NewtonSettings()
    proxy = np.asarray(obs_proxy, dtype=float)
    N, d = proxy.shape[0] - 1, proxy.shape[1]
    if schedule.n_steps != N:
        raise ValueError(f"proxy has {N} steps but the schedule covers {schedule.n_steps}")
    p = d if basis is not None else settings.projection_dim(d)
    est = proxy.copy()
    diags = []
    anchor = None
    Q0 = None
    restart = True
    for m, (a, b) in enumerate(schedule.windows()):
        u_init = proxy[a : b + 1]
        if restart:
            u_w, _, diag = newton_core(model, u_init, settings, index=m, start=a)
            ok = diag.converged
            if basis is None:
                n_spin = b - a if settings.n_spin is None else min(settings.n_spin, b - a)
                try:
                    Q0 = spin_up_frame(model, u_w, p, n_spin, reorthogonalize=settings.reorthogonalize)
                except FrameRankError:
                    Q0 = seed_basis(d, p)
        else:
            res = assimilate_window(model, u_init, settings, Q0, anchor, basis, index=m, start=a)
            u_w, diag, ok = res.estimate, res.diagnostics, res.diagnostics.converged
            if ok and res.frame is not None and basis is None:
                Q0 = res.frame.Q[-1]
        diags.append(diag)
        if not np.all(np.isfinite(u_w)):
            u_w = u_init
        est[a : b + 1] = u_w
        if ok:
            anchor = u_w[-1]
            restart = False
        else:
            log.warning("window %d [%d, %d] failed: %s", m, a, b, diag.message)
            anchor = None
            restart = settings.auto_restart
            if basis is None and not restart:
                try:
                    Q0 = spin_up_frame(model, u_w, p, b - a, seed=Q0 if Q0 is not None else None)
                except FrameRankError:
                    Q0 = seed_basis(d, p)
    return AssimilationReport(est, tuple(diags))
