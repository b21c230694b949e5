"""Strong-constraint 4DVar baseline.

For one window the control is the initial state ``u_0`` (optionally with
model parameters appended). The cost

    C(u_0) = sum_n (y_n - H u_n)^T E^{-1} (y_n - H u_n),   u_{n+1} = F(u_n),

is summed over every observation time in the window, including ``n = 0``.
There is no background term. The gradient comes from one backward adjoint
sweep through the integrator substeps, and the minimizer is Polak-Ribiere+
nonlinear conjugate gradients with an Armijo backtracking line search.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .assimilate import AssimilationReport, WindowDiagnostics, WindowSchedule

log = logging.getLogger(__name__)

ROUNDING = 1e-13


@dataclass(frozen=True, eq=False)
class WindowObs:
    """Observations of one window: ``values[k]`` is taken at step ``times[k]``."""

    values: np.ndarray
    times: np.ndarray
    n_steps: int
    H: np.ndarray
    Einv: np.ndarray

    @classmethod
    def every_step(cls, values, H=None, Einv=None):
        """Observations at every map step of a window of ``len(values) - 1`` steps."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        b = values.shape[1]
        H = np.eye(b) if H is None else np.atleast_2d(np.asarray(H, dtype=float))
        Einv = np.eye(H.shape[0]) if Einv is None else np.atleast_2d(np.asarray(Einv, dtype=float))
        n = values.shape[0]
        return cls(values, np.arange(n), n - 1, H, Einv)


class CostGradient(NamedTuple):
    cost: float
    grad: np.ndarray

    @property
    def diverged(self):
        return not np.isfinite(self.cost)


class VarCost:
    """Cost and adjoint gradient over one window.

    With ``free`` parameters the control vector is ``[u_0, alpha_free]`` and the
    gradient gains the parameter sensitivities.
    """

    def __init__(self, model, wobs: WindowObs, free=None):
        self.model = model
        self.wobs = wobs
        self.cols = model.param_index(free) if free is not None else []
        self.d = model.dimension
        self.n_control = self.d + len(self.cols)
        # weights per observation time
        self._HtE = wobs.H.T @ wobs.Einv
        self._obs_at = {int(t): k for k, t in enumerate(wobs.times)}

    def _params(self, c):
        if not self.cols:
            return self.model.params
        p = self.model.params.copy()
        p[self.cols] = c[self.d :]
        return p

    def _forward(self, u0, params):
        """Substep states, shape ``(n_steps * s + 1, d)``; ``None`` on divergence."""
        xs = self.model.substep_orbit(u0, self.wobs.n_steps, params)
        if not np.all(np.isfinite(xs)):
            return None
        return xs

    def orbit(self, c):
        """Map-step orbit from the control vector."""
        c = np.asarray(c, dtype=float)
        xs = self._forward(c[: self.d], self._params(c))
        if xs is None:
            return None
        return xs[:: self.model.substeps]

    def __call__(self, c, need_grad=True):
        c = np.asarray(c, dtype=float)
        params = self._params(c)
        xs = self._forward(c[: self.d], params)
        if xs is None:
            return CostGradient(np.inf, np.full(self.n_control, np.nan))
        s = self.model.substeps
        w = self.wobs
        u = xs[::s][w.times]
        r = u @ w.H.T - w.values
        cost = float(np.einsum("ki,ij,kj->", r, w.Einv, r))
        if not need_grad:
            return CostGradient(cost, None)
        forcing = 2.0 * r @ self._HtE.T
        J, P = self.model.substep_jacobians(xs[:-1], params, self.cols if self.cols else None)
        lam = np.zeros(self.d)
        g_alpha = np.zeros(len(self.cols))
        for k in range(xs.shape[0] - 1, -1, -1):
            if k % s == 0:
                obs = self._obs_at.get(k // s)
                if obs is not None:
                    lam = lam + forcing[obs]
            if k == 0:
                break
            if P is not None:
                g_alpha += lam @ P[k - 1]
            lam = lam @ J[k - 1]
        return CostGradient(cost, np.concatenate([lam, g_alpha]))


def cost_and_gradient(model, u0, wobs: WindowObs, free=None):
    """Cost and gradient at ``u0`` (or ``[u0, alpha]`` with ``free``).

    A divergent forward orbit gives ``cost = inf`` and a NaN gradient; check
    ``result.diverged``.
    """
    return VarCost(model, wobs, free)(u0)


@dataclass(frozen=True)
class CGSettings:
    gtol: float = 1e-8
    max_iter: int = 2000
    armijo: float = 1e-4
    wolfe_approx: float = 0.1
    curvature: float = 0.9
    shrink: float = 0.5
    max_backtrack: int = 60
    restart: Optional[int] = None


class CGResult(NamedTuple):
    x: np.ndarray
    iterations: int
    cost: float
    converged: bool
    message: str = ""


def _stationary(g, x, gtol):
    return np.linalg.norm(g) / max(1.0, np.linalg.norm(x)) < gtol


def _acceptable(f, slope, a, fa, da, st):
    """Armijo, or its derivative form once cost differences hit rounding."""
    if not np.isfinite(fa):
        return False
    if f - fa >= -st.armijo * a * slope:
        return True
    # approximate Wolfe: the cost change is within rounding, trust the slopes
    flat = abs(f - fa) <= ROUNDING * abs(f)
    return flat and st.curvature * slope <= da <= (1.0 - 2.0 * st.wolfe_approx) * -slope


def _line_search(fun, x, f, d, slope, a0, st):
    """Return ``(step, cost, grad)`` or ``None``.

    The trial ``a0`` gives a directional derivative; the secant through it and
    ``slope`` is the exact minimizer for a quadratic and is tried next.
    """
    fa, ga = fun(x + a0 * d)
    tried = []
    if np.isfinite(fa):
        da = ga @ d
        tried.append((a0, fa, ga, da))
        a1 = a0 * slope / (slope - da) if da > slope else 2.0 * a0
    else:
        a1 = a0 * st.shrink
    a1 = min(max(a1, 1e-3 * a0), 1e3 * a0)
    for _ in range(st.max_backtrack):
        f1, g1 = fun(x + a1 * d)
        if np.isfinite(f1):
            tried.insert(0, (a1, f1, g1, g1 @ d))
            if _acceptable(f, slope, a1, f1, g1 @ d, st):
                break
        ok = [t for t in tried if _acceptable(f, slope, t[0], t[1], t[3], st)]
        if ok:
            break
        a1 *= st.shrink
    ok = [t for t in tried if _acceptable(f, slope, t[0], t[1], t[3], st)]
    if not ok:
        return None
    a, fa, ga, _ = min(ok, key=lambda t: t[1])
    return a, fa, ga


def minimize_cg(fun, x0, settings: CGSettings = None, callback=None):
    """Polak-Ribiere+ conjugate gradients with a backtracking line search.

    ``fun(x)`` returns ``(cost, grad)``. Each line search tries a step scaled
    from the previous iteration, then the secant minimizer built from the two
    directional derivatives, halving until the Armijo condition holds. When
    cost differences drop to rounding level the approximate Wolfe condition
    (derivative based) is accepted instead, so the cost is non-increasing up to
    a relative ``ROUNDING``. The
    direction is reset to steepest descent every ``restart`` iterations
    (default: the problem dimension) and whenever it fails to descend.
    ``callback(x, cost)`` is called after every accepted step.
    """
    st = settings or CGSettings()
    x = np.array(x0, dtype=float)
    restart = st.restart or x.size
    f, g = fun(x)
    if not np.isfinite(f):
        return CGResult(x, 0, f, False, "non-finite cost at the initial guess")
    d = -g
    prev = None
    k = 0
    while k < st.max_iter:
        if _stationary(g, x, st.gtol):
            return CGResult(x, k, f, True)
        slope = g @ d
        if not slope < 0:
            d = -g
            slope = -(g @ g)
        a0 = 1.0 / max(np.linalg.norm(d), 1e-300) if prev is None else prev[0] * prev[1] / slope
        found = _line_search(fun, x, f, d, slope, a0, st)
        if found is None:
            return CGResult(x, k, f, False, "line search failed")
        a, f_new, g_new = found
        k += 1
        beta = 0.0 if k % restart == 0 else max(0.0, g_new @ (g_new - g) / (g @ g))
        prev = (a, slope)
        x, f, g = x + a * d, f_new, g_new
        if callback is not None:
            callback(x, f)
        d = -g + beta * d
    done = _stationary(g, x, st.gtol)
    return CGResult(x, k, f, done, "" if done else "iteration cap")


def fourdvar_window(model, wobs: WindowObs, c0, settings=None, free=None):
    """Minimize one window; returns ``(CGResult, orbit)``."""
    vc = VarCost(model, wobs, free)
    res = minimize_cg(vc, c0, settings)
    return res, vc.orbit(res.x)


def fourdvar_driver(model, obs, schedule: WindowSchedule, settings=None, H=None, Einv=None,
                    free=None, alpha0=None):
    """Sequential 4DVar over the windows of ``schedule``.

    ``obs`` holds one observation per map step, shape ``(N + 1, b)``. The first
    window starts from the first observation (full-state data required), every
    later one from the previous window's terminal state. With ``free`` the
    parameters are estimated jointly; each window starts from the previous
    window's estimate and ``report.params`` is the mean over windows.
    """
    obs = np.asarray(obs, dtype=float)
    N = obs.shape[0] - 1
    d = model.dimension
    if schedule.n_steps != N:
        raise ValueError(f"observations cover {N} steps but the schedule covers {schedule.n_steps}")
    if H is None and obs.shape[1] != d:
        raise ValueError("the first guess needs full-state observations")
    cols = model.param_index(free) if free is not None else []
    alpha = model.params[cols].copy() if alpha0 is None else np.asarray(alpha0, dtype=float).reshape(len(cols))
    est = np.empty((N + 1, d))
    guess = obs[0] if H is None else obs[0] @ np.atleast_2d(H)
    diags, alphas = [], []
    for m, (a, b) in enumerate(schedule.windows()):
        wobs = WindowObs.every_step(obs[a : b + 1], H, Einv)
        res, orbit = fourdvar_window(model, wobs, np.concatenate([guess, alpha]), settings, free)
        diag = WindowDiagnostics(m, a, b, "4dvar", res.iterations, res.converged, message=res.message)
        diags.append(diag)
        if orbit is None:
            log.warning("4dvar window %d [%d, %d] diverged", m, a, b)
            diag.converged = False
            diag.message = diag.message or "forward orbit diverged"
            orbit = np.broadcast_to(guess, (b - a + 1, d))
        elif not res.converged:
            log.warning("4dvar window %d [%d, %d]: %s", m, a, b, res.message)
        est[a : b + 1] = orbit
        if cols:
            alpha = res.x[d:]
            alphas.append(alpha.copy())
        guess = orbit[-1].copy()
    params = np.mean(alphas, axis=0) if cols else None
    return AssimilationReport(est, tuple(diags), params=params)
