"""Discrete dynamical models with tangent and adjoint linearizations.

A :class:`ModelSystem` wraps an ODE right-hand side ``f(x; alpha)`` and turns it
into a map ``F`` that applies ``substeps`` steps of a fixed-step integrator.
Everything is vectorized over leading axes: a batch of states with shape
``(..., d)`` maps to ``(..., d)``, Jacobians come back as ``(..., d, d)``.

Trajectories throughout the package are plain arrays of shape ``(N + 1, d)``.
"""

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, InvalidModelError

SCHEMES = ("euler", "rk4")


def l63_vector_field(x, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    """Lorenz 63 right-hand side."""
    return _l63_field(np.asarray(x, dtype=float), np.array([sigma, rho, beta]))


def l96_vector_field(x, forcing=8.0):
    """Lorenz 96 right-hand side with cyclic indexing."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise InvalidModelError(f"Lorenz 96 needs d >= 4, got d={x.shape[-1]}")
    return _l96_field(x, np.array([forcing]))


def _l63_field(x, p):
    s, r, b = p[..., 0], p[..., 1], p[..., 2]
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([s * (x2 - x1), x1 * (r - x3) - x2, x1 * x2 - b * x3], axis=-1)


def _l63_jac(x, p):
    s, r, b = np.broadcast_arrays(p[..., 0], p[..., 1], p[..., 2])
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    shape = np.broadcast_shapes(x.shape[:-1], s.shape)
    J = np.zeros(shape + (3, 3))
    J[..., 0, 0] = -s
    J[..., 0, 1] = s
    J[..., 1, 0] = r - x3
    J[..., 1, 1] = -1.0
    J[..., 1, 2] = -x1
    J[..., 2, 0] = x2
    J[..., 2, 1] = x1
    J[..., 2, 2] = -b
    return J


def _l63_pjac(x, p):
    shape = np.broadcast_shapes(x.shape[:-1], p.shape[:-1])
    B = np.zeros(shape + (3, 3))
    B[..., 0, 0] = x[..., 1] - x[..., 0]
    B[..., 1, 1] = x[..., 0]
    B[..., 2, 2] = -x[..., 2]
    return B


def _l96_field(x, p):
    return (
        (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1)
        - x
        + p[..., :1]
    )


def _l96_jac(x, p):
    d = x.shape[-1]
    idx = np.arange(d)
    J = np.zeros(x.shape + (d,))
    xm2 = np.roll(x, 2, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    J[..., idx, (idx - 2) % d] = -xm1
    J[..., idx, (idx - 1) % d] = xp1 - xm2
    J[..., idx, idx] = -1.0
    J[..., idx, (idx + 1) % d] = xm1
    return J


def _l96_pjac(x, p):
    shape = np.broadcast_shapes(x.shape[:-1], p.shape[:-1])
    return np.ones(shape + (x.shape[-1], 1))


@dataclass(frozen=True, eq=False)
class ModelSystem:
    """Map ``F`` built from ``substeps`` integrator steps of size ``dt``.

    ``field``, ``field_jacobian`` and ``field_param_jacobian`` take
    ``(x, params)`` and must broadcast over leading axes of both arguments, so
    that time-dependent parameters of shape ``(N, q)`` work along a batch of
    states.
    """

    name: str
    dimension: int
    field: Callable
    field_jacobian: Callable
    field_param_jacobian: Callable
    params: np.ndarray
    param_names: tuple = ()
    dt: float = 0.005
    substeps: int = 1
    scheme: str = "euler"

    def __post_init__(self):
        if self.dimension < 1:
            raise InvalidModelError("dimension must be positive")
        if not self.dt > 0:
            raise InvalidModelError("dt must be positive")
        if self.substeps < 1:
            raise InvalidModelError("substeps must be >= 1")
        if self.scheme not in SCHEMES:
            raise InvalidModelError(f"unknown scheme {self.scheme!r}")
        object.__setattr__(self, "params", np.asarray(self.params, dtype=float))
        if len(self.param_names) != self.params.shape[-1]:
            raise InvalidModelError("param_names does not match params")

    # -- bookkeeping ---------------------------------------------------------

    @property
    def map_dt(self):
        """Model time spanned by one application of the map."""
        return self.dt * self.substeps

    @property
    def n_params(self):
        return len(self.param_names)

    def param_index(self, free):
        """Column indices for ``free`` (names or integers); ``None`` means none."""
        if free is None:
            return []
        if isinstance(free, (str, int, np.integer)):
            free = [free]
        out = []
        for f in free:
            if isinstance(f, str):
                if f not in self.param_names:
                    raise InvalidModelError(f"{self.name} has no parameter {f!r}")
                out.append(self.param_names.index(f))
            else:
                out.append(int(f))
        return out

    def with_params(self, **values):
        p = self.params.copy()
        for k, v in values.items():
            p[..., self.param_index(k)[0]] = v
        return replace(self, params=p)

    def with_param_vector(self, params):
        return replace(self, params=np.asarray(params, dtype=float))

    def with_substeps(self, substeps):
        return replace(self, substeps=int(substeps))

    def _p(self, params):
        return self.params if params is None else np.asarray(params, dtype=float)

    # -- single integrator step ----------------------------------------------

    def vector_field(self, x, params=None):
        return self.field(np.asarray(x, dtype=float), self._p(params))

    def _substep(self, x, p):
        h = self.dt
        f = self.field
        if self.scheme == "euler":
            return x + h * f(x, p)
        k1 = f(x, p)
        k2 = f(x + 0.5 * h * k1, p)
        k3 = f(x + 0.5 * h * k2, p)
        k4 = f(x + h * k3, p)
        return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def _substep_linear(self, x, p, want_params):
        """Return (next state, step Jacobian, step parameter Jacobian or None)."""
        h = self.dt
        f, A, B = self.field, self.field_jacobian, self.field_param_jacobian
        eye = np.eye(self.dimension)
        if self.scheme == "euler":
            J = eye + h * A(x, p)
            P = h * B(x, p) if want_params else None
            return x + h * f(x, p), J, P
        k1 = f(x, p)
        x2 = x + 0.5 * h * k1
        k2 = f(x2, p)
        x3 = x + 0.5 * h * k2
        k3 = f(x3, p)
        x4 = x + h * k3
        k4 = f(x4, p)
        A2, A3, A4 = A(x2, p), A(x3, p), A(x4, p)
        K1 = A(x, p)
        K2 = A2 @ (eye + 0.5 * h * K1)
        K3 = A3 @ (eye + 0.5 * h * K2)
        K4 = A4 @ (eye + h * K3)
        J = eye + (h / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
        P = None
        if want_params:
            P1 = B(x, p)
            P2 = A2 @ (0.5 * h * P1) + B(x2, p)
            P3 = A3 @ (0.5 * h * P2) + B(x3, p)
            P4 = A4 @ (h * P3) + B(x4, p)
            P = (h / 6.0) * (P1 + 2 * P2 + 2 * P3 + P4)
        x_next = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return x_next, J, P

    # -- composed map ---------------------------------------------------------

    def step(self, x, params=None):
        """Apply the composed map ``F`` to a state or a batch of states."""
        x = np.asarray(x, dtype=float)
        p = self._p(params)
        for _ in range(self.substeps):
            x = self._substep(x, p)
        _check_finite(x)
        return x

    def substep_states(self, x, params=None):
        """States visited by the integrator: shape ``(substeps + 1, ..., d)``."""
        x = np.asarray(x, dtype=float)
        p = self._p(params)
        out = [x]
        for _ in range(self.substeps):
            x = self._substep(x, p)
            out.append(x)
        return np.stack(out)

    def substep_orbit(self, x0, n_steps, params=None):
        """Every integrator substep over ``n_steps`` maps, shape ``(n_steps * s + 1, d)``.

        No divergence check is made; non-finite entries propagate.
        """
        p = self._p(params)
        x = np.asarray(x0, dtype=float)
        out = np.empty((n_steps * self.substeps + 1,) + x.shape)
        out[0] = x
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(n_steps * self.substeps):
                x = self._substep(x, p)
                out[k + 1] = x
        return out

    def substep_jacobians(self, xs, params=None, free=None):
        """Single-substep Jacobians at a batch of substep states.

        Returns ``(J, P)`` with ``J`` of shape ``(..., d, d)`` and ``P`` the
        parameter Jacobian for ``free`` (``None`` when ``free`` is ``None``).
        """
        cols = self.param_index(free) if free is not None else None
        _, J, P = self._substep_linear(np.asarray(xs, dtype=float), self._p(params), cols is not None)
        return J, (P[..., cols] if cols is not None else None)

    def linearize(self, x, params=None, free=None):
        """Composed map value, Jacobian and parameter Jacobian.

        The Jacobian is the ordered product of substep Jacobians, last substep
        leftmost. The parameter Jacobian (``(..., d, q)`` for the ``free``
        parameters) is accumulated by the chain rule; it is ``None`` when
        ``free`` is ``None``.
        """
        x = np.asarray(x, dtype=float)
        p = self._p(params)
        cols = self.param_index(free) if free is not None else None
        want = cols is not None
        J = None
        S = None
        for _ in range(self.substeps):
            x, Js, Ps = self._substep_linear(x, p, want)
            J = Js if J is None else Js @ J
            if want:
                Ps = Ps[..., cols]
                S = Ps if S is None else Js @ S + Ps
        _check_finite(x)
        return x, J, S

    def jacobian(self, x, params=None):
        return self.linearize(x, params)[1]

    def param_jacobian(self, x, free=None, params=None):
        """Derivative of ``F`` with respect to the ``free`` parameters.

        ``free=None`` selects every parameter. Returns ``(..., d, q)``.
        """
        if free is None:
            free = list(range(self.n_params))
        x = np.asarray(x, dtype=float)
        if len(self.param_index(free)) == 0:
            return np.zeros(x.shape + (0,))
        return self.linearize(x, params, free)[2]

    def adjoint(self, x, w, params=None, free=None):
        """Return ``DF(x)^T w`` and, if ``free`` is given, ``(dF/dalpha)^T w``.

        Computed as a reverse sweep over the integrator substeps.
        """
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        p = self._p(params)
        cols = self.param_index(free) if free is not None else None
        states = [x]
        for _ in range(self.substeps - 1):
            states.append(self._substep(states[-1], p))
        g_alpha = None
        if cols is not None:
            g_alpha = np.zeros(w.shape[:-1] + (len(cols),))
        for xs in reversed(states):
            _, Js, Ps = self._substep_linear(xs, p, cols is not None)
            if cols is not None:
                g_alpha = g_alpha + np.einsum("...ij,...i->...j", Ps[..., cols], w)
            w = np.einsum("...ij,...i->...j", Js, w)
        return (w, g_alpha) if cols is not None else w

    def integrate(self, x0, n_steps, params=None):
        """Orbit of length ``n_steps + 1`` starting at ``x0``."""
        x = np.asarray(x0, dtype=float).copy()
        out = np.empty((n_steps + 1,) + x.shape)
        out[0] = x
        p = self._p(params)
        for n in range(n_steps):
            for _ in range(self.substeps):
                x = self._substep(x, p)
            if not np.all(np.isfinite(x)):
                raise DivergenceError("model orbit diverged", step=n)
            out[n + 1] = x
        return out


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.reshape(x, (-1, x.shape[-1]))).any(axis=-1))
        raise DivergenceError("non-finite model output", step=int(bad[0, 0]))


def lorenz63(sigma=10.0, rho=28.0, beta=8.0 / 3.0, dt=0.005, substeps=1, scheme="euler"):
    return ModelSystem(
        name="lorenz63",
        dimension=3,
        field=_l63_field,
        field_jacobian=_l63_jac,
        field_param_jacobian=_l63_pjac,
        params=np.array([sigma, rho, beta]),
        param_names=("sigma", "rho", "beta"),
        dt=dt,
        substeps=substeps,
        scheme=scheme,
    )


def lorenz96(dimension=36, forcing=8.0, dt=0.005, substeps=1, scheme="euler"):
    if dimension < 4:
        raise InvalidModelError(f"Lorenz 96 needs d >= 4, got d={dimension}")
    return ModelSystem(
        name="lorenz96",
        dimension=dimension,
        field=_l96_field,
        field_jacobian=_l96_jac,
        field_param_jacobian=_l96_pjac,
        params=np.array([forcing]),
        param_names=("forcing",),
        dt=dt,
        substeps=substeps,
        scheme=scheme,
    )


def linear_model(matrix, dt=1.0, name="linear"):
    """Map ``F(x) = A x`` (one substep, Euler form ``x + dt * f`` with ``f = (A - I) x / dt``).

    Handy for tests: the identity map is ``linear_model(np.eye(d))``.
    """
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    d = A.shape[0]
    G = (A - np.eye(d)) / dt

    def f(x, p):
        return x @ G.T

    def jac(x, p):
        return np.broadcast_to(G, x.shape[:-1] + (d, d)).copy()

    def pjac(x, p):
        return np.zeros(x.shape[:-1] + (d, 0))

    return ModelSystem(name, d, f, jac, pjac, np.zeros(0), (), dt, 1, "euler")


def scalar_gain_model(a=2.0):
    """Scalar map ``F(x; a) = a x`` with ``a`` as the single free parameter."""

    def f(x, p):
        return (p[..., :1] - 1.0) * x

    def jac(x, p):
        return (p[..., :1] - 1.0)[..., None] * np.ones(x.shape[:-1] + (1, 1))

    def pjac(x, p):
        return x[..., :, None] * np.ones(p.shape[:-1] + (1, 1))

    return ModelSystem("scalar_gain", 1, f, jac, pjac, np.array([a]), ("a",), 1.0, 1, "euler")


def augment_with_parameters(model: ModelSystem, free: Sequence) -> ModelSystem:
    """State-augmented model ``(x, alpha)`` with trivial dynamics ``alpha' = 0``.

    The free parameters become the trailing state components; the remaining
    parameters stay fixed at their current values.
    """
    cols = model.param_index(free)
    d, q = model.dimension, len(cols)
    base = model.params.copy()
    f0, A0, B0 = model.field, model.field_jacobian, model.field_param_jacobian

    def full_params(z):
        p = np.broadcast_to(base, z.shape[:-1] + base.shape[-1:]).copy()
        p[..., cols] = z[..., d:]
        return p

    def f(z, _):
        p = full_params(z)
        return np.concatenate([f0(z[..., :d], p), np.zeros(z.shape[:-1] + (q,))], axis=-1)

    def jac(z, _):
        p = full_params(z)
        J = np.zeros(z.shape[:-1] + (d + q, d + q))
        J[..., :d, :d] = A0(z[..., :d], p)
        J[..., :d, d:] = B0(z[..., :d], p)[..., cols]
        return J

    def pjac(z, _):
        return np.zeros(z.shape[:-1] + (d + q, 0))

    return ModelSystem(
        name=f"{model.name}+params",
        dimension=d + q,
        field=f,
        field_jacobian=jac,
        field_param_jacobian=pjac,
        params=np.zeros(0),
        param_names=(),
        dt=model.dt,
        substeps=model.substeps,
        scheme=model.scheme,
    )


def build_model(name, **kwargs) -> ModelSystem:
    """Factory used by the command line front end."""
    builders = {"lorenz63": lorenz63, "l63": lorenz63, "lorenz96": lorenz96, "l96": lorenz96}
    try:
        return builders[name.lower()](**kwargs)
    except KeyError:
        raise InvalidModelError(f"unknown model {name!r}") from None
