"""Twin-experiment data: truth runs, noisy observations and completion.

Observation times are indices into the truth trajectory. With ``every_k > 1``
the assimilation works on the observation grid, where one map application is
``every_k`` model maps (see :meth:`ObservationSet.grid_model`).

All randomness comes from ``numpy.random.default_rng(seed)`` (PCG64).
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from ._csv import read_rows, write_rows
from .errors import ConfigError, DivergenceError
from .tangent import propagate_frames, spin_up_frame

TRANSIENT = 10.0


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Observations ``y = H x + noise`` at ``times``.

    ``noise`` is ``"gaussian"`` (standard deviation ``scale``) or ``"uniform"``
    (on ``[-scale, scale]``).
    """

    times: np.ndarray
    values: np.ndarray
    H: np.ndarray
    scale: float
    seed: int
    every_k: int = 1
    noise: str = "gaussian"
    n_truth: int = 0

    @property
    def n_obs(self):
        return self.values.shape[0]

    @property
    def variance(self):
        """Per-component noise variance."""
        if self.noise == "uniform":
            return self.scale**2 / 3.0
        return self.scale**2

    @property
    def is_full_state(self):
        H = self.H
        return H.shape[0] == H.shape[1] and np.array_equal(H, np.eye(H.shape[0]))

    def grid_model(self, model):
        """Model whose single map spans the gap between observation times."""
        return model.with_substeps(model.substeps * self.every_k)

    def proxy(self):
        """Full-state observations as a trajectory on the observation grid."""
        if not self.is_full_state:
            raise ConfigError("proxy() needs full-state observations; use direct insertion")
        return self.values.copy()

    def window(self, a, b):
        """Observations falling in grid indices ``a .. b`` (inclusive)."""
        return self.values[a : b + 1]

    def digest(self):
        """Short hash identifying the observation values and operator."""
        h = hashlib.sha256()
        for arr in (self.times, self.values, self.H):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()[:16]


def generate_truth(model, T, seed, transient=TRANSIENT):
    """Truth orbit over ``T`` time units after discarding a transient.

    The initial state is standard Gaussian; ``round(T / map_dt)`` map steps are
    recorded.
    """
    if not T > 0:
        raise ConfigError("T must be positive")
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(model.dimension)
    n_tr = int(round(transient / model.map_dt))
    n = int(round(T / model.map_dt))
    x0 = model.integrate(x0, n_tr)[-1] if n_tr else x0
    return model.integrate(x0, n)


def selector(d, components):
    """Rows of the identity picking ``components``."""
    return np.eye(d)[list(components)]


def observe(truth, H=None, nu=1.0, every_k=1, seed=0, noise="gaussian"):
    """Noisy observations of ``truth`` at every ``every_k``-th index.

    Parameters
    ----------
    truth : array, shape (N + 1, d)
    H : array, shape (b, d), optional
        Observation operator; identity by default.
    nu : float
        Gaussian standard deviation, or half width for uniform noise.
    """
    truth = np.asarray(truth, dtype=float)
    N, d = truth.shape[0] - 1, truth.shape[1]
    H = np.eye(d) if H is None else np.atleast_2d(np.asarray(H, dtype=float))
    if every_k < 1 or N % every_k:
        raise ConfigError(f"every_k={every_k} must be >= 1 and divide N={N}")
    if noise not in ("gaussian", "uniform"):
        raise ConfigError(f"unknown noise kind {noise!r}")
    times = np.arange(0, N + 1, every_k)
    clean = truth[times] @ H.T
    rng = np.random.default_rng(seed)
    if noise == "gaussian":
        xi = nu * rng.standard_normal(clean.shape)
    else:
        xi = rng.uniform(-nu, nu, clean.shape)
    return ObservationSet(times, clean + xi, H, float(nu), int(seed), int(every_k), noise, N + 1)


def _insertion(model, z0, n_steps, blend):
    """Run ``z_{n+1} = blend(n + 1, F(z_n))`` from ``z0``."""
    z = np.empty((n_steps + 1, z0.shape[0]))
    z[0] = z0
    for n in range(n_steps):
        z[n + 1] = blend(n + 1, model.step(z[n]))
        if not np.all(np.isfinite(z[n + 1])):
            raise DivergenceError("insertion diverged", step=n)
    return z


def direct_insertion_complete(model, obs: ObservationSet, z0=None):
    """Complete partial observations by inserting observed coordinates.

    ``H`` must be a coordinate selector, so ``P = H^T H`` picks the observed
    components; they are overwritten with the data at every observation time
    and the rest are integrated forward. The output lives on the observation
    grid. ``z0`` defaults to the first observation lifted by zeros in the
    unobserved components.
    """
    H = obs.H
    if not (np.all((H == 0) | (H == 1)) and np.all(H.sum(axis=1) == 1)):
        raise ConfigError("direct insertion needs a coordinate-selector H")
    idx = np.argmax(H, axis=1)
    grid = obs.grid_model(model)
    z0 = np.zeros(H.shape[1]) if z0 is None else np.array(z0, dtype=float)
    z0[idx] = obs.values[0]

    def blend(n, fz):
        fz[idx] = obs.values[n]
        return fz

    return _insertion(grid, z0, obs.n_obs - 1, blend)


def projected_insertion(model, driver, frame, z0):
    """Drive a replica with the non-stable part of ``driver``.

    ``z_{n+1} = P_{n+1} x_{n+1} + (I - P_{n+1}) F(z_n)`` with ``P_n`` the frame
    projectors. With frames spanning the non-stable directions of the driver
    the replica synchronizes.
    """
    driver = np.asarray(driver, dtype=float)

    def blend(n, fz):
        return fz + frame.project(n, driver[n] - fz)

    return _insertion(model, np.asarray(z0, dtype=float), driver.shape[0] - 1, blend)


def sync_errors(model, pre, driver, p, z0, reorthogonalize=False):
    """Sup-norm error ``|z_n - x_n|`` of a replica driven through ``p`` frames.

    Frames are spun up along ``pre`` (which must end at ``driver[0]``) and then
    propagated along ``driver``.
    """
    pre = np.asarray(pre, dtype=float)
    Q0 = spin_up_frame(model, pre, p, pre.shape[0] - 1, reorthogonalize=reorthogonalize)
    frame = propagate_frames(model, driver, Q0, reorthogonalize)
    z = projected_insertion(model, driver, frame, z0)
    return np.abs(z - driver).max(axis=1)


def _names(prefix, d):
    return [f"{prefix}{i + 1}" for i in range(d)]


def write_trajectory_csv(path, traj, meta=None, prefix="x", times=None, tags=None):
    """One row per stored step, ``%.17g`` numbers.

    ``tags`` (e.g. config hash and seed) go into a leading comment line and
    ``meta`` into the sidecar file ``path + '.json'``.
    """
    traj = np.asarray(traj, dtype=float)
    times = np.arange(traj.shape[0]) if times is None else times
    rows = ([int(t)] + list(row) for t, row in zip(times, traj))
    write_rows(path, ["time_index"] + _names(prefix, traj.shape[1]), rows, tags)
    if meta is not None:
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`; returns ``(times, values)``."""
    _, rows = read_rows(path)
    data = np.array(rows, dtype=float).reshape(len(rows), -1)
    return data[:, 0].astype(int), data[:, 1:]


def write_observations_csv(path, obs: ObservationSet, meta=None, tags=None):
    info = {
        "seed": obs.seed,
        "noise": obs.noise,
        "scale": obs.scale,
        "every_k": obs.every_k,
        "H": obs.H.tolist(),
        "digest": obs.digest(),
    }
    info.update(meta or {})
    write_trajectory_csv(path, obs.values, info, prefix="y", times=obs.times, tags=tags)
