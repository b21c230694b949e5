"""Scores for twin experiments.

* ``C``   -- mean squared misfit to the observations, :func:`obs_discrepancy`
* ``MSE`` -- mean squared error to the truth, :func:`mse`
* ``D``   -- mean sup-norm one-step residual, :func:`discontinuity`

:func:`boundary_discontinuity` averages the residual only over the steps that
cross a window boundary, where the jumps live.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .assimilate import residual


def _pair(u, x):
    u = np.asarray(u, dtype=float)
    x = np.asarray(x, dtype=float)
    if u.shape != x.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {x.shape}")
    return u, x


def mse(u, truth):
    """``(1/N) sum_{n=1}^{N} |u_n - x_n|^2``; the initial state is excluded."""
    u, x = _pair(u, truth)
    if u.shape[0] < 2:
        raise ValueError("need at least two states")
    e = u[1:] - x[1:]
    return float(np.sum(e * e) / (u.shape[0] - 1))


def _on_obs_grid(u, obs):
    u = np.asarray(u, dtype=float)
    if u.shape[0] == obs.n_obs:
        return u
    if obs.n_truth and u.shape[0] == obs.n_truth:
        return u[obs.times]
    raise ValueError(f"trajectory of length {u.shape[0]} does not align with {obs.n_obs} observations")


def obs_discrepancy(u, obs):
    """Mean of ``|y_n - H u_n|^2`` over the observation times after the first.

    Like :func:`mse` the initial time is left out. ``u`` may live on the
    observation grid or on the full truth grid.
    """
    if obs.n_obs < 2:
        raise ValueError("need at least two observation times")
    r = obs.values[1:] - _on_obs_grid(u, obs)[1:] @ obs.H.T
    return float(np.sum(r * r) / (obs.n_obs - 1))


def mse_observed(u, truth, obs):
    """MSE restricted to the observed components."""
    u, x = _pair(u, truth)
    return mse(u @ obs.H.T, x @ obs.H.T)


def discontinuity(u, model):
    """``(1/N) sum_n |u_{n+1} - F(u_n)|_inf``."""
    G = residual(model, np.asarray(u, dtype=float))
    return float(np.abs(G).max(axis=1).mean())


def boundary_discontinuity(u, model, boundaries):
    """Mean sup-norm residual over the steps ending at interior boundaries.

    ``boundaries`` are the shared window endpoints; the first and last entries
    (the ends of the record) are ignored. Returns 0 with a single window.
    """
    u = np.asarray(u, dtype=float)
    inner = [b for b in boundaries if 0 < b < u.shape[0] - 1]
    if not inner:
        return 0.0
    idx = np.asarray(inner)
    G = u[idx] - model.step(u[idx - 1])
    return float(np.abs(G).max(axis=1).mean())


@dataclass(frozen=True)
class ScoreSet:
    C: float
    MSE: float
    D: float
    D_boundary: float = 0.0
    MSE_observed: float = float("nan")
    iterations: float = float("nan")
    n_windows: int = 1
    failed_windows: int = 0

    def as_row(self):
        return asdict(self)


def score(u, truth, obs, model, boundaries=(), iterations=float("nan"), n_windows=1, failed=0):
    """All scores for an estimate ``u`` on the observation grid."""
    x = _on_obs_grid(truth, obs)
    return ScoreSet(
        C=obs_discrepancy(u, obs),
        MSE=mse(u, x),
        D=discontinuity(u, model),
        D_boundary=boundary_discontinuity(u, model, boundaries),
        MSE_observed=float("nan") if obs.is_full_state else mse_observed(u, x, obs),
        iterations=float(iterations),
        n_windows=int(n_windows),
        failed_windows=int(failed),
    )


ROW_LABELS = {
    "C": "Distance between Estimate and Observations C(u)",
    "MSE": "Error between Estimate and the Truth MSE",
    "D": "Discontinuity measure D",
    "D_boundary": "Discontinuity at window boundaries",
    "iterations": "Average number of iterations #",
}


def format_table(columns, scores, c_obs=None, digits=3):
    """Plain-text table with one column per run and one row per score.

    ``columns`` are the column headers, ``scores`` the matching
    :class:`ScoreSet` objects; ``c_obs`` adds the observation error row.
    """
    head = ["Property"] + [str(c) for c in columns]
    rows = []
    if c_obs is not None:
        rows.append(["Observation error C(X)"] + [f"{c_obs:.{digits}g}"] * len(columns))
    for key, label in ROW_LABELS.items():
        rows.append([label] + [f"{getattr(s, key):.{digits}g}" for s in scores])
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), "-+-".join("-" * w for w in widths)]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)
