"""Joint state and parameter estimation.

Two routes are offered:

* :func:`newton_with_params` appends the parameter sensitivities as extra
  columns of the residual Jacobian, ``G' = [G'_u | G'_alpha]``. The Gram
  matrix becomes the block tridiagonal ``G'_u G'_u^T`` plus the rank-q term
  ``G'_alpha G'_alpha^T``, handled by Sherman-Morrison-Woodbury.
* :func:`trivial_dynamics_estimate` treats the parameters as extra state
  components with ``alpha_{n+1} = alpha_n`` and runs plain full Newton on the
  augmented system. This adds neutral directions and is the weaker method.
"""

import numpy as np

from .assimilate import AssimilationReport, NewtonSettings, newton_core
from .models import augment_with_parameters


def _with_free(model, free, alpha0):
    cols = model.param_index(free)
    p = model.params.copy()
    if cols:
        p[cols] = np.asarray(alpha0, dtype=float).reshape(len(cols))
    return model.with_param_vector(p), cols


def newton_with_params(model, u0, alpha0, free, settings=None, time_dependent=False):
    """Newton refinement of a trajectory together with the ``free`` parameters.

    Parameters
    ----------
    model : ModelSystem
    u0 : array, shape (N + 1, d)
        Initial trajectory (typically the observations).
    alpha0 : array_like, shape (q,)
        Initial guesses for the free parameters.
    free : sequence of str or int
        Parameters to estimate; an empty sequence gives plain full Newton.
    time_dependent : bool
        Estimate one parameter vector per step instead of a constant one. The
        extra Gram term is then block diagonal and no update formula is needed.

    Returns
    -------
    report : AssimilationReport
        ``report.params`` holds the estimate.
    alpha_hat : ndarray, shape (q,) or (N, q)

    Raises
    ------
    ParameterUnidentifiableError
        When the capacitance matrix of the low-rank update is singular.
    """
    settings = settings or NewtonSettings()
    m, cols = _with_free(model, free, alpha0)
    u, params, diag = newton_core(m, u0, settings, free=cols, time_dependent=time_dependent)
    alpha_hat = params[..., cols].copy()
    return AssimilationReport(u, (diag,), params=alpha_hat), alpha_hat


def trivial_dynamics_estimate(model, u0, alpha0, free, settings=None):
    """Estimate parameters as constant extra state components.

    The returned estimate is the mean over time of the parameter components of
    the refined augmented trajectory. Divergence is reported through the
    diagnostics, not raised.
    """
    settings = settings or NewtonSettings()
    m, cols = _with_free(model, free, alpha0)
    aug = augment_with_parameters(m, cols)
    u0 = np.asarray(u0, dtype=float)
    d = model.dimension
    alpha0 = np.asarray(alpha0, dtype=float).reshape(len(cols))
    z0 = np.hstack([u0, np.broadcast_to(alpha0, (u0.shape[0], len(cols)))])
    z, _, diag = newton_core(aug, z0, settings)
    alpha_hat = z[:, d:].mean(axis=0)
    if not diag.converged:
        diag.message = diag.message or "not converged"
    return AssimilationReport(z[:, :d].copy(), (diag,), params=alpha_hat), alpha_hat
