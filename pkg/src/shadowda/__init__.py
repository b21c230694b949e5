"""Shadowing-based data assimilation for chaotic maps.

Trajectory estimates are found by Newton refinement of the pseudo-orbit given
by the observations. The projected variant restricts Newton to the non-stable
tangent directions (tracked by QR-propagated frames) and recovers the stable
component by synchronization.
"""

from .assimilate import (
    AssimilationReport,
    NewtonSettings,
    WindowSchedule,
    assimilate_window,
    full_newton,
    projected_newton_step,
    residual,
    synchronize_stable,
    window_driver,
)
from .baseline4dvar import CGSettings, cost_and_gradient, fourdvar_driver, minimize_cg
from .errors import (
    ConfigError,
    DivergenceError,
    FactorizationError,
    FrameRankError,
    InvalidModelError,
    ParameterUnidentifiableError,
    RankDeficientError,
    ShadowDAError,
    SingularUpdateError,
    SyncDivergenceError,
)
from .linalg import BlockTridiagonalSPD, block_tridiag_factor_solve, mgs_qr, smw_solve
from .metrics import ScoreSet, discontinuity, mse, obs_discrepancy
from .models import ModelSystem, augment_with_parameters, build_model, linear_model, lorenz63, lorenz96
from .obs import ObservationSet, direct_insertion_complete, generate_truth, observe
from .params import newton_with_params, trivial_dynamics_estimate
from .tangent import TangentFrame, lyapunov_exponents, propagate_frames, spin_up_frame

__version__ = "0.1.0"
