"""Residual-aware distributionally robust extended Kalman filtering.

Library layout:

- :mod:`drekf.psdcore` -- dense symmetric/PSD kernel (square roots, Bures
  and Gelbrich distances, Schur tests, Gaussian sampling).
- :mod:`drekf.ambiguity` -- stacked-noise ambiguity sets and the computable
  effective-radius pipeline.
- :mod:`drekf.stage_sdp` / :mod:`drekf.interior_point` -- the stage-wise
  least-favorable-covariance SDP (Frank-Wolfe primal solver plus a dense
  log-barrier cross-check).
- :mod:`drekf.systems` -- coordinated-turn and unicycle benchmark models.
- :mod:`drekf.filters` -- the robust filter, a baseline EKF, and the
  recursive mean-squared-error certificate.
- :mod:`drekf.mpc` -- uncertainty-aware receding-horizon controller.
- :mod:`drekf.simkit` -- Monte Carlo engine, metrics, persistence.
- :mod:`drekf.cli` -- command-line entry point (``drekf``).
"""

__version__ = "0.1.0"

from .ambiguity import (
    AmbiguityRadius,
    CurvatureConstants,
    NominalStackedNoise,
    effective_radius,
    prior_moment_bound,
    wasserstein_feasibility_check,
)
from .psdcore import (
    GaussianLaw,
    PsdMatrix,
    SymMatrix,
    bures_distance,
    gelbrich_distance,
    matrix_sqrt,
    sample_gaussian,
    schur_psd_check,
)
from .stage_sdp import (
    StageSdpProblem,
    StageSdpSolution,
    build_stage_problem,
    solve_stage_sdp,
    verify_solution,
)

__all__ = [
    "AmbiguityRadius",
    "CurvatureConstants",
    "GaussianLaw",
    "NominalStackedNoise",
    "PsdMatrix",
    "StageSdpProblem",
    "StageSdpSolution",
    "SymMatrix",
    "__version__",
    "build_stage_problem",
    "bures_distance",
    "effective_radius",
    "gelbrich_distance",
    "matrix_sqrt",
    "prior_moment_bound",
    "sample_gaussian",
    "schur_psd_check",
    "solve_stage_sdp",
    "verify_solution",
    "wasserstein_feasibility_check",
]
