"""Stage-wise Wasserstein ambiguity sets over the stacked noise.

The stacked noise at a stage concatenates the process-noise block (or the
initial state at stage 0) with the measurement-noise block. The ambiguity set
is a type-2 Wasserstein ball around the nominal Gaussian law of that stack.

This module computes the computable enlargement of the nominal radius that
absorbs linearization remainders: the prior second-moment bound gamma_t, the
remainder bounds eta_f/eta_h, and the effective radius

    theta_eff = theta + sqrt(eta_f**2 + eta_h**2).

Only these computable bounds are evaluated at runtime. Their oracle
counterparts (the analogous quantities built from the unknown true error
moments) are never computed; they appear in test names and docs only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NumericInputError
from .psdcore import GaussianLaw, PsdMatrix, gelbrich_distance

DEFAULT_ALPHA = math.sqrt(3.0)


@dataclass(frozen=True)
class CurvatureConstants:
    """Jacobian Lipschitz constants and kurtosis-type moment ratios.

    l_f/l_h bound the Lipschitz constant of the dynamics/measurement
    Jacobians near the filter trajectory; alpha_f/alpha_h bound
    sqrt(E|e|^4) / E|e|^2 and are therefore >= 1 (Jensen).
    """

    l_f: float
    l_h: float
    alpha_f: float = DEFAULT_ALPHA
    alpha_h: float = DEFAULT_ALPHA

    def __post_init__(self):
        for name in ("l_f", "l_h", "alpha_f", "alpha_h"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise NumericInputError(f"{name} must be finite")
        if self.l_f < 0 or self.l_h < 0:
            raise NumericInputError("Lipschitz constants must be nonnegative")
        if self.alpha_f < 1 or self.alpha_h < 1:
            raise NumericInputError("moment ratios alpha_f, alpha_h must be >= 1")


@dataclass(frozen=True)
class NominalStackedNoise:
    """Nominal Gaussian law of the stacked noise, block-diagonal covariance.

    ``split`` is the size of the leading (state-side) block: the process
    noise for stages t >= 1, or the initial-state prior at stage 0.
    """

    mean: np.ndarray
    cov: PsdMatrix
    split: int

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(-1)
        if m.shape[0] != self.cov.dim:
            raise DimensionMismatchError(
                f"mean length {m.shape[0]} != covariance dim {self.cov.dim}"
            )
        if not (0 < self.split < self.cov.dim):
            raise DimensionMismatchError(
                f"block split {self.split} must lie strictly inside dim {self.cov.dim}"
            )
        if self.cov.min_eig() <= 0.0:
            raise NumericInputError("nominal stacked covariance must be strictly PD")
        cross = self.cov.values[: self.split, self.split:]
        if np.any(cross != 0.0):
            raise NumericInputError("nominal cross block must be exactly zero")
        mm = np.array(m, copy=True)
        mm.setflags(write=False)
        object.__setattr__(self, "mean", mm)

    @classmethod
    def from_blocks(cls, state_law: GaussianLaw, meas_law: GaussianLaw):
        n_x, n_y = state_law.dim, meas_law.dim
        cov = np.zeros((n_x + n_y, n_x + n_y))
        cov[:n_x, :n_x] = state_law.cov.values
        cov[n_x:, n_x:] = meas_law.cov.values
        mean = np.concatenate([state_law.mean, meas_law.mean])
        return cls(mean, PsdMatrix.from_array(cov), n_x)

    @property
    def dim(self):
        return self.cov.dim

    def state_block(self):
        return self.cov.values[: self.split, : self.split]

    def meas_block(self):
        return self.cov.values[self.split:, self.split:]

    def trace_state(self):
        return float(np.trace(self.state_block()))

    def trace_meas(self):
        return float(np.trace(self.meas_block()))

    def lambda_min(self):
        return self.cov.min_eig()

    def as_law(self):
        return GaussianLaw(self.mean, self.cov)


@dataclass(frozen=True)
class AmbiguityRadius:
    """Nominal radius plus remainder bounds and the effective radius."""

    nominal: float
    residual_f: float
    residual_h: float
    effective: float

    def __post_init__(self):
        for name in ("nominal", "residual_f", "residual_h", "effective"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise NumericInputError(f"{name} must be finite and nonnegative")
        expected = self.nominal + math.hypot(self.residual_f, self.residual_h)
        if abs(self.effective - expected) > 1e-9 * max(1.0, expected):
            raise NumericInputError("effective radius inconsistent with its components")


def prior_moment_bound(
    prev_posterior_bound: float,
    envelope_a: float,
    nominal: NominalStackedNoise,
    radius_nominal: float,
    curvature: CurvatureConstants,
    is_initial: bool,
):
    """Prior second-moment bound gamma_t and dynamics remainder bound eta_f.

    Stage 0 has no propagated error: gamma_0 = sqrt(Tr state block) + theta
    and eta_f = 0. Later stages contract the carried posterior bound through
    the dynamics envelope and add the nominal process-noise trace, the
    nominal radius, and the quadratic remainder term.
    """
    if radius_nominal < 0:
        raise NumericInputError("nominal radius must be nonnegative")
    if is_initial:
        gamma = math.sqrt(nominal.trace_state()) + radius_nominal
        return gamma, 0.0
    if prev_posterior_bound < 0 or envelope_a < 0:
        raise NumericInputError("posterior bound and envelope must be nonnegative")
    eta_f = 0.5 * curvature.l_f * curvature.alpha_f * prev_posterior_bound**2
    gamma = (
        envelope_a * prev_posterior_bound
        + math.sqrt(nominal.trace_state())
        + radius_nominal
        + eta_f
    )
    return gamma, eta_f


def effective_radius(
    gamma: float,
    eta_f: float,
    radius_nominal: float,
    curvature: CurvatureConstants,
) -> AmbiguityRadius:
    """Enlarge the nominal radius by the remainder bounds at this stage."""
    if gamma < 0 or eta_f < 0 or radius_nominal < 0:
        raise NumericInputError("inputs must be nonnegative")
    eta_h = 0.5 * curvature.l_h * curvature.alpha_h * gamma**2
    eff = radius_nominal + math.hypot(eta_f, eta_h)
    return AmbiguityRadius(radius_nominal, eta_f, eta_h, eff)


def wasserstein_feasibility_check(
    candidate: GaussianLaw,
    nominal: NominalStackedNoise,
    radius: float,
    tol: float = 0.0,
) -> bool:
    """Exact ball-membership test for Gaussian candidates (via Gelbrich)."""
    if candidate.dim != nominal.dim:
        raise DimensionMismatchError(
            f"candidate dim {candidate.dim} != nominal dim {nominal.dim}"
        )
    return gelbrich_distance(candidate, nominal.as_law()) <= radius + tol
