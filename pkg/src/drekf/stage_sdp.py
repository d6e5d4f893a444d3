"""Stage-wise SDP: least-favorable stacked noise and the robust gain.

Each filter stage solves

    max Tr(Sigma_x)   over stacked-noise covariances in the Bures ball
                      of radius theta_eff around the nominal,

where Sigma_x is the posterior error covariance implied by the optimal
linear update. With the Schur-complement slack eliminated, the problem is
the concave maximization of

    f(Sigma_eps) = Tr(Sigma_prior - T S^-1 T^T)

over a single PSD variable Sigma_eps (the joint stacked covariance), with
Sigma_prior = A P A^T + Sigma_w for t >= 1, or the leading block of
Sigma_eps itself at the initial stage. The solver is a conditional-gradient
(Frank-Wolfe) method: the linear maximization oracle over the Bures ball has
a closed form up to a scalar bisection, every oracle vertex automatically
satisfies the spectral floor lambda_min(nominal) I, and iterates remain
strictly feasible. Optimality is certified by the Frank-Wolfe duality gap.

The degenerate radius-0 problem is the classical Kalman update and is
returned analytically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ambiguity import NominalStackedNoise
from .errors import (
    DimensionMismatchError,
    NumericInputError,
    SdpConvergenceError,
)
from .psdcore import PsdMatrix, sqrtm_psd, symmetrize

DEFAULT_TOL_OBJ = 1e-7
DEFAULT_MAX_ITERS = 5000
FEAS_TOL = 1e-8


@dataclass(frozen=True)
class StageSdpProblem:
    """One stage's data: linearizations, carried posterior, nominal, radius."""

    a_mat: np.ndarray | None
    c_mat: np.ndarray
    carried_posterior: PsdMatrix | None
    nominal: NominalStackedNoise
    radius: float
    lambda_floor: float
    is_initial: bool

    @property
    def n_x(self):
        return self.nominal.split

    @property
    def n_y(self):
        return self.nominal.dim - self.nominal.split


@dataclass
class SdpDiagnostics:
    iterations: int
    primal_residual: float
    gap_estimate: float
    converged: bool = True


@dataclass
class StageSdpSolution:
    """Least-favorable blocks, robust gain, and solver diagnostics."""

    prior_cov: np.ndarray        # worst-case prior state covariance
    posterior_cov: np.ndarray    # objective block Sigma_x
    state_noise_cov: np.ndarray  # leading block of Sigma_eps
    meas_noise_cov: np.ndarray   # trailing block of Sigma_eps
    cross_cov: np.ndarray        # off-diagonal block of Sigma_eps
    coupling: np.ndarray         # Bures coupling slack Z
    t_mat: np.ndarray
    s_mat: np.ndarray
    gain: np.ndarray
    objective: float
    diagnostics: SdpDiagnostics
    sigma_eps: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sigma_eps is None:
            n_x = self.state_noise_cov.shape[0]
            n = n_x + self.meas_noise_cov.shape[0]
            s = np.zeros((n, n))
            s[:n_x, :n_x] = self.state_noise_cov
            s[:n_x, n_x:] = self.cross_cov
            s[n_x:, :n_x] = self.cross_cov.T
            s[n_x:, n_x:] = self.meas_noise_cov
            self.sigma_eps = s


def build_stage_problem(
    a_mat,
    c_mat,
    carried_posterior,
    nominal: NominalStackedNoise,
    radius: float,
    is_initial: bool,
) -> StageSdpProblem:
    """Validate shapes and assemble one stage's SDP data."""
    c_mat = np.asarray(c_mat, dtype=float)
    n_x, n_y = nominal.split, nominal.dim - nominal.split
    if c_mat.shape != (n_y, n_x):
        raise DimensionMismatchError(
            f"measurement Jacobian shape {c_mat.shape} != ({n_y}, {n_x})"
        )
    if not np.all(np.isfinite(c_mat)):
        raise NumericInputError("measurement Jacobian must be finite")
    if radius < 0 or not np.isfinite(radius):
        raise NumericInputError("radius must be finite and nonnegative")
    if is_initial:
        if a_mat is not None or carried_posterior is not None:
            raise DimensionMismatchError(
                "initial stage takes no dynamics Jacobian or carried posterior"
            )
    else:
        a_mat = np.asarray(a_mat, dtype=float)
        if a_mat.shape != (n_x, n_x):
            raise DimensionMismatchError(
                f"dynamics Jacobian shape {a_mat.shape} != ({n_x}, {n_x})"
            )
        if not np.all(np.isfinite(a_mat)):
            raise NumericInputError("dynamics Jacobian must be finite")
        if carried_posterior is None or carried_posterior.dim != n_x:
            raise DimensionMismatchError("carried posterior must be an n_x PSD matrix")
    lam = nominal.lambda_min()
    if lam <= 0:
        raise NumericInputError("nominal stacked covariance must be strictly PD")
    return StageSdpProblem(
        a_mat=a_mat,
        c_mat=c_mat,
        carried_posterior=carried_posterior,
        nominal=nominal,
        radius=float(radius),
        lambda_floor=lam,
        is_initial=is_initial,
    )


def _carried_term(problem: StageSdpProblem):
    n_x = problem.n_x
    if problem.is_initial:
        return np.zeros((n_x, n_x))
    a = problem.a_mat
    return symmetrize(a @ problem.carried_posterior.values @ a.T)


def _objective_pieces(sigma_eps, carried, c_mat, n_x):
    """Objective value, gain, and the (prior, T, S) blocks at sigma_eps."""
    s_w = sigma_eps[:n_x, :n_x]
    s_wv = sigma_eps[:n_x, n_x:]
    s_v = sigma_eps[n_x:, n_x:]
    prior = carried + s_w
    pc = prior @ c_mat.T
    t_mat = pc + s_wv
    cwv = c_mat @ s_wv
    s_mat = c_mat @ pc + s_v + cwv + cwv.T
    s_mat = 0.5 * (s_mat + s_mat.T)
    gain = np.linalg.solve(s_mat, t_mat.T).T
    obj = float(np.trace(prior)) - float(np.sum(gain * t_mat))
    return obj, gain, prior, t_mat, s_mat


def _objective_only(sigma_eps, carried, c_mat, n_x):
    return _objective_pieces(sigma_eps, carried, c_mat, n_x)[0]


def _gradient(gain, c_mat, n_x):
    """Supergradient of the concave objective at the current iterate.

    With B(K) = [I - K C, -K], the objective is the K-minimum of an affine
    function of Sigma_eps with slope B(K)^T B(K); Danskin gives the gradient
    at the minimizing gain.
    """
    b = np.empty((n_x, n_x + gain.shape[1]))
    b[:, :n_x] = np.eye(n_x) - gain @ c_mat
    b[:, n_x:] = -gain
    return b.T @ b


def bures_lmo(sigma_hat, theta, grad, bisect_iters=90):
    """Maximize <grad, Sigma> over the Bures ball of radius theta.

    The maximizer is Q Sigma_hat Q with Q = gamma (gamma I - grad)^-1 and
    gamma > lambda_max(grad) chosen so the Bures distance equals theta;
    gamma is found by bisection on the closed-form distance. The returned
    vertex always dominates lambda_min(sigma_hat) I, so the spectral-floor
    constraint never binds along the Frank-Wolfe path.
    """
    theta_sq = theta * theta
    lam, vecs = np.linalg.eigh(grad)
    lam1 = lam[-1]
    if theta <= 0 or lam1 <= 0:
        return np.array(sigma_hat, copy=True)
    sh = vecs.T @ sigma_hat @ vecs
    diag_sh = np.diag(sh).copy()
    tr_sh = float(np.trace(sh))

    def dist_sq(g):
        m = lam / np.maximum(g - lam, 1e-300)
        return float(np.dot(diag_sh, m * m))

    g_lo = lam1 * (1.0 + math.sqrt(max(diag_sh[-1], 0.0)) / theta)
    g_hi = lam1 * (1.0 + math.sqrt(tr_sh) / theta)
    if dist_sq(g_lo) < theta_sq:
        g_lo = lam1 * (1.0 + 1e-14) + 1e-300
    while dist_sq(g_hi) > theta_sq:
        g_hi *= 2.0
    for _ in range(bisect_iters):
        g_mid = 0.5 * (g_lo + g_hi)
        if dist_sq(g_mid) > theta_sq:
            g_lo = g_mid
        else:
            g_hi = g_mid
    q = g_hi / (g_hi - lam)
    inner = (q[:, None] * sh) * q[None, :]
    return symmetrize(vecs @ inner @ vecs.T)


def _bures_coupling(sigma_hat, sigma):
    """Optimal coupling slack Z attaining the Bures distance in LMI form."""
    rh = sqrtm_psd(sigma_hat)
    mid = sqrtm_psd(rh @ sigma @ rh)
    w, v = np.linalg.eigh(sigma_hat)
    w = np.clip(w, 1e-300, None)
    rh_inv = v @ ((1.0 / np.sqrt(w))[:, None] * v.T)
    return rh @ mid @ rh_inv


def _bures_distance_raw(a, b):
    rb = sqrtm_psd(b)
    cross = np.linalg.eigvalsh(rb @ a @ rb)
    val = float(np.trace(a) + np.trace(b)) - 2.0 * float(
        np.sum(np.sqrt(np.clip(cross, 0.0, None)))
    )
    return math.sqrt(max(val, 0.0))


def _assemble_solution(problem, sigma_eps, carried, iterations, gap, converged=True):
    n_x = problem.n_x
    obj, gain, prior, t_mat, s_mat = _objective_pieces(
        sigma_eps, carried, problem.c_mat, n_x
    )
    posterior = symmetrize(prior - gain @ t_mat.T)
    coupling = _bures_coupling(problem.nominal.cov.values, sigma_eps)
    ball_resid = max(
        0.0, _bures_distance_raw(sigma_eps, problem.nominal.cov.values) - problem.radius
    )
    floor_resid = max(
        0.0, problem.lambda_floor - float(np.linalg.eigvalsh(sigma_eps)[0])
    )
    diag = SdpDiagnostics(
        iterations=iterations,
        primal_residual=max(ball_resid, floor_resid),
        gap_estimate=gap,
        converged=converged,
    )
    return StageSdpSolution(
        prior_cov=prior,
        posterior_cov=posterior,
        state_noise_cov=sigma_eps[:n_x, :n_x].copy(),
        meas_noise_cov=sigma_eps[n_x:, n_x:].copy(),
        cross_cov=sigma_eps[:n_x, n_x:].copy(),
        coupling=coupling,
        t_mat=t_mat,
        s_mat=s_mat,
        gain=gain,
        objective=obj,
        diagnostics=diag,
        sigma_eps=sigma_eps.copy(),
    )


def _kalman_solution(problem: StageSdpProblem):
    """Exact solution of the radius-0 (singleton ambiguity set) stage."""
    carried = _carried_term(problem)
    sigma_eps = np.array(problem.nominal.cov.values, copy=True)
    return _assemble_solution(problem, sigma_eps, carried, iterations=0, gap=0.0)


def solve_stage_sdp(
    problem: StageSdpProblem,
    tol_obj: float = DEFAULT_TOL_OBJ,
    max_iters: int = DEFAULT_MAX_ITERS,
    warm_start=None,
) -> StageSdpSolution:
    """Frank-Wolfe solve of the stage SDP; deterministic for fixed inputs.

    Stops when the duality gap certifies the objective within tolerance, or
    when the relative objective change stays below ``tol_obj`` for five
    consecutive iterations with a loosely certified gap. Raises
    :class:`SdpConvergenceError` (carrying the best iterate) if ``max_iters``
    is exhausted first.
    """
    if problem.radius <= 0.0:
        return _kalman_solution(problem)

    sigma_hat = problem.nominal.cov.values
    carried = _carried_term(problem)
    c_mat = problem.c_mat
    n_x = problem.n_x
    theta = problem.radius

    sigma = np.array(sigma_hat, copy=True)
    if warm_start is not None and warm_start.shape == sigma.shape:
        ws = symmetrize(warm_start)
        if (
            _bures_distance_raw(ws, sigma_hat) <= 0.999 * theta
            and np.linalg.eigvalsh(ws)[0] >= problem.lambda_floor - 1e-12
        ):
            sigma = ws

    obj, gain, *_ = _objective_pieces(sigma, carried, c_mat, n_x)
    scale = max(1.0, abs(obj))
    gap_tol = max(100.0 * tol_obj, 1e-12) * scale
    gap_loose = 1e-4 * scale

    beta = 1.0
    stall = 0
    gap = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        grad = _gradient(gain, c_mat, n_x)
        vertex = bures_lmo(sigma_hat, theta, grad)
        direction = vertex - sigma
        gap = float(np.sum(grad * direction))
        if gap <= gap_tol:
            break
        if stall >= 5 and gap <= gap_loose:
            break

        d_norm2 = float(np.sum(direction * direction))
        if d_norm2 <= 0.0:
            break
        # Adaptive step: quadratic upper model with backtracked curvature.
        beta = max(beta / 2.0, 1e-12)
        eta = min(1.0, gap / (beta * d_norm2))
        for _ in range(40):
            cand = sigma + eta * direction
            obj_cand = _objective_only(cand, carried, c_mat, n_x)
            if obj_cand >= obj + eta * gap - 0.5 * eta * eta * beta * d_norm2:
                break
            beta *= 2.0
            eta = min(1.0, gap / (beta * d_norm2))
        sigma = sigma + eta * direction
        new_obj, gain, *_ = _objective_pieces(sigma, carried, c_mat, n_x)
        if abs(new_obj - obj) <= tol_obj * max(1.0, abs(new_obj)):
            stall += 1
        else:
            stall = 0
        obj = new_obj
        scale = max(1.0, abs(obj))
        gap_tol = max(100.0 * tol_obj, 1e-12) * scale
        gap_loose = 1e-4 * scale
    else:
        best = _assemble_solution(
            problem, symmetrize(sigma), carried, it, gap, converged=False
        )
        raise SdpConvergenceError(
            f"Frank-Wolfe did not certify within {max_iters} iterations "
            f"(gap {gap:.3e}, tol {gap_tol:.3e})",
            best_solution=best,
        )

    sigma = symmetrize(sigma)
    return _assemble_solution(problem, sigma, carried, it, gap)


@dataclass
class ConstraintResidual:
    name: str
    residual: float
    tol: float

    @property
    def ok(self):
        return self.residual <= self.tol


@dataclass
class VerificationReport:
    entries: list

    @property
    def ok(self):
        return all(e.ok for e in self.entries)

    def violations(self):
        return [e for e in self.entries if not e.ok]

    def worst(self):
        return max(self.entries, key=lambda e: e.residual - e.tol)

    def lines(self):
        out = []
        for e in self.entries:
            flag = "ok " if e.ok else "VIOLATION"
            out.append(f"{flag} {e.name}: residual={e.residual:.3e} tol={e.tol:.1e}")
        return out


def verify_solution(problem: StageSdpProblem, solution: StageSdpSolution, tol: float = FEAS_TOL) -> VerificationReport:
    """Independent audit of every stage constraint; report-only."""
    n_x = problem.n_x
    nom = problem.nominal.cov.values
    sig = solution.sigma_eps
    entries = []

    def add(name, residual):
        entries.append(ConstraintResidual(name, float(residual), tol))

    add("sigma_eps symmetric", np.max(np.abs(sig - sig.T)))
    add("sigma_eps psd", max(0.0, -float(np.linalg.eigvalsh(sig)[0])))
    add(
        "spectral floor",
        max(0.0, problem.lambda_floor - float(np.linalg.eigvalsh(sig)[0])),
    )

    if problem.is_initial:
        add(
            "prior equals leading block",
            np.max(np.abs(solution.prior_cov - sig[:n_x, :n_x])),
        )
    else:
        propagated = (
            problem.a_mat @ problem.carried_posterior.values @ problem.a_mat.T
            + sig[:n_x, :n_x]
        )
        add("prior propagation", np.max(np.abs(solution.prior_cov - propagated)))

    t_def = solution.prior_cov @ problem.c_mat.T + sig[:n_x, n_x:]
    add("T definition", np.max(np.abs(solution.t_mat - t_def)))
    cwv = problem.c_mat @ sig[:n_x, n_x:]
    s_def = (
        problem.c_mat @ solution.prior_cov @ problem.c_mat.T
        + sig[n_x:, n_x:]
        + cwv
        + cwv.T
    )
    add("S definition", np.max(np.abs(solution.s_mat - s_def)))

    schur = np.block(
        [
            [solution.prior_cov - solution.posterior_cov, solution.t_mat],
            [solution.t_mat.T, solution.s_mat],
        ]
    )
    add("posterior Schur block psd", max(0.0, -float(np.linalg.eigvalsh(symmetrize(schur))[0])))

    z = solution.coupling
    bures_lmi = np.block([[nom, z], [z.T, sig]])
    add("Bures coupling LMI psd", max(0.0, -float(np.linalg.eigvalsh(symmetrize(bures_lmi))[0])))
    trace_resid = float(np.trace(sig + nom - 2.0 * z)) - problem.radius**2
    add("Bures trace budget", max(0.0, trace_resid))

    gain_resid = np.max(np.abs(solution.gain @ solution.s_mat - solution.t_mat))
    add("gain K = T S^-1", gain_resid / max(1.0, np.max(np.abs(solution.t_mat))))
    add(
        "objective equals Tr(posterior)",
        abs(solution.objective - float(np.trace(solution.posterior_cov)))
        / max(1.0, abs(solution.objective)),
    )
    return VerificationReport(entries)
