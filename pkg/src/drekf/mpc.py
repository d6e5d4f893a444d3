"""Uncertainty-aware receding-horizon controller for the navigation benchmark.

The controller minimizes a quadratic goal-tracking cost over a finite horizon
subject to unicycle dynamics, input limits, and disc-obstacle clearance
constraints inflated by the covariance-driven safety margin

    delta = kappa_sigma * sqrt(Tr(position block of posterior covariance)).

The nonlinear program is solved by sequential convexification: dynamics and
obstacle constraints are linearized around the previous rollout, the
resulting convex QP (with a trust region and L1 slack on the clearance
constraints) is solved by a dense ADMM splitting, and the loop repeats until
the control sequence settles. Warm starts carry across receding-horizon
steps. Deterministic for fixed inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NumericInputError
from .systems import NonlinearSystem

SLACK_PENALTY = 1e4
# Clearance padding inside the QP so that small sequential-linearization and
# splitting residuals cannot push a reported-optimal plan past the contract
# tolerance of 1e-6.
CLEARANCE_PAD = 1e-5

STATUS_OPTIMAL = "optimal"
STATUS_MAX_ITER = "max_iter"
STATUS_INFEASIBLE = "infeasible_relaxed"


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    radius: float


@dataclass
class MpcConfig:
    """Horizon, cost weights, input limits, goal and obstacle geometry."""

    horizon: int
    q: float = 5.0
    r_s: float = 0.5
    r_omega: float = 0.5
    q_f: float = 20.0
    s_max: float = 1.5
    omega_max: float = 2.0
    goal: tuple = (0.0, 0.0)
    obstacles: tuple = ()
    kappa_sigma: float = 1.645
    d_min_base: float = 0.0
    max_scp_iters: int = 30
    control_tol: float = 1e-4
    qp_max_iters: int = 4000
    trust_region: float = 0.75

    def __post_init__(self):
        if self.horizon < 1:
            raise NumericInputError("horizon must be >= 1")
        if self.s_max <= 0 or self.omega_max <= 0:
            raise NumericInputError("input limits must be positive")
        for w in (self.q, self.r_s, self.r_omega, self.q_f):
            if w < 0:
                raise NumericInputError("cost weights must be nonnegative")
        self.goal = tuple(float(v) for v in self.goal)
        self.obstacles = tuple(
            o if isinstance(o, Obstacle) else Obstacle(tuple(o[0]), float(o[1]))
            for o in self.obstacles
        )


@dataclass
class MpcSolution:
    controls: np.ndarray       # (N, 2) speed and turn-rate commands
    states: np.ndarray         # (N + 1, 3) rollout of controls through f
    status: str
    cost: float
    slack_max: float = 0.0
    clearance_min: float = math.inf
    scp_iterations: int = 0


def safety_margin(posterior_cov, kappa_sigma: float) -> float:
    """kappa_sigma * sqrt(trace of the 2x2 position block); nonnegative."""
    cov = np.asarray(
        posterior_cov.values if hasattr(posterior_cov, "values") else posterior_cov,
        dtype=float,
    )
    if cov.shape[0] < 2 or cov.shape[1] < 2:
        raise DimensionMismatchError("covariance must contain a 2x2 position block")
    tr = float(cov[0, 0] + cov[1, 1])
    return kappa_sigma * math.sqrt(max(tr, 0.0))


def _solve_qp_admm(p_mat, q_vec, a_mat, lower, upper, z0, y0, max_iters, tol=1e-8):
    """Dense ADMM for  min 1/2 z'Pz + q'z  s.t.  l <= Az <= u.

    Constraint rows are equilibrated to unit norm and the penalty adapts to
    the primal/dual residual ratio (with refactorization); both are standard
    splittings-side conditioning fixes and keep the iteration deterministic.
    """
    n = p_mat.shape[0]
    # Jacobi preconditioning of the variables plus unit-norm constraint rows.
    # Zero-diagonal columns (slacks) keep unit scale.
    d = 1.0 / np.sqrt(np.clip(np.diag(p_mat), 1.0, None))
    p_s = (p_mat * d[None, :]) * d[:, None]
    q_s = q_vec * d
    a_d = a_mat * d[None, :]
    row_scale = np.linalg.norm(a_d, axis=1)
    row_scale[row_scale < 1e-12] = 1.0
    a_s = a_d / row_scale[:, None]
    lo_s = np.where(np.isfinite(lower), lower / row_scale, lower)
    hi_s = np.where(np.isfinite(upper), upper / row_scale, upper)

    sigma = 1e-6
    q_scale = max(1.0, float(np.max(np.abs(q_s))))
    # Duals must climb to the largest linear-cost scale (the L1 slack
    # penalty) at rate rho per unit residual; starting rho near that scale
    # avoids a big-M ramp thousands of iterations long.
    rho = max(1.0, 0.05 * q_scale)
    eye = np.eye(n)
    ata = a_s.T @ a_s
    chol = np.linalg.cholesky(p_s + sigma * eye + rho * ata)
    z = z0 / d
    w = a_s @ z
    y = y0 * row_scale  # duals in the equilibrated geometry
    it = 0
    for it in range(1, max_iters + 1):
        rhs = sigma * z - q_s + a_s.T @ (rho * w - y)
        z = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        az = a_s @ z
        w = np.clip(az + y / rho, lo_s, hi_s)
        y = y + rho * (az - w)
        if it % 10 == 0:
            r_prim = float(np.max(np.abs(az - w)))
            r_dual = float(np.max(np.abs(p_s @ z + q_s + a_s.T @ y)))
            if r_prim <= tol and r_dual <= tol * q_scale * 10:
                break
            if it % 50 == 0 and r_prim > 0 and r_dual > 0:
                ratio = math.sqrt(r_prim / (r_dual / q_scale))
                if ratio > 5.0 or ratio < 0.2:
                    rho = min(max(rho * ratio, 1e-6), 1e8)
                    chol = np.linalg.cholesky(p_s + sigma * eye + rho * ata)
    return z * d, y / row_scale, it


def _solve_qp_active_set(p_mat, q_vec, g_mat, h_vec, z0, max_pivots=300):
    """Primal active-set method for  min 1/2 z'Pz + q'z  s.t.  Gz <= h.

    ``z0`` must be feasible. P may be singular (slack columns); a tiny ridge
    makes the equality-constrained subproblems definite. Finite, exact, and
    deterministic: ties break on the lowest row index. Returns (z, pivots).
    """
    n = p_mat.shape[0]
    p_reg = p_mat + 1e-9 * max(1.0, float(np.max(np.abs(p_mat)))) * np.eye(n)
    z = z0.copy()
    active = [i for i in range(len(h_vec)) if g_mat[i] @ z >= h_vec[i] - 1e-12]
    for pivot in range(1, max_pivots + 1):
        g_w = g_mat[active] if active else np.zeros((0, n))
        m = len(active)
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = p_reg
        if m:
            kkt[:n, n:] = g_w.T
            kkt[n:, :n] = g_w
        rhs = np.concatenate([-(p_reg @ z + q_vec), np.zeros(m)])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        step = sol[:n]
        lam = sol[n:]
        if float(np.max(np.abs(step))) <= 1e-11:
            if m == 0 or float(np.min(lam)) >= -1e-9:
                return z, pivot
            active.pop(int(np.argmin(lam)))
            continue
        # Ratio test against inactive rows.
        alpha = 1.0
        blocker = -1
        for i in range(len(h_vec)):
            if i in active:
                continue
            gd = float(g_mat[i] @ step)
            if gd > 1e-13:
                room = (h_vec[i] - float(g_mat[i] @ z)) / gd
                if room < alpha - 1e-15:
                    alpha = max(room, 0.0)
                    blocker = i
        z = z + alpha * step
        if blocker >= 0:
            active.append(blocker)
            active.sort()
    return z, max_pivots


class MpcController:
    """Sequential-convexification NMPC; one instance per closed-loop run."""

    def __init__(self, system: NonlinearSystem, config: MpcConfig):
        if system.jac_f_u is None:
            raise NumericInputError("system must provide an input Jacobian for MPC")
        self.system = system
        self.config = config
        self._u_warm = np.zeros((config.horizon, 2))

    def _rollout(self, x0, controls):
        states = np.empty((len(controls) + 1, self.system.n_x))
        states[0] = x0
        for k, u in enumerate(controls):
            states[k + 1] = self.system.f(states[k], u)
        return states

    def _true_cost(self, states, controls):
        cfg = self.config
        goal = np.asarray(cfg.goal)
        cost = 0.0
        for k in range(cfg.horizon):
            dp = states[k, :2] - goal
            cost += cfg.q * float(dp @ dp)
            cost += cfg.r_s * controls[k, 0] ** 2 + cfg.r_omega * controls[k, 1] ** 2
        dpn = states[cfg.horizon, :2] - goal
        cost += cfg.q_f * float(dpn @ dpn)
        return cost

    def _min_clearance(self, states, delta):
        cfg = self.config
        worst = math.inf
        for obs in cfg.obstacles:
            centers = states[1:, :2] - np.asarray(obs.center)
            dist = np.hypot(centers[:, 0], centers[:, 1])
            margin = obs.radius + cfg.d_min_base + delta
            worst = min(worst, float(np.min(dist - margin)))
        return worst

    def solve(self, x_est, delta: float, warm_start=True) -> MpcSolution:
        """Plan from the current estimate with obstacle inflation ``delta``."""
        cfg = self.config
        x_est = np.asarray(x_est, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x_est)):
            raise NumericInputError("state estimate must be finite")
        if delta < 0:
            raise NumericInputError("safety margin must be nonnegative")
        n = cfg.horizon
        n_u = 2 * n
        goal = np.asarray(cfg.goal)
        n_obs = len(cfg.obstacles)
        n_slack = n * n_obs
        dim = n_u + n_slack

        u_cur = self._u_warm.copy() if warm_start else np.zeros((n, 2))
        u_cur[:, 0] = np.clip(u_cur[:, 0], 0.0, cfg.s_max)
        u_cur[:, 1] = np.clip(u_cur[:, 1], -cfg.omega_max, cfg.omega_max)
        states = self._rollout(x_est, u_cur)
        trust = cfg.trust_region
        status = STATUS_MAX_ITER
        it_outer = 0
        prev_merit = math.inf

        for it_outer in range(1, cfg.max_scp_iters + 1):
            # Sensitivities dp_k/du via the linearized rollout.
            a_seq = [self.system.jac_f(states[k], u_cur[k]) for k in range(n)]
            b_seq = [self.system.jac_f_u(states[k], u_cur[k]) for k in range(n)]
            sens = np.zeros((n + 1, self.system.n_x, n_u))
            for k in range(n):
                sens[k + 1] = a_seq[k] @ sens[k]
                sens[k + 1][:, 2 * k: 2 * k + 2] += b_seq[k]

            # Quadratic cost model in du (exact given linearized positions).
            p_mat = np.zeros((dim, dim))
            q_vec = np.zeros(dim)
            for k in range(1, n + 1):
                jk = sens[k][:2, :]
                wk = cfg.q if k < n else cfg.q_f
                resid = states[k, :2] - goal
                p_mat[:n_u, :n_u] += 2.0 * wk * (jk.T @ jk)
                q_vec[:n_u] += 2.0 * wk * (jk.T @ resid)
            r_diag = np.tile([cfg.r_s, cfg.r_omega], n)
            p_mat[:n_u, :n_u] += 2.0 * np.diag(r_diag)
            q_vec[:n_u] += 2.0 * r_diag * u_cur.reshape(-1)
            q_vec[n_u:] = SLACK_PENALTY

            # Constraint rows Gz <= h: input box with trust region, slack
            # nonnegativity, and linearized clearance (slack-relaxed).
            lo_box = np.empty(n_u)
            hi_box = np.empty(n_u)
            flat_u = u_cur.reshape(-1)
            lo_box[0::2] = np.maximum(-flat_u[0::2], -trust)
            hi_box[0::2] = np.minimum(cfg.s_max - flat_u[0::2], trust)
            lo_box[1::2] = np.maximum(-cfg.omega_max - flat_u[1::2], -trust)
            hi_box[1::2] = np.minimum(cfg.omega_max - flat_u[1::2], trust)
            hi_box = np.maximum(hi_box, lo_box)
            eye_u = np.hstack([np.eye(n_u), np.zeros((n_u, n_slack))])
            g_rows = [eye_u, -eye_u]
            h_parts = [hi_box, -lo_box]
            clo = np.zeros(n_slack)
            if n_slack:
                slack_rows = np.hstack([np.zeros((n_slack, n_u)), -np.eye(n_slack)])
                g_rows.append(slack_rows)
                h_parts.append(np.zeros(n_slack))
                crow = np.zeros((n_slack, dim))
                idx = 0
                for k in range(1, n + 1):
                    for o, obs in enumerate(cfg.obstacles):
                        dvec = states[k, :2] - np.asarray(obs.center)
                        dist = math.hypot(dvec[0], dvec[1])
                        grad = dvec / max(dist, 1e-9)
                        crow[idx, :n_u] = -(grad @ sens[k][:2, :])
                        crow[idx, n_u + (k - 1) * n_obs + o] = -1.0
                        margin = obs.radius + cfg.d_min_base + delta + CLEARANCE_PAD
                        clo[idx] = margin - dist
                        idx += 1
                g_rows.append(crow)
                h_parts.append(-clo)
            g_mat = np.vstack(g_rows)
            h_vec = np.concatenate(h_parts)

            z0 = np.zeros(dim)
            if n_slack:
                z0[n_u:] = np.maximum(clo, 0.0)
            z, _ = _solve_qp_active_set(p_mat, q_vec, g_mat, h_vec, z0)
            du = z[:n_u].reshape(n, 2)

            u_next = u_cur + du
            u_next[:, 0] = np.clip(u_next[:, 0], 0.0, cfg.s_max)
            u_next[:, 1] = np.clip(u_next[:, 1], -cfg.omega_max, cfg.omega_max)
            states_next = self._rollout(x_est, u_next)
            merit = self._true_cost(states_next, u_next) + SLACK_PENALTY * max(
                0.0, -self._min_clearance(states_next, delta + CLEARANCE_PAD)
            )
            if merit > prev_merit + 1e-12:
                trust = max(trust * 0.5, 1e-3)
            else:
                trust = min(trust * 1.3, cfg.trust_region)
            prev_merit = min(merit, prev_merit)
            change = float(np.max(np.abs(u_next - u_cur))) if n_u else 0.0
            u_cur, states = u_next, states_next
            if change < cfg.control_tol:
                clearance = self._min_clearance(states, delta)
                if clearance >= -1e-6 or not cfg.obstacles:
                    status = STATUS_OPTIMAL
                else:
                    status = STATUS_INFEASIBLE
                break
        else:
            clearance = self._min_clearance(states, delta)
            if cfg.obstacles and clearance < -1e-6:
                status = STATUS_INFEASIBLE

        self._u_warm = np.vstack([u_cur[1:], u_cur[-1:]])
        return MpcSolution(
            controls=u_cur,
            states=states,
            status=status,
            cost=self._true_cost(states, u_cur),
            slack_max=max(0.0, -self._min_clearance(states, delta)),
            clearance_min=self._min_clearance(states, 0.0) if cfg.obstacles else math.inf,
            scp_iterations=it_outer,
        )


def in_collision(position, obstacles) -> bool:
    """Physical collision test: position strictly inside any obstacle disc."""
    p = np.asarray(position[:2], dtype=float)
    for obs in obstacles:
        if np.hypot(*(p - np.asarray(obs.center))) < obs.radius:
            return True
    return False


def mpc_rollout_step(
    plant_state,
    filt,
    controller: MpcController,
    rng,
    process_noise_sqrt,
    meas_noise_sqrt,
):
    """One closed-loop step: plan, actuate with true noise, measure, filter.

    The filter must hold a posterior for the current stage. The collision
    flag is physical: it fires when the true position enters an uninflated
    obstacle disc either before or after the move.
    """
    system = controller.system
    cfg = controller.config
    delta = safety_margin(filt.post_cov, cfg.kappa_sigma)
    plan = controller.solve(filt.post_mean, delta)
    u = plan.controls[0]

    w = process_noise_sqrt @ rng.standard_normal(system.n_x)
    next_state = system.f(plant_state, u) + w
    v = meas_noise_sqrt @ rng.standard_normal(system.n_y)
    y = system.h(next_state) + v

    filt.predict(u)
    filt.update(y)

    collided = in_collision(plant_state, cfg.obstacles) or in_collision(
        next_state, cfg.obstacles
    )
    return next_state, u, collided, delta, plan
