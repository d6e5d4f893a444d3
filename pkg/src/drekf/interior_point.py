"""Dense log-barrier interior-point solver for the full stage LMI problem.

This is the cross-check route for the first-order stage solver: it solves the
same stage problem in its explicit LMI form (posterior Schur block, Bures
coupling block, trace budget, PSD and spectral-floor cones) with a standard
path-following scheme -- Newton centering on the log-det barrier, geometric
increase of the path parameter, and the barrier duality gap nu/t as the
stopping certificate.

Problem sizes here are tiny (a dozen state dimensions at most), so everything
is dense and assembled numerically by probing the affine constraint maps on
basis directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SdpConvergenceError
from .stage_sdp import StageSdpProblem, _carried_term

# The floor LMI is shrunk by this relative amount so the path stays well
# inside it; the floor constraint is optimality-neutral, so any shrink in
# (0, 1) leaves the optimum unchanged while keeping the barrier conditioned.
FLOOR_SHRINK = 0.5


def _sym_basis(n):
    """Basis (i, j) index pairs for the upper triangle of an n x n symmetric."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def _newton_direction(grad, hess):
    """Regularized Newton step; escalates damping until descent is certified.

    The Gram Hessian is PSD in exact arithmetic but can be numerically
    indefinite near block boundaries; Tikhonov damping restores a valid
    decrement without changing the converged answer.
    """
    scale = float(np.max(np.abs(np.diag(hess)))) or 1.0
    reg = 0.0
    for _ in range(24):
        try:
            dv = np.linalg.solve(hess + reg * np.eye(hess.shape[0]), -grad)
        except np.linalg.LinAlgError:
            dv = None
        if dv is not None and np.all(np.isfinite(dv)):
            decrement = float(-grad @ dv)
            if decrement >= 0.0:
                return dv, decrement
        reg = max(reg * 10.0, 1e-14 * scale)
    return -grad / scale, float(grad @ grad) / scale


@dataclass
class IpSolution:
    objective: float
    posterior_cov: np.ndarray
    sigma_eps: np.ndarray
    coupling: np.ndarray
    gap_bound: float
    newton_iterations: int


class _StageLmi:
    """Affine map from the packed variable vector to the barrier blocks."""

    def __init__(self, problem: StageSdpProblem):
        self.problem = problem
        self.n_x = problem.n_x
        self.n_y = problem.n_y
        self.n = self.n_x + self.n_y
        self.carried = _carried_term(problem)
        self.c_mat = problem.c_mat
        self.nominal = problem.nominal.cov.values
        self.theta_sq = problem.radius**2
        self.floor = problem.lambda_floor * (1.0 - FLOOR_SHRINK)

        self.idx_x = _sym_basis(self.n_x)
        self.idx_e = _sym_basis(self.n)
        self.p_x = len(self.idx_x)
        self.p_e = len(self.idx_e)
        self.p_z = self.n * self.n
        self.p = self.p_x + self.p_e + self.p_z

        # Objective: maximize Tr(Sigma_x) -> minimize c^T v.
        self.cost = np.zeros(self.p)
        for k, (i, j) in enumerate(self.idx_x):
            if i == j:
                self.cost[k] = -1.0

        self._build_coefficients()

    # -- variable packing -------------------------------------------------

    def unpack(self, v):
        sx = np.zeros((self.n_x, self.n_x))
        for k, (i, j) in enumerate(self.idx_x):
            sx[i, j] = sx[j, i] = v[k]
        se = np.zeros((self.n, self.n))
        off = self.p_x
        for k, (i, j) in enumerate(self.idx_e):
            se[i, j] = se[j, i] = v[off + k]
        z = v[self.p_x + self.p_e:].reshape(self.n, self.n)
        return sx, se, z

    def pack(self, sx, se, z):
        v = np.zeros(self.p)
        for k, (i, j) in enumerate(self.idx_x):
            v[k] = sx[i, j]
        off = self.p_x
        for k, (i, j) in enumerate(self.idx_e):
            v[off + k] = se[i, j]
        v[self.p_x + self.p_e:] = z.reshape(-1)
        return v

    # -- affine blocks -----------------------------------------------------

    def _blocks(self, v):
        sx, se, z = self.unpack(v)
        n_x = self.n_x
        s_w = se[:n_x, :n_x]
        s_wv = se[:n_x, n_x:]
        s_v = se[n_x:, n_x:]
        prior = self.carried + s_w
        t_mat = prior @ self.c_mat.T + s_wv
        cwv = self.c_mat @ s_wv
        s_mat = self.c_mat @ prior @ self.c_mat.T + s_v + cwv + cwv.T
        g1 = np.block([[prior - sx, t_mat], [t_mat.T, s_mat]])
        g2 = np.block([[self.nominal, z], [z.T, se]])
        g3 = np.array([[self.theta_sq - np.trace(se + self.nominal - 2.0 * z)]])
        g4 = sx
        g5 = se - self.floor * np.eye(self.n)
        return [0.5 * (g + g.T) for g in (g1, g2, g3, g4, g5)]

    def _build_coefficients(self):
        zero = np.zeros(self.p)
        consts = self._blocks(zero)
        self.block_const = consts
        self.block_coeff = []
        probes = []
        for i in range(self.p):
            e = np.zeros(self.p)
            e[i] = 1.0
            probes.append(self._blocks(e))
        for b in range(len(consts)):
            m = consts[b].shape[0]
            coeff = np.empty((self.p, m, m))
            for i in range(self.p):
                coeff[i] = probes[i][b] - consts[b]
            self.block_coeff.append(coeff)
        self.nu = sum(c.shape[0] for c in consts)

    def blocks_at(self, v):
        return [
            self.block_const[b] + np.tensordot(v, self.block_coeff[b], axes=(0, 0))
            for b in range(len(self.block_const))
        ]

    def feasible(self, v):
        for g in self.blocks_at(v):
            try:
                np.linalg.cholesky(g)
            except np.linalg.LinAlgError:
                return False
        return True

    def barrier(self, v):
        total = 0.0
        for g in self.blocks_at(v):
            try:
                ch = np.linalg.cholesky(g)
            except np.linalg.LinAlgError:
                return np.inf
            total -= 2.0 * float(np.sum(np.log(np.diag(ch))))
        return total

    def grad_hess(self, t, v):
        grad = t * self.cost.copy()
        hess = np.zeros((self.p, self.p))
        blocks = self.blocks_at(v)
        for b, g in enumerate(blocks):
            ch = np.linalg.cholesky(g)
            coeff = self.block_coeff[b]
            # W_i = L^-1 F_i L^-T, so grad_i = -Tr(W_i), H_ij = <W_i, W_j>.
            y = np.linalg.solve(ch[None, :, :], coeff)
            w = np.linalg.solve(ch[None, :, :], np.transpose(y, (0, 2, 1)))
            grad -= np.einsum("imm->i", w)
            hess += np.einsum("imn,jmn->ij", w, w)
        return grad, hess

    # -- strictly feasible start -------------------------------------------

    def initial_point(self):
        nom = self.nominal
        se = np.array(nom, copy=True)
        tr_nom = float(np.trace(nom))
        delta = min(0.25, self.theta_sq / (4.0 * tr_nom))
        z = (1.0 - delta) * nom
        n_x = self.n_x
        prior = self.carried + se[:n_x, :n_x]
        t_mat = prior @ self.c_mat.T
        s_mat = self.c_mat @ prior @ self.c_mat.T + se[n_x:, n_x:]
        kalman_post = prior - t_mat @ np.linalg.solve(s_mat, t_mat.T)
        sx = 0.5 * (kalman_post + kalman_post.T) * 0.5
        v = self.pack(sx, se, z)
        if not self.feasible(v):
            # Shrink the posterior guess until strictly interior.
            for _ in range(60):
                sx *= 0.5
                v = self.pack(sx, se, z)
                if self.feasible(v):
                    break
            else:
                raise SdpConvergenceError("interior-point start not strictly feasible")
        return v


def solve_stage_sdp_ip(
    problem: StageSdpProblem,
    gap_tol: float = 1e-7,
    mu: float = 10.0,
    max_newton: int = 400,
) -> IpSolution:
    """Path-following solve; ``gap_tol`` is relative to the objective scale."""
    lmi = _StageLmi(problem)
    v = lmi.initial_point()
    t = 1.0
    newton_total = 0
    for _ in range(80):
        # Newton centering at the current path parameter.
        for _ in range(100):
            grad, hess = lmi.grad_hess(t, v)
            dv, decrement = _newton_direction(grad, hess)
            newton_total += 1
            if newton_total > max_newton:
                raise SdpConvergenceError("interior-point Newton budget exhausted")
            if 0.0 <= decrement / 2.0 <= 1e-11:
                break
            step = 1.0
            psi0 = t * float(lmi.cost @ v) + lmi.barrier(v)
            for _ in range(60):
                cand = v + step * dv
                psi = t * float(lmi.cost @ cand) + lmi.barrier(cand)
                if np.isfinite(psi) and psi <= psi0 + 0.25 * step * float(grad @ dv):
                    break
                step *= 0.5
            else:
                break
            v = v + step * dv
        gap = lmi.nu / t
        obj_scale = max(1.0, abs(float(lmi.cost @ v)))
        if gap <= gap_tol * obj_scale:
            break
        t *= mu
    else:
        raise SdpConvergenceError("interior-point path did not reach gap tolerance")

    sx, se, z = lmi.unpack(v)
    return IpSolution(
        objective=float(np.trace(sx)),
        posterior_cov=sx,
        sigma_eps=se,
        coupling=z,
        gap_bound=gap,
        newton_iterations=newton_total,
    )
