"""Slow, independent reference computations used to cross-check the fast paths."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import kernels
from .errors import NotMeanSquareStable
from .model import CoupledValue, MjlsModel, Policy, StateCorrelation
from .stability import DEFAULT, SolverConfig, power_iteration, solve_coupled_lyapunov, solve_coupled_riccati

DENSE_LIMIT = 4000
X0_LAWS = ("gaussian", "fixed_unit_sphere_scaled")


def _dense_guard(m):
    size = m.n_s * m.d * m.d
    if size > DENSE_LIMIT:
        raise ValueError("dense oracle needs n_s*d^2 <= %d, got %d" % (DENSE_LIMIT, size))
    return size


# ---------------------------------------------------------------------------
# dense Kronecker forms (row-major vec: vec(A X B) = (A kron B^T) vec(X))


def lyapunov_operator(m: MjlsModel, pi: Policy) -> np.ndarray:
    """Dense matrix of ``P -> (phi_i^T E_i(P) phi_i)_i``; block (i, j) is ``p_ij phi_i^T kron phi_i^T``."""
    _dense_guard(m)
    phi = m.closed_loop(pi)
    n_s, d = m.n_s, m.d
    dd = d * d
    M = np.zeros((n_s * dd, n_s * dd))
    for i in range(n_s):
        kr = np.kron(phi[i].T, phi[i].T)
        for j in range(n_s):
            if m.trans[i, j] != 0.0:
                M[i * dd:(i + 1) * dd, j * dd:(j + 1) * dd] = m.trans[i, j] * kr
    return M


def correlation_operator(m: MjlsModel, pi: Policy) -> np.ndarray:
    """Dense ``Lambda`` with block (j, i) equal to ``p_ij phi_i kron phi_i``."""
    _dense_guard(m)
    phi = m.closed_loop(pi)
    n_s, d = m.n_s, m.d
    dd = d * d
    M = np.zeros((n_s * dd, n_s * dd))
    for i in range(n_s):
        kr = np.kron(phi[i], phi[i])
        for j in range(n_s):
            if m.trans[i, j] != 0.0:
                M[j * dd:(j + 1) * dd, i * dd:(i + 1) * dd] = m.trans[i, j] * kr
    return M


def _dense_solve(M, rhs, n_s, d, what):
    N = M.shape[0]
    try:
        x = np.linalg.solve(np.eye(N) - M, rhs.ravel())
    except np.linalg.LinAlgError as exc:
        raise NotMeanSquareStable("%s: singular system, policy is not mean-square stable" % what) from exc
    X = x.reshape(n_s, d, d)
    X = 0.5 * (X + np.swapaxes(X, 1, 2))
    scale = max(1.0, float(np.max(np.abs(X))))
    lam = min(np.linalg.eigvalsh(Xi)[0] for Xi in X)
    if not np.all(np.isfinite(X)) or lam < -1e-9 * scale:
        raise NotMeanSquareStable("%s: solution is not PSD, policy is not mean-square stable" % what)
    return X


def dense_coupled_lyapunov(m: MjlsModel, pi: Policy) -> CoupledValue:
    """Direct solve of ``(I - M) vec(P) = vec(Q + K^T R K)``."""
    M = lyapunov_operator(m, pi)
    P = _dense_solve(M, m.stage_weight(pi), m.n_s, m.d, "dense coupled Lyapunov")
    return CoupledValue(P, 0.0, 1)


def dense_state_correlation(m: MjlsModel, pi: Policy) -> StateCorrelation:
    M = correlation_operator(m, pi)
    base = m.rho[:, None, None] * m.sigma0[None]
    S = _dense_solve(M, base, m.n_s, m.d, "dense state correlation")
    return StateCorrelation(S, 0.0, 1)


def dense_ms_radius(m: MjlsModel, pi: Policy) -> float:
    """Largest eigenvalue modulus of the dense ``Lambda``."""
    return float(np.max(np.abs(np.linalg.eigvals(correlation_operator(m, pi)))))


def dense_cost(m: MjlsModel, pi: Policy) -> float:
    P = dense_coupled_lyapunov(m, pi).P
    return float(np.trace(np.tensordot(m.rho, P, axes=1) @ m.sigma0))


# ---------------------------------------------------------------------------
# classical LQR


@dataclass(frozen=True)
class LtiReference:
    P: np.ndarray
    K: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    sigma0: np.ndarray

    def _check(self, K):
        phi = self.A - self.B @ K
        if np.max(np.abs(np.linalg.eigvals(phi))) >= 1.0:
            raise NotMeanSquareStable("gain does not stabilize the LTI system")
        return phi

    def value(self, K) -> np.ndarray:
        """``P_K = Q + K^T R K + (A - BK)^T P_K (A - BK)``."""
        phi = self._check(K)
        return scipy.linalg.solve_discrete_lyapunov(phi.T, self.Q + K.T @ self.R @ K)

    def cost(self, K) -> float:
        return float(np.trace(self.value(K) @ self.sigma0))

    def correlation(self, K) -> np.ndarray:
        phi = self._check(K)
        return scipy.linalg.solve_discrete_lyapunov(phi, self.sigma0)

    def gradient(self, K) -> np.ndarray:
        """``2((R + B^T P_K B) K - B^T P_K A) Sigma_K``."""
        P = self.value(K)
        return 2.0 * ((self.R + self.B.T @ P @ self.B) @ K - self.B.T @ P @ self.A) @ self.correlation(K)


def lti_lqr_reference(A, B, Q, R, sigma0) -> LtiReference:
    """Classical discrete-time LQR through scipy's DARE and Lyapunov solvers."""
    A, B, Q, R, sigma0 = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (A, B, Q, R, sigma0))
    try:
        P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NotMeanSquareStable("DARE has no stabilizing solution: %s" % exc) from exc
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return LtiReference(P, K, A, B, Q, R, sigma0)


# ---------------------------------------------------------------------------
# finite differences


FD_DENSE_LIMIT = 500


def _polished_cost_fn(m: MjlsModel, pi: Policy):
    """Cost evaluator for policies near ``pi``.

    Sweeps start from the value matrices of ``pi`` and run until the update
    stops shrinking, which drives the error down to rounding level instead
    of stopping at a solver tolerance.
    """
    P0 = solve_coupled_lyapunov(m, pi, SolverConfig(tol=1e-13)).P

    def cost_fn(mm, p):
        phi = mm.closed_loop(p)
        base = mm.stage_weight(p)
        P = np.array(P0)
        prev = np.inf
        for _ in range(100_000):
            Pn = kernels.lyapunov_sweep(phi, mm.trans, P, base)
            step = float(np.max(np.abs(Pn - P)))
            P = Pn
            if step == 0.0 or (step >= prev and step < 1e-13 * float(np.max(np.abs(P)))):
                break
            if not np.isfinite(step) or step > 1e12 * (1.0 + float(np.max(np.abs(P0)))):
                raise NotMeanSquareStable("fixed-point cost diverged")
            prev = step
        else:
            raise NotMeanSquareStable("fixed-point cost did not settle")
        return float(np.trace(np.tensordot(mm.rho, P, axes=1) @ mm.sigma0))

    return cost_fn


def fd_gradient(m: MjlsModel, pi: Policy, h: float = 1e-5, cost_fn=None) -> np.ndarray:
    """Central differences of the cost over every gain entry.

    ``cost_fn(m, pi)`` defaults to the dense Kronecker cost for small
    instances (``n_s d^2 <= 500``) and to a fixed-point solve polished to
    rounding level otherwise; a solver stopped at ``tol`` would leave noise
    that the ``1/h`` factor amplifies.
    """
    if cost_fn is None:
        if m.n_s * m.d * m.d <= FD_DENSE_LIMIT:
            cost_fn = dense_cost
        else:
            cost_fn = _polished_cost_fn(m, pi)

    K = np.array(pi.K)
    grad = np.zeros_like(K)
    for idx in np.ndindex(*K.shape):
        vals = []
        for sign in (1.0, -1.0):
            Kp = K.copy()
            Kp[idx] += sign * h
            try:
                vals.append(cost_fn(m, Policy(Kp)))
            except NotMeanSquareStable as exc:
                raise NotMeanSquareStable(
                    "perturbing K[%d][%d][%d] by %+g leaves the stabilizing set; reduce h" % (idx + (sign * h,))
                ) from exc
        grad[idx] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class McConfig:
    n_rollouts: int = 100_000
    horizon: int = 200
    seed: int = 0
    x0_law: str = "gaussian"
    chunk: int = 10_000

    def __post_init__(self):
        if self.n_rollouts < 1 or self.horizon < 1 or self.chunk < 1:
            raise ValueError("n_rollouts, horizon and chunk must be >= 1")
        if self.x0_law not in X0_LAWS:
            raise ValueError("x0_law must be one of %s" % (X0_LAWS,))


class McResult(NamedTuple):
    estimate: float
    stderr: float
    truncation_bound: float


def _sqrtm_psd(S):
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _cumulative(p):
    c = np.cumsum(p, axis=-1)
    c[..., -1] = 1.0
    return np.ascontiguousarray(c)


def _draw_x0(rng, n, law, root):
    d = root.shape[0]
    z = rng.standard_normal((n, d))
    if law == "gaussian":
        return z @ root.T
    nrm = np.linalg.norm(z, axis=1, keepdims=True)
    nrm[nrm == 0.0] = 1.0
    return np.sqrt(d) * (z / nrm) @ root.T


def mc_cost(m: MjlsModel, pi: Policy, cfg: McConfig = McConfig(), solver: SolverConfig = DEFAULT) -> McResult:
    """Sample mean of the truncated closed-loop cost over independent rollouts.

    Rollouts are drawn in chunks, chunk ``c`` from
    ``default_rng([seed, c])``, so results do not depend on the kernel
    backend. The truncation bound is the scale estimate
    ``estimate * r**horizon / (1 - r)`` with ``r`` the mean-square radius
    (infinite when ``r >= 1``). An unstable policy is not an error: the
    estimate simply blows up.
    """
    phi = m.closed_loop(pi)
    weight = m.stage_weight(pi)
    cum_rho = _cumulative(m.rho)
    cum_trans = _cumulative(m.trans)
    root = _sqrtm_psd(m.sigma0)
    costs = np.empty(cfg.n_rollouts)
    for c, start in enumerate(range(0, cfg.n_rollouts, cfg.chunk)):
        n = min(cfg.chunk, cfg.n_rollouts - start)
        rng = np.random.default_rng([cfg.seed, c])
        x0 = np.ascontiguousarray(_draw_x0(rng, n, cfg.x0_law, root))
        u0 = rng.random(n)
        u = rng.random((n, cfg.horizon))
        costs[start:start + n] = kernels.rollout_costs(phi, weight, cum_rho, cum_trans, x0, u0, u)
    est = float(np.mean(costs))
    se = float(np.std(costs, ddof=1) / np.sqrt(cfg.n_rollouts)) if cfg.n_rollouts > 1 else 0.0
    radius, _, _ = power_iteration(phi, m.trans, solver)
    if radius >= 1.0:
        bound = float("inf")
    else:
        bound = abs(est) * radius ** cfg.horizon / (1.0 - radius)
    return McResult(est, se, bound)


# ---------------------------------------------------------------------------
# random test instances


def random_stabilizing_policy(
    m: MjlsModel,
    rng,
    scale: float = 1.0,
    max_radius: float = 0.98,
    center: Policy | None = None,
    solver: SolverConfig = DEFAULT,
) -> Policy:
    """``center + s G`` with Gaussian ``G``, halving ``s`` until the radius is below ``max_radius``.

    ``center`` defaults to the optimal policy.
    """
    if center is None:
        _, center = solve_coupled_riccati(m, solver)
    G = rng.standard_normal(center.K.shape) / np.sqrt(m.d)
    s = scale
    for _ in range(60):
        pi = Policy(center.K + s * G)
        radius, _, _ = power_iteration(m.closed_loop(pi), m.trans, solver)
        if radius < max_radius:
            return pi
        s *= 0.5
    raise RuntimeError("center policy is not stabilizing with radius < %g" % max_radius)
