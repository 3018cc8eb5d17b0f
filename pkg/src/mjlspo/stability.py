"""Mean-square stability and the coupled Lyapunov / Riccati solvers.

All solvers are fixed-point iterations over stacks of ``d x d`` matrices, so
memory and work per sweep stay at ``O(n_s^2 d^2 + n_s d^3)``; dense Kronecker
forms live in :mod:`mjlspo.oracle`.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import NotConverged, NotMeanSquareStable, RadiusNotConverged
from .model import CoupledValue, MjlsModel, Policy, StateCorrelation

DIVERGENCE_WINDOW = 100
NORM_CAP = 1e12
STABILITY_MARGIN_TOL = 1e-10


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-12
    max_iter: int = 100_000
    power_iter_tol: float = 1e-10
    power_iter_max: int = 50_000

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1 or self.power_iter_max < 1:
            raise ValueError("iteration limits must be >= 1")
        if not self.power_iter_tol > 0:
            raise ValueError("power_iter_tol must be > 0")


DEFAULT = SolverConfig()


def mode_expectation(P, i: int, m: MjlsModel) -> np.ndarray:
    """``E_i(P) = sum_j p_ij P_j``."""
    stack = P.P if isinstance(P, CoupledValue) else np.asarray(P, dtype=np.float64)
    return np.tensordot(m.trans[i], stack, axes=1)


def _stack_norm(X):
    return float(np.sqrt(np.sum(X * X)))


def _relative_residual(X, Y):
    """max_i ||X_i - Y_i||_F / (1 + ||Y_i||_F) and the absolute total."""
    diff = np.sqrt(np.sum((X - Y) ** 2, axis=(1, 2)))
    rhs = np.sqrt(np.sum(Y * Y, axis=(1, 2)))
    return float(np.max(diff / (1.0 + rhs))), float(np.sqrt(np.sum(diff * diff)))


def _fixed_point(sweep, X0, scale, cfg, what, unstable_msg, confirm=None):
    """Iterate ``sweep`` to a fixed point.

    Growth of the residual over a window, or a huge iterate, signals
    divergence. Non-normal but stable maps can show either for a long
    transient, so when ``confirm`` is given it is asked once (it returns
    True when the map really is unstable) and the heuristics are dropped if
    it says otherwise.
    """
    X = np.ascontiguousarray(X0, dtype=np.float64)
    window = deque(maxlen=DIVERGENCE_WINDOW + 1)
    cap = NORM_CAP * max(scale, 1e-300)
    heuristics = True
    rel = float("inf")
    for it in range(1, cfg.max_iter + 1):
        Y = sweep(X)
        rel, absres = _relative_residual(X, Y)
        if not np.isfinite(rel):
            raise NotMeanSquareStable("%s: non-finite iterate (%s)" % (what, unstable_msg), rel, it)
        if rel <= cfg.tol:
            return Y, rel, it
        if heuristics:
            window.append(absres)
            reason = None
            if _stack_norm(Y) > cap:
                reason = "iterate norm exceeded %.0e x ||Q||" % NORM_CAP
            elif len(window) == window.maxlen and absres > window[0] > 0.0:
                reason = "residual grew over %d sweeps" % DIVERGENCE_WINDOW
            if reason is not None:
                if confirm is None or confirm():
                    raise NotMeanSquareStable("%s: %s (%s)" % (what, reason, unstable_msg), rel, it)
                heuristics = False
        X = Y
    raise NotConverged("%s: no convergence in %d sweeps (residual %.3g)" % (what, cfg.max_iter, rel), rel, cfg.max_iter)


def _unstable_confirm(phi, trans, cfg):
    def confirm():
        radius, _, _ = power_iteration(phi, trans, cfg)
        return radius >= 1.0
    return confirm


# ---------------------------------------------------------------------------
# mean-square stability


PLAIN_POWER_SWEEPS = 1000


def _power_sweeps(phi, trans, X, shift, tol, budget):
    """Iterate ``X -> T(X) + shift X``, normalized. Returns ``(est, X, sweeps, converged)``."""
    prev = None
    diffs = deque(maxlen=10)
    est = 0.0
    for it in range(1, budget + 1):
        Y = kernels.correlation_sweep(phi, trans, X, shift * X)
        est = _stack_norm(Y)
        if est == 0.0:
            return 0.0, X, it, True
        X = Y / est
        if prev is not None:
            diff = abs(est - prev)
            scale = max(1.0, est)
            if diff <= 1e-15 * scale:
                return est, X, it, True
            if len(diffs) == diffs.maxlen:
                # geometric tail estimate: error ~ diff q / (1 - q)
                q = max(b / a if a > 0 else 1.0 for a, b in zip(list(diffs), list(diffs)[1:] + [diff]))
                if q < 1.0 and diff * q / (1.0 - q) <= tol * scale:
                    return est, X, it, True
            diffs.append(diff)
        prev = est
    return est, X, budget, False


def power_iteration(phi, trans, cfg: SolverConfig = DEFAULT, init=None):
    """Spectral radius of ``X -> (sum_i p_ij phi_i X_i phi_i^T)_j``.

    Returns ``(radius, normalized iterate, sweeps)``. Starts from identities
    unless ``init`` (a PSD stack) is given.

    The operator maps the PSD cone into itself, so its spectral radius is an
    eigenvalue, but complex closed-loop eigenvalues can put other eigenvalues
    on the same circle and make the plain iteration oscillate. If it has not
    settled after ``PLAIN_POWER_SWEEPS`` sweeps it restarts on ``T + a I``
    with ``a`` the last estimate, whose dominant eigenvalue ``radius + a`` is
    strictly larger in modulus than all others.
    """
    n_s, d, _ = phi.shape
    if init is None:
        X = np.broadcast_to(np.eye(d), (n_s, d, d)).copy()
    else:
        X = np.array(init, dtype=np.float64, order="C")
    nrm = _stack_norm(X)
    if nrm == 0.0:
        X = np.broadcast_to(np.eye(d), (n_s, d, d)).copy()
        nrm = _stack_norm(X)
    X /= nrm
    plain = min(PLAIN_POWER_SWEEPS, cfg.power_iter_max)
    est, X, used, ok = _power_sweeps(phi, trans, X, 0.0, cfg.power_iter_tol, plain)
    if ok:
        return est, X, used
    if used < cfg.power_iter_max:
        shift = est
        total, X, more, ok = _power_sweeps(phi, trans, X, shift, cfg.power_iter_tol, cfg.power_iter_max - used)
        est = total - shift
        if ok:
            return est, X, used + more
    raise RadiusNotConverged(
        "radius estimate not converged after %d sweeps (last %.12g)" % (cfg.power_iter_max, est),
        est,
        X,
        cfg.power_iter_max,
    )


def ms_spectral_radius(m: MjlsModel, pi: Policy, cfg: SolverConfig = DEFAULT) -> float:
    """Mean-square spectral radius of the closed loop; MS-stable iff < 1."""
    pi.check_shape(m)
    radius, _, _ = power_iteration(m.closed_loop(pi), m.trans, cfg)
    return radius


def is_ms_stabilizing(m: MjlsModel, pi: Policy, cfg: SolverConfig = DEFAULT):
    """``(stable, margin)`` with ``margin = 1 - radius``."""
    radius = ms_spectral_radius(m, pi, cfg)
    return radius < 1.0 - STABILITY_MARGIN_TOL, 1.0 - radius


# ---------------------------------------------------------------------------
# coupled Lyapunov / state correlation


def _q_scale(m):
    return max(float(np.max(np.linalg.norm(m.Q, ord=2, axis=(1, 2)))), 1e-300)


def solve_coupled_lyapunov(m: MjlsModel, pi: Policy, cfg: SolverConfig = DEFAULT, init=None) -> CoupledValue:
    """``P_i = Q_i + K_i^T R_i K_i + phi_i^T E_i(P) phi_i`` by fixed-point iteration.

    From the default zero start the iterates increase monotonically, and
    converge exactly when the policy is mean-square stabilizing.
    """
    pi.check_shape(m)
    phi = m.closed_loop(pi)
    base = m.stage_weight(pi)
    X0 = np.zeros_like(base) if init is None else (init.P if isinstance(init, CoupledValue) else init)
    scale = max(_q_scale(m), float(np.max(np.linalg.norm(base, ord=2, axis=(1, 2)))))
    P, res, it = _fixed_point(
        lambda X: kernels.lyapunov_sweep(phi, m.trans, X, base),
        X0,
        scale,
        cfg,
        "coupled Lyapunov",
        "policy is not mean-square stabilizing",
        _unstable_confirm(phi, m.trans, cfg),
    )
    return CoupledValue(P, res, it)


def initial_correlation(m: MjlsModel) -> np.ndarray:
    """``X_i(0) = rho_i sigma0``."""
    return np.ascontiguousarray(m.rho[:, None, None] * m.sigma0[None, :, :])


def solve_state_correlation(m: MjlsModel, pi: Policy, cfg: SolverConfig = DEFAULT, init=None) -> StateCorrelation:
    """``S_j = rho_j sigma0 + sum_i p_ij phi_i S_i phi_i^T`` by fixed-point iteration."""
    pi.check_shape(m)
    phi = m.closed_loop(pi)
    base = initial_correlation(m)
    X0 = base if init is None else (init.S if isinstance(init, StateCorrelation) else init)
    scale = float(np.linalg.norm(m.sigma0, 2))
    S, res, it = _fixed_point(
        lambda X: kernels.correlation_sweep(phi, m.trans, X, base),
        X0,
        scale,
        cfg,
        "state correlation",
        "policy is not mean-square stabilizing",
        _unstable_confirm(phi, m.trans, cfg),
    )
    return StateCorrelation(S, res, it)


# ---------------------------------------------------------------------------
# coupled Riccati


def riccati_gain(m: MjlsModel, P) -> Policy:
    """``K_i = (R_i + B_i^T E_i(P) B_i)^{-1} B_i^T E_i(P) A_i``."""
    stack = P.P if isinstance(P, CoupledValue) else np.asarray(P, dtype=np.float64)
    E = kernels.expectation(m.trans, np.ascontiguousarray(stack))
    Bt = np.swapaxes(m.B, 1, 2)
    G = m.R + Bt @ E @ m.B
    return Policy(np.linalg.solve(G, Bt @ E @ m.A))


def riccati_residual(m: MjlsModel, P) -> float:
    """Relative residual of the coupled Riccati equations at ``P``."""
    stack = np.ascontiguousarray(P.P if isinstance(P, CoupledValue) else P, dtype=np.float64)
    rhs = kernels.riccati_sweep(m.A, m.B, m.Q, m.R, m.trans, stack)
    return _relative_residual(stack, rhs)[0]


def solve_coupled_riccati(m: MjlsModel, cfg: SolverConfig = DEFAULT):
    """Value iteration on the coupled Riccati equations from ``P = Q``.

    Returns ``(CoupledValue P*, Policy K*)``. Raises
    :class:`NotMeanSquareStable` when the iterates blow up (no mean-square
    stabilizing policy exists) and :class:`NotConverged` when ``max_iter``
    runs out.
    """
    P, res, it = _fixed_point(
        lambda X: kernels.riccati_sweep(m.A, m.B, m.Q, m.R, m.trans, X),
        np.array(m.Q, order="C"),
        _q_scale(m),
        cfg,
        "coupled Riccati",
        "model is not mean-square stabilizable",
    )
    value = CoupledValue(P, res, it)
    return value, riccati_gain(m, value)
