"""Hot loops shared by the solvers and the Monte-Carlo oracle.

Every kernel exists twice: a numba ``@njit`` version and a vectorized numpy
version with identical arguments. The active backend is chosen at import from
``MJLSPO_DISABLE_NUMBA`` and can be switched with :func:`set_backend`.

Conventions: mode-indexed matrices are stacked C-contiguous float64 arrays of
shape ``(n_s, rows, cols)``; ``phi`` holds the closed-loop matrices
``A_i - B_i K_i``.
"""
import contextlib

import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# numpy backend


def _expectation_np(trans, P):
    n_s, d, _ = P.shape
    return (trans @ P.reshape(n_s, d * d)).reshape(n_s, d, d)


def _symmetrize(X):
    return 0.5 * (X + np.swapaxes(X, 1, 2))


def _lyapunov_sweep_np(phi, trans, P, base):
    E = _expectation_np(trans, P)
    out = base + np.swapaxes(phi, 1, 2) @ E @ phi
    return _symmetrize(out)


def _correlation_sweep_np(phi, trans, S, base):
    n_s, d, _ = S.shape
    Y = phi @ S @ np.swapaxes(phi, 1, 2)
    out = base + (trans.T @ Y.reshape(n_s, d * d)).reshape(n_s, d, d)
    return _symmetrize(out)


def _riccati_sweep_np(A, B, Q, R, trans, P):
    E = _expectation_np(trans, P)
    At = np.swapaxes(A, 1, 2)
    Bt = np.swapaxes(B, 1, 2)
    EA = E @ A
    G = R + Bt @ E @ B
    H = Bt @ EA
    out = Q + At @ EA - np.swapaxes(H, 1, 2) @ np.linalg.solve(G, H)
    return _symmetrize(out)


def _rollout_costs_np(phi, weight, cum_rho, cum_trans, x0, u0, u):
    n, _ = x0.shape
    horizon = u.shape[1]
    modes = np.argmax(u0[:, None] < cum_rho[None, :], axis=1)
    x = x0.copy()
    total = np.zeros(n)
    for t in range(horizon):
        total += np.einsum("na,nab,nb->n", x, weight[modes], x)
        x = np.einsum("nab,nb->na", phi[modes], x)
        modes = np.argmax(u[:, t, None] < cum_trans[modes], axis=1)
    return total


# ---------------------------------------------------------------------------
# numba backend


@njit
def _expectation_nb(trans, P):
    n_s, d, _ = P.shape
    flat = np.ascontiguousarray(P).reshape(n_s, d * d)
    return np.dot(trans, flat).reshape(n_s, d, d)


@njit
def _lyapunov_sweep_nb(phi, trans, P, base):
    n_s, d, _ = P.shape
    E = _expectation_nb(trans, P)
    out = np.empty_like(P)
    for i in range(n_s):
        M = base[i] + np.dot(phi[i].T, np.dot(E[i], phi[i]))
        out[i] = 0.5 * (M + M.T)
    return out


@njit
def _correlation_sweep_nb(phi, trans, S, base):
    n_s, d, _ = S.shape
    Y = np.empty_like(S)
    for i in range(n_s):
        Y[i] = np.dot(phi[i], np.dot(S[i], phi[i].T))
    acc = np.dot(np.ascontiguousarray(trans.T), Y.reshape(n_s, d * d)).reshape(n_s, d, d)
    out = np.empty_like(S)
    for j in range(n_s):
        M = base[j] + acc[j]
        out[j] = 0.5 * (M + M.T)
    return out


@njit
def _riccati_sweep_nb(A, B, Q, R, trans, P):
    n_s = P.shape[0]
    E = _expectation_nb(trans, P)
    out = np.empty_like(P)
    for i in range(n_s):
        EA = np.dot(E[i], A[i])
        G = R[i] + np.dot(B[i].T, np.dot(E[i], B[i]))
        H = np.dot(B[i].T, EA)
        M = Q[i] + np.dot(A[i].T, EA) - np.dot(H.T, np.linalg.solve(G, H))
        out[i] = 0.5 * (M + M.T)
    return out


@njit
def _draw(cum, v):
    n = cum.shape[0]
    for j in range(n - 1):
        if v < cum[j]:
            return j
    return n - 1


@njit
def _rollout_costs_nb(phi, weight, cum_rho, cum_trans, x0, u0, u):
    n, d = x0.shape
    horizon = u.shape[1]
    out = np.empty(n)
    x = np.empty(d)
    y = np.empty(d)
    for r in range(n):
        mode = _draw(cum_rho, u0[r])
        for a in range(d):
            x[a] = x0[r, a]
        total = 0.0
        for t in range(horizon):
            W = weight[mode]
            F = phi[mode]
            for a in range(d):
                wa = 0.0
                fa = 0.0
                for b in range(d):
                    wa += W[a, b] * x[b]
                    fa += F[a, b] * x[b]
                total += x[a] * wa
                y[a] = fa
            for a in range(d):
                x[a] = y[a]
            mode = _draw(cum_trans[mode], u[r, t])
        out[r] = total
    return out


# ---------------------------------------------------------------------------
# dispatch

_NAMES = ("expectation", "lyapunov_sweep", "correlation_sweep", "riccati_sweep", "rollout_costs")
_BACKENDS = {
    "numpy": {name: globals()["_%s_np" % name] for name in _NAMES},
}
if _accel.HAVE_NUMBA:
    _BACKENDS["numba"] = {name: globals()["_%s_nb" % name] for name in _NAMES}

_active = "numba" if _accel.USE_NUMBA else "numpy"


def available_backends():
    return tuple(_BACKENDS)


def backend():
    """Name of the active backend."""
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError("unknown kernel backend %r (have %s)" % (name, ", ".join(_BACKENDS)))
    _active = name


@contextlib.contextmanager
def using_backend(name):
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def get_kernel(name, which=None):
    return _BACKENDS[which or _active][name]


def expectation(trans, P):
    """Stack of ``E_i(P) = sum_j p_ij P_j``."""
    return _BACKENDS[_active]["expectation"](trans, P)


def lyapunov_sweep(phi, trans, P, base):
    """One sweep ``base_i + phi_i^T E_i(P) phi_i`` (symmetrized)."""
    return _BACKENDS[_active]["lyapunov_sweep"](phi, trans, P, base)


def correlation_sweep(phi, trans, S, base):
    """One sweep ``base_j + sum_i p_ij phi_i S_i phi_i^T`` (symmetrized)."""
    return _BACKENDS[_active]["correlation_sweep"](phi, trans, S, base)


def riccati_sweep(A, B, Q, R, trans, P):
    """One value-iteration sweep of the coupled Riccati map."""
    return _BACKENDS[_active]["riccati_sweep"](A, B, Q, R, trans, P)


def rollout_costs(phi, weight, cum_rho, cum_trans, x0, u0, u):
    """Truncated closed-loop cost of each rollout.

    ``x0`` is ``(n, d)``; ``u0`` the uniforms drawing the initial modes;
    ``u[r, t]`` the uniform drawing the mode at ``t + 1`` of rollout ``r``;
    ``weight[i] = Q_i + K_i^T R_i K_i``. Cumulative tables must end in 1.0.
    """
    return _BACKENDS[_active]["rollout_costs"](phi, weight, cum_rho, cum_trans, x0, u0, u)
