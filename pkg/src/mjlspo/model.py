"""Problem instances, policies and the value types produced by the solvers."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, ModelValidationError

FORMAT = "mjls-v1"
STOCHASTIC_TOL = 1e-12
SYMMETRY_TOL = 1e-10


def _frozen(a, ndim):
    arr = np.array(a, dtype=np.float64, order="C", ndmin=ndim)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MjlsModel:
    """Markov jump linear system with per-mode quadratic costs.

    Mode-indexed matrices are stacked: ``A`` is ``(n_s, d, d)``, ``B`` is
    ``(n_s, d, k)``, ``Q`` is ``(n_s, d, d)`` and ``R`` is ``(n_s, k, k)``.
    ``trans[i, j]`` is the probability of jumping from mode ``i`` to ``j``,
    ``rho`` the initial mode distribution and ``sigma0 = E[x0 x0^T]``.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    trans: np.ndarray
    rho: np.ndarray
    sigma0: np.ndarray

    def __post_init__(self):
        for name, ndim in (("A", 3), ("B", 3), ("Q", 3), ("R", 3), ("trans", 2), ("rho", 1), ("sigma0", 2)):
            object.__setattr__(self, name, _frozen(getattr(self, name), ndim))

    @property
    def n_s(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def k(self) -> int:
        return self.B.shape[2]

    def __eq__(self, other):
        if not isinstance(other, MjlsModel):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("A", "B", "Q", "R", "trans", "rho", "sigma0")
        )

    __hash__ = None

    def closed_loop(self, policy: "Policy") -> np.ndarray:
        """Stack of ``A_i - B_i K_i``."""
        return np.ascontiguousarray(self.A - self.B @ policy.K)

    def stage_weight(self, policy: "Policy") -> np.ndarray:
        """Stack of ``Q_i + K_i^T R_i K_i``."""
        Kt = np.swapaxes(policy.K, 1, 2)
        W = self.Q + Kt @ self.R @ policy.K
        return np.ascontiguousarray(0.5 * (W + np.swapaxes(W, 1, 2)))


@dataclass(frozen=True, eq=False)
class Policy:
    """Per-mode feedback gains, ``u_t = -K_{mode} x_t``; ``K`` is ``(n_s, k, d)``."""

    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", _frozen(self.K, 3))

    @classmethod
    def zeros(cls, m: MjlsModel) -> "Policy":
        return cls(np.zeros((m.n_s, m.k, m.d)))

    @property
    def n_s(self) -> int:
        return self.K.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Policy):
            return NotImplemented
        return np.array_equal(self.K, other.K)

    __hash__ = None

    def check_shape(self, m: MjlsModel):
        if self.K.shape != (m.n_s, m.k, m.d):
            raise ValueError(
                "policy has shape %s, model needs %s" % (self.K.shape, (m.n_s, m.k, m.d))
            )


@dataclass(frozen=True, eq=False)
class CoupledValue:
    """Per-mode value matrices ``P_i`` plus solver diagnostics."""

    P: np.ndarray
    residual: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "P", _frozen(self.P, 3))


@dataclass(frozen=True, eq=False)
class StateCorrelation:
    """Accumulated per-mode state correlations ``S_i = sum_t E[x_t x_t^T 1{mode_t = i}]``."""

    S: np.ndarray
    residual: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "S", _frozen(self.S, 3))

    def chi(self) -> np.ndarray:
        """Dense block-diagonal aggregate. Only for small instances."""
        n_s, d, _ = self.S.shape
        out = np.zeros((n_s * d, n_s * d))
        for i in range(n_s):
            out[i * d:(i + 1) * d, i * d:(i + 1) * d] = self.S[i]
        return out

    def norm(self) -> float:
        """Spectral norm of the block-diagonal aggregate."""
        return float(max(np.linalg.eigvalsh(S)[-1] for S in self.S))

    def sigma_min(self) -> float:
        return float(min(np.linalg.eigvalsh(S)[0] for S in self.S))


@dataclass(frozen=True, eq=False)
class GradientBundle:
    """Gain residuals ``L_i``, gradient blocks ``2 L_i S_i`` and the full Frobenius norm."""

    L: np.ndarray
    grad: np.ndarray
    grad_norm: float


@dataclass(frozen=True)
class Violation:
    field: str
    index: object
    message: str
    magnitude: float = float("nan")

    def __str__(self):
        return self.message


# ---------------------------------------------------------------------------
# validation


def _check_spd(name, M, index, out):
    if M.size == 0:
        return
    asym = float(np.max(np.abs(M - M.T)))
    if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(M)))):
        label = "%s[%s]" % (name, index) if index is not None else name
        out.append(Violation(name, index, "%s not symmetric (max asymmetry %.3g)" % (label, asym), asym))
        return
    lam = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    if not lam > 0.0:
        label = "%s[%s]" % (name, index) if index is not None else name
        out.append(Violation(name, index, "%s not positive definite (min eigenvalue %.3g)" % (label, lam), lam))


def validate_model(m: MjlsModel) -> list:
    """Every violated model invariant; an empty list means the model is valid."""
    out = []
    n_s = m.trans.shape[0]
    d = m.sigma0.shape[0]
    k = m.B.shape[2] if m.B.ndim == 3 else 0
    expected = {
        "A": (n_s, d, d),
        "B": (n_s, d, k),
        "Q": (n_s, d, d),
        "R": (n_s, k, k),
        "trans": (n_s, n_s),
        "rho": (n_s,),
        "sigma0": (d, d),
    }
    for name, shape in expected.items():
        got = getattr(m, name).shape
        if got != shape:
            out.append(Violation(name, None, "%s has shape %s, expected %s" % (name, got, shape)))
    if out:
        return out
    if n_s < 1 or d < 1 or k < 1:
        out.append(Violation("dims", None, "empty dimension (n_s=%d, d=%d, k=%d)" % (n_s, d, k)))
        return out
    for name, arr in (("A", m.A), ("B", m.B), ("Q", m.Q), ("R", m.R), ("trans", m.trans), ("rho", m.rho), ("sigma0", m.sigma0)):
        if not np.all(np.isfinite(arr)):
            out.append(Violation(name, None, "%s has non-finite entries" % name))
    if out:
        return out

    for i in range(n_s):
        row = m.trans[i]
        if np.any(row < 0):
            j = int(np.argmin(row))
            out.append(Violation("trans", (i, j), "trans[%d][%d] is negative (%.17g)" % (i, j, row[j]), float(row[j])))
        s = float(row.sum())
        if abs(s - 1.0) > STOCHASTIC_TOL:
            out.append(Violation("trans", i, "row %d sums to %.17g" % (i, s), s))
    s = float(m.rho.sum())
    if abs(s - 1.0) > STOCHASTIC_TOL:
        out.append(Violation("rho", None, "rho sums to %.17g" % s, s))
    for i in range(n_s):
        if not m.rho[i] > 0.0:
            out.append(Violation("rho", i, "rho[%d] not > 0 (%.17g)" % (i, m.rho[i]), float(m.rho[i])))
    for i in range(n_s):
        _check_spd("Q", m.Q[i], i, out)
        _check_spd("R", m.R[i], i, out)
    _check_spd("sigma0", m.sigma0, None, out)
    return out


# ---------------------------------------------------------------------------
# generation


def generate_random_model(
    n_s: int,
    d: int,
    k: int,
    seed: int,
    dirichlet_self_weight: float = 99.0,
    stability_margin: float = 0.95,
    max_redraws: int = 10,
) -> MjlsModel:
    """Random instance in the style of the 100-mode benchmark.

    Row ``i`` of the transition matrix is Dirichlet with concentration
    ``dirichlet_self_weight + 1`` on the diagonal and 1 elsewhere. ``A_i`` and
    ``B_i`` are standard Gaussian; all ``A_i`` are then scaled by one common
    factor so that the zero policy has mean-square spectral radius exactly
    ``stability_margin``. ``Q_i = R_i = I``, ``sigma0 = I``, ``rho`` uniform.
    """
    from .stability import SolverConfig, ms_spectral_radius

    if min(n_s, d, k) < 1:
        raise ValueError("n_s, d and k must be >= 1")
    if dirichlet_self_weight < 0:
        raise ValueError("dirichlet_self_weight must be >= 0")
    if not 0.0 < stability_margin < 1.0:
        raise ValueError("stability_margin must lie in (0, 1)")

    rng = np.random.default_rng(seed)
    alpha = np.ones((n_s, n_s)) + dirichlet_self_weight * np.eye(n_s)
    trans = np.stack([rng.dirichlet(alpha[i]) for i in range(n_s)])
    # exact row sums; the largest entry absorbs the rounding
    for i in range(n_s):
        j = int(np.argmax(trans[i]))
        trans[i, j] = 0.0
        trans[i, j] = 1.0 - trans[i].sum()
    Q = np.broadcast_to(np.eye(d), (n_s, d, d))
    R = np.broadcast_to(np.eye(k), (n_s, k, k))
    rho = np.full(n_s, 1.0 / n_s)
    sigma0 = np.eye(d)

    for _ in range(max_redraws):
        A = rng.standard_normal((n_s, d, d))
        B = rng.standard_normal((n_s, d, k))
        m = MjlsModel(A, B, Q, R, trans, rho, sigma0)
        r0 = ms_spectral_radius(m, Policy.zeros(m), SolverConfig())
        if r0 > 0.0:
            break
    else:  # pragma: no cover - needs an all-zero Gaussian draw
        raise RuntimeError("open-loop radius is zero; cannot scale to the requested margin")
    # the operator is quadratic in A, so its radius scales with s**2
    s = np.sqrt(stability_margin / r0)
    return MjlsModel(A * s, B, Q, R, trans, rho, sigma0)


# ---------------------------------------------------------------------------
# files


def _fmt(v):
    v = float(v)
    if not np.isfinite(v):
        raise ValueError("cannot serialize non-finite value %r" % v)
    return format(v, ".17g")


def _matrix_json(M):
    return "[" + ", ".join("[" + ", ".join(_fmt(v) for v in row) + "]" for row in M) + "]"


def _stack_json(stack, indent):
    pad = " " * indent
    return "[\n" + ",\n".join(pad + "  " + _matrix_json(M) for M in stack) + "\n" + pad + "]"


def model_to_json(m: MjlsModel) -> str:
    lines = [
        '  "format": %s' % json.dumps(FORMAT),
        '  "n_s": %d' % m.n_s,
        '  "d": %d' % m.d,
        '  "k": %d' % m.k,
    ]
    for name in ("A", "B", "Q", "R"):
        lines.append('  "%s": %s' % (name, _stack_json(getattr(m, name), 2)))
    lines.append('  "trans": %s' % _matrix_json(m.trans))
    lines.append('  "rho": [%s]' % ", ".join(_fmt(v) for v in m.rho))
    lines.append('  "sigma0": %s' % _matrix_json(m.sigma0))
    return "{\n" + ",\n".join(lines) + "\n}\n"


def policy_to_json(pi: Policy) -> str:
    n_s, k, d = pi.K.shape
    return (
        "{\n"
        '  "format": %s,\n  "n_s": %d,\n  "k": %d,\n  "d": %d,\n  "K": %s\n}\n'
        % (json.dumps(FORMAT), n_s, k, d, _stack_json(pi.K, 2))
    )


def _read_json(path):
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError("%s: line %d column %d: %s" % (path, exc.lineno, exc.colno, exc.msg)) from exc
    if not isinstance(doc, dict):
        raise ModelFormatError("%s: top level must be an object" % path)
    fmt = doc.get("format")
    if fmt != FORMAT:
        raise ModelFormatError("%s: field 'format' must be %r, got %r" % (path, FORMAT, fmt), field="format")
    return doc


def _field(doc, name, path, ndim):
    if name not in doc:
        raise ModelFormatError("%s: missing field %r" % (path, name), field=name)
    try:
        arr = np.array(doc[name], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError("%s: field %r is not a numeric array: %s" % (path, name, exc), field=name) from exc
    if arr.ndim != ndim:
        raise ModelFormatError(
            "%s: field %r must be %d-dimensional, got shape %s" % (path, name, ndim, arr.shape), field=name
        )
    return arr


def _dims(doc, names, path):
    out = []
    for name in names:
        if name not in doc:
            raise ModelFormatError("%s: missing field %r" % (path, name), field=name)
        v = doc[name]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ModelFormatError("%s: field %r must be a positive integer" % (path, name), field=name)
        out.append(v)
    return out


def save_model(m: MjlsModel, path):
    Path(path).write_text(model_to_json(m))


def load_model(path) -> MjlsModel:
    """Parse and validate a model file; raises on format or validation errors."""
    doc = _read_json(path)
    n_s, d, k = _dims(doc, ("n_s", "d", "k"), path)
    fields = {}
    for name, ndim in (("A", 3), ("B", 3), ("Q", 3), ("R", 3), ("trans", 2), ("rho", 1), ("sigma0", 2)):
        fields[name] = _field(doc, name, path, ndim)
    expected = {
        "A": (n_s, d, d),
        "B": (n_s, d, k),
        "Q": (n_s, d, d),
        "R": (n_s, k, k),
        "trans": (n_s, n_s),
        "rho": (n_s,),
        "sigma0": (d, d),
    }
    for name, shape in expected.items():
        if fields[name].shape != shape:
            raise ModelFormatError(
                "%s: field %r has shape %s, expected %s" % (path, name, fields[name].shape, shape), field=name
            )
    m = MjlsModel(**fields)
    violations = validate_model(m)
    if violations:
        raise ModelValidationError(violations)
    return m


def save_policy(pi: Policy, path):
    Path(path).write_text(policy_to_json(pi))


def load_policy(path, m: MjlsModel | None = None) -> Policy:
    doc = _read_json(path)
    K = _field(doc, "K", path, 3)
    pi = Policy(K)
    if m is not None:
        try:
            pi.check_shape(m)
        except ValueError as exc:
            raise ModelFormatError("%s: %s" % (path, exc), field="K") from exc
    return pi
