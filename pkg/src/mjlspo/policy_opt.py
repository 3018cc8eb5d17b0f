"""Cost, exact policy gradient, Gauss-Newton / natural / vanilla policy steps,
the optimizer loop, and runtime checks of the convergence theory.

Block-diagonal quantities (``R^``, ``B^``, ``chi``, ``L^``) are never
materialized: their norms are max/min over per-mode blocks and their traces
are sums of per-mode traces.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CertificationViolation, NotMeanSquareStable
from .model import CoupledValue, GradientBundle, MjlsModel, Policy, StateCorrelation
from .stability import (
    DEFAULT,
    STABILITY_MARGIN_TOL,
    SolverConfig,
    power_iteration,
    solve_coupled_lyapunov,
    solve_coupled_riccati,
    solve_state_correlation,
)

log = logging.getLogger(__name__)

GAUSS_NEWTON = "gauss_newton"
NATURAL_PG = "natural_pg"
VANILLA_PG = "vanilla_pg"
METHODS = (GAUSS_NEWTON, NATURAL_PG, VANILLA_PG)
ALIASES = {"gn": GAUSS_NEWTON, "npg": NATURAL_PG, "pg": VANILLA_PG}

CHECK_SLACK = 1e-9
CSV_COLUMNS = ("iter", "cost", "percent_error", "grad_norm", "ms_radius", "eta", "rate_residual")


class UncertifiedStepWarning(UserWarning):
    """Step size outside the range where stability/convergence is guaranteed."""


def canonical_method(name: str) -> str:
    name = ALIASES.get(name.lower(), name.lower())
    if name not in METHODS:
        raise ValueError("unknown method %r; expected one of %s" % (name, ", ".join(METHODS + tuple(ALIASES))))
    return name


@dataclass(frozen=True)
class OptimizerConfig:
    """``eta`` is a number, ``"auto"`` or ``"global"``.

    ``"auto"``: 1/2 for Gauss-Newton; for the natural gradient the largest
    step with a per-iterate stability certificate, ``1/(2 max_i ||R_i + B_i^T
    E_i(P) B_i||)``; ``vanilla_eta`` for vanilla PG. ``"global"`` uses the
    fixed bound of :func:`max_step` computed at the initial policy.
    """

    method: str = GAUSS_NEWTON
    eta: float | str = "auto"
    max_iters: int = 1000
    rel_gap_tol: float = 1e-10
    record_checks: bool = False
    gain_tol: float | None = None
    vanilla_eta: float = 1e-4
    solver: SolverConfig = DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if isinstance(self.eta, str):
            if self.eta not in ("auto", "global"):
                raise ValueError("eta must be a positive number, 'auto' or 'global'")
        elif not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_gap_tol > 0:
            raise ValueError("rel_gap_tol must be > 0")


# ---------------------------------------------------------------------------
# policy evaluation


@dataclass(frozen=True, eq=False)
class Evaluation:
    """Everything the steps and checks need about one stabilizing policy."""

    policy: Policy
    value: CoupledValue
    correlation: StateCorrelation | None
    E: np.ndarray  # E_i(P)
    Psi: np.ndarray  # R_i + B_i^T E_i(P) B_i
    L: np.ndarray
    cost: float

    @property
    def grad(self) -> np.ndarray:
        return 2.0 * self.L @ self.correlation.S

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad.ravel()))


def _cost_from_value(m: MjlsModel, P: np.ndarray) -> float:
    return float(np.trace(np.tensordot(m.rho, P, axes=1) @ m.sigma0))


def _residuals(m: MjlsModel, K: np.ndarray, P: np.ndarray):
    E = kernels.expectation(m.trans, np.ascontiguousarray(P))
    Bt = np.swapaxes(m.B, 1, 2)
    Psi = m.R + Bt @ E @ m.B
    L = Psi @ K - Bt @ E @ m.A
    return E, Psi, L


def evaluate(
    m: MjlsModel,
    pi: Policy,
    cfg: SolverConfig = DEFAULT,
    warm: Evaluation | None = None,
    correlation: bool = True,
) -> Evaluation:
    value = solve_coupled_lyapunov(m, pi, cfg, init=None if warm is None else warm.value)
    corr = None
    if correlation:
        init = None if warm is None or warm.correlation is None else warm.correlation
        corr = solve_state_correlation(m, pi, cfg, init=init)
    E, Psi, L = _residuals(m, pi.K, value.P)
    return Evaluation(pi, value, corr, E, Psi, L, _cost_from_value(m, value.P))


def cost(m: MjlsModel, pi: Policy, cfg: SolverConfig = DEFAULT) -> float:
    """``C(K) = tr((sum_i rho_i P_i) sigma0)``.

    Raises :class:`NotMeanSquareStable` for a non-stabilizing policy (whose
    cost is infinite).
    """
    return _cost_from_value(m, solve_coupled_lyapunov(m, pi, cfg).P)


def gain_residuals(m: MjlsModel, pi: Policy, P: CoupledValue) -> np.ndarray:
    """``L_i = (R_i + B_i^T E_i(P) B_i) K_i - B_i^T E_i(P) A_i``."""
    return _residuals(m, pi.K, P.P)[2]


def policy_gradient(m: MjlsModel, pi: Policy, cfg: SolverConfig = DEFAULT) -> GradientBundle:
    ev = evaluate(m, pi, cfg)
    grad = ev.grad
    return GradientBundle(ev.L, grad, float(np.linalg.norm(grad.ravel())))


def mu(m: MjlsModel) -> float:
    """``min_i rho_i * sigma_min(sigma0)``."""
    return float(np.min(m.rho) * np.linalg.eigvalsh(m.sigma0)[0])


def _block_norm(stack) -> float:
    return float(np.max(np.linalg.norm(stack, ord=2, axis=(1, 2))))


def _block_sigma_min(stack) -> float:
    return float(np.min(np.linalg.svd(stack, compute_uv=False)[:, -1]))


def max_step(m: MjlsModel, pi0_or_cost, method: str, cfg: SolverConfig = DEFAULT, heuristic: float = 1e-4) -> float:
    """Largest step size covered by the global convergence guarantee.

    Gauss-Newton: 1/2. Natural gradient: ``1/(2(||R^|| + ||B^||^2 C(K0)/mu))``.
    Vanilla PG has no guarantee; ``heuristic`` is returned with an
    :class:`UncertifiedStepWarning`.
    """
    method = canonical_method(method)
    if method == GAUSS_NEWTON:
        return 0.5
    if method == VANILLA_PG:
        warnings.warn("vanilla policy gradient has no step-size certificate", UncertifiedStepWarning, stacklevel=2)
        return float(heuristic)
    c0 = pi0_or_cost if not isinstance(pi0_or_cost, Policy) else cost(m, pi0_or_cost, cfg)
    c0 = float(c0)
    if not math.isfinite(c0):
        raise NotMeanSquareStable("initial policy has infinite cost")
    return 1.0 / (2.0 * (_block_norm(m.R) + _block_norm(m.B) ** 2 * c0 / mu(m)))


def npg_stability_bound(ev: Evaluation) -> float:
    """``1/(2 max_i ||R_i + B_i^T E_i(P) B_i||)``: keeps the next NPG iterate stabilizing."""
    return 1.0 / (2.0 * _block_norm(ev.Psi))


def contraction(method: str, eta: float, mu_: float, chi_star_norm: float, sigma_min_R: float = 1.0) -> float:
    """Per-step contraction ``c`` of the gap bound ``gap' <= (1 - c) gap``."""
    method = canonical_method(method)
    if method == GAUSS_NEWTON:
        return 2.0 * eta * mu_ / chi_star_norm
    if method == NATURAL_PG:
        return 2.0 * eta * mu_ * sigma_min_R / chi_star_norm
    raise ValueError("no contraction guarantee for %s" % method)


# ---------------------------------------------------------------------------
# steps


def _gn_update(ev: Evaluation, eta: float) -> Policy:
    return Policy(ev.policy.K - 2.0 * eta * np.linalg.solve(ev.Psi, ev.L))


def _npg_update(ev: Evaluation, eta: float) -> Policy:
    return Policy(ev.policy.K - 2.0 * eta * ev.L)


def _pg_update(ev: Evaluation, eta: float) -> Policy:
    return Policy(ev.policy.K - eta * ev.grad)


def _warn_uncertified(what, eta, bound):
    warnings.warn(
        "%s step eta=%.6g exceeds the certified bound %.6g" % (what, eta, bound), UncertifiedStepWarning, stacklevel=3
    )


def step_gauss_newton(m: MjlsModel, pi: Policy, eta: float, cfg: SolverConfig = DEFAULT) -> Policy:
    """``K_i - 2 eta (R_i + B_i^T E_i(P) B_i)^{-1} L_i``; stabilizing for ``eta <= 1/2``."""
    if eta > 0.5:
        _warn_uncertified("Gauss-Newton", eta, 0.5)
    return _gn_update(evaluate(m, pi, cfg, correlation=False), eta)


def step_natural_pg(m: MjlsModel, pi: Policy, eta: float, cfg: SolverConfig = DEFAULT) -> Policy:
    """``K_i - 2 eta L_i``, i.e. ``K - eta grad chi^{-1}``."""
    ev = evaluate(m, pi, cfg, correlation=False)
    bound = npg_stability_bound(ev)
    if eta > bound:
        _warn_uncertified("natural gradient", eta, bound)
    return _npg_update(ev, eta)


def step_vanilla_pg(m: MjlsModel, pi: Policy, eta: float, cfg: SolverConfig = DEFAULT) -> Policy:
    """``K_i - eta grad_i``. No stability certificate: re-check the result."""
    return _pg_update(evaluate(m, pi, cfg), eta)


_UPDATES = {GAUSS_NEWTON: _gn_update, NATURAL_PG: _npg_update, VANILLA_PG: _pg_update}


# ---------------------------------------------------------------------------
# reference solution


@dataclass(frozen=True, eq=False)
class Reference:
    """Optimal policy with the quantities the rate bounds need."""

    policy: Policy
    value: CoupledValue
    correlation: StateCorrelation
    cost: float

    @property
    def chi_norm(self) -> float:
        return self.correlation.norm()


def reference_solution(m: MjlsModel, cfg: SolverConfig = DEFAULT) -> Reference:
    _, kstar = solve_coupled_riccati(m, cfg)
    return reference_from_policy(m, kstar, cfg)


def reference_from_policy(m: MjlsModel, kstar: Policy, cfg: SolverConfig = DEFAULT) -> Reference:
    ev = evaluate(m, kstar, cfg)
    return Reference(kstar, ev.value, ev.correlation, ev.cost)


# ---------------------------------------------------------------------------
# certificate checks


def _almost_smoothness(ev: Evaluation, ev_next: Evaluation) -> float:
    dK = ev.policy.K - ev_next.policy.K
    Sp = ev_next.correlation.S
    dKt = np.swapaxes(dK, 1, 2)
    first = -2.0 * np.einsum("iab,iba->", Sp, dKt @ ev.L)
    second = np.einsum("iab,iba->", Sp, dKt @ ev.Psi @ dK)
    lhs = ev_next.cost - ev.cost
    return abs(lhs - (first + second)) / (1.0 + abs(lhs))


def check_almost_smoothness(m: MjlsModel, piA: Policy, piB: Policy, cfg: SolverConfig = DEFAULT) -> float:
    """Residual of the exact cost-difference expansion between two stabilizing policies.

    ``C(K') - C(K) = -2 sum_i tr(S'_i dK_i^T L_i) + sum_i tr(S'_i dK_i^T Psi_i dK_i)``
    with ``dK = K - K'``, ``L`` and ``Psi`` at ``K = piA`` and ``S'`` at
    ``K' = piB``. Returns ``|lhs - rhs| / (1 + |lhs|)``.
    """
    return _almost_smoothness(evaluate(m, piA, cfg, correlation=False), evaluate(m, piB, cfg))


def _domination_terms(m: MjlsModel, ev: Evaluation, cstar: float, chi_star_norm: float):
    L = ev.L
    Lt = np.swapaxes(L, 1, 2)
    psi_term = float(np.einsum("iaa->", Lt @ np.linalg.solve(ev.Psi, L)))
    l_term = float(np.sum(L * L))
    g = ev.grad
    g_term = float(np.sum(g * g))
    smin_R = _block_sigma_min(m.R)
    mu_ = mu(m)
    return (
        ev.cost - cstar,
        chi_star_norm * psi_term,
        chi_star_norm / smin_R * l_term,
        chi_star_norm / (mu_ * mu_ * smin_R) * g_term,
    )


def gradient_domination_terms(m: MjlsModel, pi: Policy, cstar: float, chi_star_norm: float, cfg: SolverConfig = DEFAULT):
    """``(gap, t1, t2, t3)``; the chain ``gap <= t1 <= t2 <= t3`` must hold."""
    return _domination_terms(m, evaluate(m, pi, cfg), cstar, chi_star_norm)


def _domination_ok(terms, cstar):
    gap, t1, t2, t3 = terms
    return (
        gap <= t1 + CHECK_SLACK * (abs(t1) + abs(cstar)),
        t1 <= t2 * (1.0 + CHECK_SLACK),
        t2 <= t3 * (1.0 + CHECK_SLACK),
    )


def check_gradient_domination(m: MjlsModel, pi: Policy, cstar: float, chi_star_norm: float, cfg: SolverConfig = DEFAULT):
    """The three chained gradient-domination inequalities, as booleans."""
    return _domination_ok(gradient_domination_terms(m, pi, cstar, chi_star_norm, cfg), cstar)


def _lower_bound_ok(m: MjlsModel, ev: Evaluation) -> bool:
    lhs = float(np.sum(np.linalg.norm(ev.value.P, ord=2, axis=(1, 2))))
    rhs = ev.cost / mu(m)
    return lhs <= rhs * (1.0 + CHECK_SLACK)


def check_cost_lower_bound(m: MjlsModel, pi: Policy, cfg: SolverConfig = DEFAULT) -> bool:
    """``sum_i ||P_i|| <= C(K) / mu``."""
    return _lower_bound_ok(m, evaluate(m, pi, cfg, correlation=False))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class IterationRecord:
    iter: int
    cost: float
    grad_norm: float
    ms_radius: float
    eta: float = float("nan")  # step taken from this iterate; nan on the last row
    certified: bool | None = None
    gap: float | None = None
    rate_residual: float | None = None  # relative to C*, for the step that produced this iterate
    checks: dict = field(default_factory=dict)

    @property
    def percent_error(self):
        return None if self.gap is None else 100.0 * self.gap


@dataclass
class ConvergenceReport:
    method: str
    records: list
    policy: Policy
    mu: float
    certified: bool
    converged: bool
    flags: list = field(default_factory=list)
    reference_cost: float | None = None
    chi_star_norm: float | None = None
    sigma_min_R: float = 1.0
    eta_setting: object = "auto"
    policies: list | None = None

    @property
    def iterations(self) -> int:
        return self.records[-1].iter

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.records])

    @property
    def final_gap(self):
        return self.records[-1].gap

    def summary(self) -> dict:
        return {
            "method": self.method,
            "eta": self.eta_setting,
            "iterations": self.iterations,
            "final_cost": self.records[-1].cost,
            "final_gap": self.final_gap,
            "reference_cost": self.reference_cost,
            "chi_star_norm": self.chi_star_norm,
            "mu": self.mu,
            "certified": self.certified,
            "converged": self.converged,
            "flags": list(self.flags),
            "backend": kernels.backend(),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                w.writerow([r.iter] + [_csv_num(v) for v in (r.cost, r.percent_error, r.grad_norm, r.ms_radius, r.eta, r.rate_residual)])

    def write_summary(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _csv_num(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return format(float(v), ".17g")


def read_trace(path) -> list:
    """Rows of a trace CSV as dicts of floats (None for blanks)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError("%s: missing trace columns %s" % (path, ", ".join(missing)))
        for row in reader:
            out.append({k: (float(v) if v != "" else None) for k, v in row.items()})
    return out


def _is_certified(method, eta, ev):
    if method == GAUSS_NEWTON:
        return eta <= 0.5
    if method == NATURAL_PG:
        return eta <= npg_stability_bound(ev) * (1.0 + 1e-12)
    return False


def optimize(
    m: MjlsModel,
    pi0: Policy,
    cfg: OptimizerConfig = OptimizerConfig(),
    reference: Reference | None = None,
    keep_policies: bool = False,
) -> ConvergenceReport:
    """Run the configured policy optimization method from ``pi0``.

    With a ``reference`` the run stops once the relative gap
    ``(C - C*)/C*`` is at most ``rel_gap_tol`` (and, if ``gain_tol`` is set,
    the gains are entrywise within ``gain_tol`` of ``K*``); without one it
    stops on ``grad_norm <= rel_gap_tol (1 + C)``. Raises
    :class:`NotMeanSquareStable` if ``pi0`` is not stabilizing and
    :class:`CertificationViolation` if a certified step loses stability.
    """
    pi0.check_shape(m)
    solver = cfg.solver
    method = cfg.method
    radius, eig, _ = power_iteration(m.closed_loop(pi0), m.trans, solver)
    if radius >= 1.0 - STABILITY_MARGIN_TOL:
        raise NotMeanSquareStable("initial policy is not mean-square stabilizing (radius %.12g)" % radius)
    ev = evaluate(m, pi0, solver)

    mu_ = mu(m)
    smin_R = _block_sigma_min(m.R)
    cstar = chi_star = None
    if reference is not None:
        cstar = reference.cost
        chi_star = reference.chi_norm
    fixed_eta = None
    if cfg.eta == "global":
        fixed_eta = max_step(m, ev.cost, method, solver, cfg.vanilla_eta) if method != VANILLA_PG else cfg.vanilla_eta
    elif not isinstance(cfg.eta, str):
        fixed_eta = float(cfg.eta)

    records = []
    flags = ["no_mjls_guarantee"] if method == VANILLA_PG else []
    policies = [ev.policy] if keep_policies else None
    all_certified = method != VANILLA_PG
    converged = False
    prev_rate = None

    for n in range(cfg.max_iters + 1):
        rec = IterationRecord(n, ev.cost, ev.grad_norm, radius)
        if reference is not None:
            rec.gap = (ev.cost - cstar) / cstar
            rec.rate_residual = prev_rate
        records.append(rec)
        log.info(
            "%s iter %d cost %.12g grad %.3e radius %.6f%s",
            method, n, ev.cost, rec.grad_norm, radius,
            "" if rec.gap is None else " gap %.3e" % rec.gap,
        )

        if reference is not None:
            done = rec.gap <= cfg.rel_gap_tol
            if done and cfg.gain_tol is not None:
                done = float(np.max(np.abs(ev.policy.K - reference.policy.K))) <= cfg.gain_tol
        else:
            done = rec.grad_norm <= cfg.rel_gap_tol * (1.0 + ev.cost)
        if done:
            converged = True
            break
        if n == cfg.max_iters:
            flags.append("max_iters")
            break

        if fixed_eta is not None:
            eta = fixed_eta
        elif method == GAUSS_NEWTON:
            eta = 0.5
        elif method == NATURAL_PG:
            eta = npg_stability_bound(ev)
        else:
            eta = cfg.vanilla_eta
        certified = _is_certified(method, eta, ev)
        rec.eta = eta
        rec.certified = certified
        if not certified and "uncertified_eta" not in flags:
            flags.append("uncertified_eta")
        all_certified = all_certified and certified

        new_pi = _UPDATES[method](ev, eta)
        try:
            ev_next = evaluate(m, new_pi, solver, warm=ev)
            radius_next, eig, _ = power_iteration(m.closed_loop(new_pi), m.trans, solver, init=eig)
            if radius_next >= 1.0 - STABILITY_MARGIN_TOL:
                raise NotMeanSquareStable("radius %.12g" % radius_next)
        except NotMeanSquareStable as exc:
            if certified:
                raise CertificationViolation(
                    "certified %s step (eta=%.6g) at iteration %d left the stabilizing set: %s" % (method, eta, n, exc)
                ) from exc
            flags.append("unstable_iterate")
            log.warning("iteration %d: stepped policy is not mean-square stabilizing; stopping", n)
            break

        if cfg.record_checks:
            rec.checks["almost_smoothness"] = _almost_smoothness(ev, ev_next)
            rec.checks["cost_lower_bound"] = _lower_bound_ok(m, ev)
            if reference is not None:
                rec.checks["gradient_domination"] = _domination_ok(_domination_terms(m, ev, cstar, chi_star), cstar)

        if reference is not None and method != VANILLA_PG:
            c = contraction(method, eta, mu_, chi_star, smin_R)
            prev_rate = ((ev_next.cost - cstar) - (1.0 - c) * (ev.cost - cstar)) / cstar
        if ev_next.cost >= ev.cost:
            above_tol = reference is None or rec.gap > cfg.rel_gap_tol
            if above_tol and "non_monotone" not in flags:
                flags.append("non_monotone")
        ev, radius = ev_next, radius_next
        if keep_policies:
            policies.append(ev.policy)

    report = ConvergenceReport(
        method=method,
        records=records,
        policy=ev.policy,
        mu=mu_,
        certified=all_certified,
        converged=converged,
        flags=flags,
        reference_cost=cstar,
        chi_star_norm=chi_star,
        sigma_min_R=smin_R,
        eta_setting=cfg.eta,
        policies=policies,
    )
    return report


# ---------------------------------------------------------------------------
# rate verification


@dataclass
class RateCheck:
    applicable: bool
    passed: list
    residuals: list
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.applicable and all(self.passed)


def verify_rate_bound(
    report_or_trace,
    m: MjlsModel,
    cstar: float,
    chi_star_norm: float,
    method: str | None = None,
) -> RateCheck:
    """Check ``C_{n+1} - C* <= (1 - c_n)(C_n - C*) + 1e-9 C*`` at every step.

    ``c_n`` uses the step size actually taken at iteration ``n``. Accepts a
    :class:`ConvergenceReport` or rows from :func:`read_trace` (then
    ``method`` is required). Not applicable to vanilla PG or to runs with an
    uncertified step.
    """
    if isinstance(report_or_trace, ConvergenceReport):
        method = report_or_trace.method
        costs = [r.cost for r in report_or_trace.records]
        etas = [r.eta for r in report_or_trace.records]
        certified = report_or_trace.certified
    else:
        rows = report_or_trace
        costs = [r["cost"] for r in rows]
        etas = [r["eta"] if r["eta"] is not None else float("nan") for r in rows]
        certified = None
    method = canonical_method(method)
    if method == VANILLA_PG:
        return RateCheck(False, [], [], "vanilla policy gradient carries no rate guarantee")
    if certified is False:
        return RateCheck(False, [], [], "run used an uncertified step size")
    if method == GAUSS_NEWTON and any(e > 0.5 for e in etas[:-1]):
        return RateCheck(False, [], [], "Gauss-Newton step size above 1/2")
    mu_ = mu(m)
    smin_R = _block_sigma_min(m.R)
    passed, residuals = [], []
    for n in range(len(costs) - 1):
        c = contraction(method, etas[n], mu_, chi_star_norm, smin_R)
        res = ((costs[n + 1] - cstar) - (1.0 - c) * (costs[n] - cstar)) / cstar
        residuals.append(res)
        passed.append(res <= CHECK_SLACK)
    return RateCheck(True, passed, residuals)
