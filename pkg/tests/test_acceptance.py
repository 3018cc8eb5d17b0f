"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records one pass/fail line in ``ACCEPTANCE``; conftest prints the
collected lines at the end of the session.
"""
import math
import time

import numpy as np
import pytest

from mjlspo.model import MjlsModel, Policy, generate_random_model
from mjlspo.oracle import (
    DENSE_LIMIT,
    McConfig,
    dense_coupled_lyapunov,
    dense_ms_radius,
    dense_state_correlation,
    fd_gradient,
    lti_lqr_reference,
    mc_cost,
    random_stabilizing_policy,
)
from mjlspo.policy_opt import (
    OptimizerConfig,
    check_almost_smoothness,
    check_cost_lower_bound,
    check_gradient_domination,
    cost,
    optimize,
    policy_gradient,
    reference_solution,
    verify_rate_bound,
)
from mjlspo.stability import (
    ms_spectral_radius,
    solve_coupled_lyapunov,
    solve_coupled_riccati,
    solve_state_correlation,
)

from conftest import ACCEPTANCE, random_small_model

pytestmark = pytest.mark.acceptance


def _record(num, ok, detail):
    line = "criterion %d: %s  %s" % (num, "PASS" if ok else "FAIL", detail)
    ACCEPTANCE[num] = line
    print(line)
    return ok


# ---------------------------------------------------------------------------
# 1. gradient oracle


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    sizes = [(n_s, d, k) for n_s in (1, 2, 5) for d in (1, 2, 3, 4) for k in (1, 2) if k <= d]
    for seed in range(50):
        n_s, d, k = sizes[seed % len(sizes)]
        m = random_small_model(seed, n_s, d, k)
        pi = random_stabilizing_policy(m, np.random.default_rng(seed), scale=0.5, max_radius=0.95)
        g = policy_gradient(m, pi).grad
        fd = fd_gradient(m, pi, h=1e-5)
        worst = max(worst, float(np.linalg.norm(fd - g) / np.linalg.norm(g)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30.0
    assert _record(1, ok, "50 models, max rel FD discrepancy %.2e (<= 1e-6), %.1f s (< 30 s)" % (worst, elapsed))


# ---------------------------------------------------------------------------
# 2 and 3. global convergence and rate certificate on desk-scale models


@pytest.fixture(scope="module")
def desk_runs():
    t0 = time.perf_counter()
    runs = []
    for seed in range(20):
        m = generate_random_model(10, 20, 4, seed, dirichlet_self_weight=99.0, stability_margin=0.95)
        ref = reference_solution(m)
        for method in ("gn", "npg"):
            cfg = OptimizerConfig(method, eta="auto", rel_gap_tol=1e-8, gain_tol=1e-6, max_iters=2000)
            runs.append((seed, method, m, ref, optimize(m, Policy.zeros(m), cfg, reference=ref)))
    return runs, time.perf_counter() - t0


def test_criterion_2_global_convergence(desk_runs):
    runs, elapsed = desk_runs
    worst_gap = max(rep.final_gap for *_, rep in runs)
    worst_gain = max(float(np.max(np.abs(rep.policy.K - ref.policy.K))) for _, _, _, ref, rep in runs)
    all_conv = all(rep.converged for *_, rep in runs)
    iters = {meth: [rep.iterations for _, mm, _, _, rep in runs if mm == meth] for meth in ("gn", "npg")}
    ok = all_conv and worst_gap <= 1e-8 and worst_gain <= 1e-6 and elapsed < 300.0
    assert _record(
        2, ok,
        "20 models x {GN, NPG}: max gap %.2e (<= 1e-8), max gain error %.2e (<= 1e-6), "
        "GN iters %d-%d, NPG iters %d-%d, %.0f s (< 300 s)"
        % (worst_gap, worst_gain, min(iters["gn"]), max(iters["gn"]), min(iters["npg"]), max(iters["npg"]), elapsed),
    )


def test_criterion_3_rate_certificate(desk_runs):
    runs, _ = desk_runs
    worst_res = -math.inf
    worst_radius = 0.0
    ok = True
    for _, _, m, ref, rep in runs:
        check = verify_rate_bound(rep, m, ref.cost, ref.chi_norm)
        ok = ok and check.ok and rep.certified
        worst_res = max([worst_res] + check.residuals)
        worst_radius = max(worst_radius, max(r.ms_radius for r in rep.records))
    ok = ok and worst_radius < 1.0
    assert _record(
        3, ok,
        "40 runs: max rate residual %.2e (<= 1e-9 C*), max MS radius over all iterates %.6f (< 1)" % (worst_res, worst_radius),
    )


# ---------------------------------------------------------------------------
# 4. qualitative reproduction at full scale


THRESHOLDS = [10.0 ** (-e / 2) for e in range(0, 17)]  # 1 down to 1e-8


def _first_hit(report, thr):
    for r in report.records:
        if r.gap <= thr:
            return r.iter
    return None


def _convergence_comparison(n_s, d, k, out_dir):
    m = generate_random_model(n_s, d, k, seed=0, dirichlet_self_weight=99.0, stability_margin=0.95)
    ref = reference_solution(m)
    gn = optimize(m, Policy.zeros(m), OptimizerConfig("gn", rel_gap_tol=1e-10, max_iters=100), reference=ref)
    npg = optimize(m, Policy.zeros(m), OptimizerConfig("npg", rel_gap_tol=1e-8, max_iters=400), reference=ref)
    gn.write_csv(out_dir / ("convergence_gn_%d.csv" % n_s))
    npg.write_csv(out_dir / ("convergence_npg_%d.csv" % n_s))
    monotone = all(np.all(np.diff(rep.costs) < 0) for rep in (gn, npg))
    # a threshold that NPG already meets after one step cannot be met in strictly fewer steps
    contested = [thr for thr in THRESHOLDS if thr < npg.records[1].gap]
    tied = [thr for thr in THRESHOLDS if thr >= npg.records[1].gap]
    faster = bool(contested)
    for thr in contested:
        a, b = _first_hit(gn, thr), _first_hit(npg, thr)
        faster = faster and a is not None and b is not None and a < b
    assert all(_first_hit(gn, thr) == 1 for thr in tied)
    return monotone, faster, len(contested), gn, npg


@pytest.mark.slow
def test_criterion_4_convergence_comparison(tmp_path):
    budget = 2 * 3600.0
    t0 = time.perf_counter()
    monotone, faster, n_thr, gn, npg = _convergence_comparison(100, 100, 20, tmp_path)
    elapsed = time.perf_counter() - t0
    scale = "n_s=100, d=100, k=20"
    if elapsed >= budget:
        scale = "fallback n_s=50, d=50, k=10 (full scale took %.0f s)" % elapsed
        monotone, faster, n_thr, gn, npg = _convergence_comparison(50, 50, 10, tmp_path)
    ok = monotone and faster
    assert _record(
        4, ok,
        "%s: monotone %s; GN strictly first at all %d gap thresholds in [1e-8, %.2g) %s "
        "(%d coarser grid thresholds are met by both after one step); "
        "GN %d iters to %.1e, NPG %d iters to %.1e, %.0f s (< 7200 s)"
        % (scale, monotone, n_thr, npg.records[1].gap, faster, len(THRESHOLDS) - n_thr,
           gn.iterations, gn.final_gap, npg.iterations, npg.final_gap, elapsed),
    )


# ---------------------------------------------------------------------------
# 5. lemma suite


def test_criterion_5_lemma_suite():
    t0 = time.perf_counter()
    worst_smooth = 0.0
    dom_ok = lower_ok = True
    n = 0
    sizes = [(1, 2, 1), (2, 2, 1), (2, 3, 2), (3, 3, 2), (5, 4, 2), (4, 2, 2)]
    for seed in range(20):
        n_s, d, k = sizes[seed % len(sizes)]
        m = random_small_model(100 + seed, n_s, d, k)
        ref = reference_solution(m)
        rng = np.random.default_rng(100 + seed)
        for _ in range(10):
            a = random_stabilizing_policy(m, rng, scale=rng.uniform(0.05, 1.0), max_radius=0.98)
            b = random_stabilizing_policy(m, rng, scale=rng.uniform(0.05, 1.0), max_radius=0.98)
            worst_smooth = max(worst_smooth, check_almost_smoothness(m, a, b))
            dom_ok = dom_ok and all(check_gradient_domination(m, a, ref.cost, ref.chi_norm))
            lower_ok = lower_ok and check_cost_lower_bound(m, a) and check_cost_lower_bound(m, b)
            n += 1
    elapsed = time.perf_counter() - t0
    ok = n == 200 and worst_smooth <= 1e-8 and dom_ok and lower_ok and elapsed < 120.0
    assert _record(
        5, ok,
        "%d instances: max almost-smoothness residual %.2e (<= 1e-8), domination %s, lower bound %s, %.1f s (< 120 s)"
        % (n, worst_smooth, dom_ok, lower_ok, elapsed),
    )


# ---------------------------------------------------------------------------
# 6. reduction to classical LQR


def _rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def test_criterion_6_lti_reduction():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        d, k = int(rng.integers(2, 6)), int(rng.integers(1, 3))
        A = rng.standard_normal((d, d)) * 1.2 / np.sqrt(d)
        B = rng.standard_normal((d, k))
        Q = np.eye(d) + 0.1 * np.diag(rng.random(d))
        R = np.eye(k) * rng.uniform(0.5, 2.0)
        X = rng.standard_normal((d, d))
        sigma0 = X @ X.T / d + np.eye(d)
        m = MjlsModel(A=[A], B=[B], Q=[Q], R=[R], trans=[[1.0]], rho=[1.0], sigma0=sigma0)
        lti = lti_lqr_reference(A, B, Q, R, sigma0)
        P, K = solve_coupled_riccati(m)
        worst = max(worst, _rel(P.P[0], lti.P), _rel(K.K[0], lti.K))
        pi = random_stabilizing_policy(m, rng, scale=0.3, max_radius=0.9)
        worst = max(
            worst,
            _rel(solve_coupled_lyapunov(m, pi).P[0], lti.value(pi.K[0])),
            abs(cost(m, pi) - lti.cost(pi.K[0])) / lti.cost(pi.K[0]),
            _rel(policy_gradient(m, pi).grad[0], lti.gradient(pi.K[0])),
            _rel(solve_state_correlation(m, pi).S[0], lti.correlation(pi.K[0])),
        )
    assert _record(6, worst <= 1e-8, "20 single-mode instances: max rel deviation from scipy LQR %.2e (<= 1e-8)" % worst)


# ---------------------------------------------------------------------------
# 7. Monte-Carlo consistency


def test_criterion_7_monte_carlo():
    worst_z = 0.0
    trunc_ok = True
    details = []
    for seed in range(10):
        m = random_small_model(700 + seed, 2 + seed % 3, 2 + seed % 2, 1)
        pi = random_stabilizing_policy(m, np.random.default_rng(seed), scale=0.3, max_radius=0.85)
        exact = cost(m, pi)
        r = ms_spectral_radius(m, pi)
        pilot = mc_cost(m, pi, McConfig(n_rollouts=10_000, horizon=50, seed=seed + 1000))
        # horizon so that the truncation bound sits well below 0.1 stderr of the full run
        target = 0.02 * pilot.stderr / math.sqrt(10.0)
        horizon = int(math.ceil(math.log(target * (1.0 - r) / (2.0 * exact)) / math.log(r)))
        res = mc_cost(m, pi, McConfig(n_rollouts=100_000, horizon=max(horizon, 1), seed=seed))
        z = abs(res.estimate - exact) / res.stderr
        worst_z = max(worst_z, z)
        trunc_ok = trunc_ok and res.truncation_bound < 0.1 * res.stderr
        details.append(horizon)
    ok = worst_z <= 3.0 and trunc_ok
    assert _record(
        7, ok,
        "10 instances, 1e5 rollouts, horizons %d-%d: max |MC - C|/stderr %.2f (<= 3), truncation < 0.1 stderr %s"
        % (min(details), max(details), worst_z, trunc_ok),
    )


# ---------------------------------------------------------------------------
# 8. dense oracle cross-checks


def test_criterion_8_dense_cross_checks():
    sizes = [(1, 1, 1), (1, 4, 2), (2, 3, 1), (3, 4, 2), (5, 4, 2), (4, 6, 3), (10, 5, 2), (6, 8, 3), (10, 10, 4)]
    worst_p = worst_s = worst_r = 0.0
    n = 0
    for seed, (n_s, d, k) in enumerate(sizes * 2 + [(40, 10, 4)]):
        assert n_s * d * d <= DENSE_LIMIT
        m = random_small_model(800 + seed, n_s, d, k, margin=0.97)
        for pi in (Policy.zeros(m), random_stabilizing_policy(m, np.random.default_rng(seed), scale=0.5)):
            P = solve_coupled_lyapunov(m, pi).P
            Pd = dense_coupled_lyapunov(m, pi).P
            worst_p = max(worst_p, float(np.max(np.abs(P - Pd)) / max(1.0, np.max(np.abs(Pd)))))
            S = solve_state_correlation(m, pi).S
            Sd = dense_state_correlation(m, pi).S
            worst_s = max(worst_s, float(np.max(np.abs(S - Sd)) / max(1.0, np.max(np.abs(Sd)))))
            worst_r = max(worst_r, abs(ms_spectral_radius(m, pi) - dense_ms_radius(m, pi)))
            n += 1
    ok = worst_p <= 1e-9 and worst_s <= 1e-9 and worst_r <= 1e-8
    assert _record(
        8, ok,
        "%d (model, policy) pairs up to n_s d^2 = %d: Lyapunov %.2e, correlation %.2e (<= 1e-9), radius %.2e (<= 1e-8)"
        % (n, DENSE_LIMIT, worst_p, worst_s, worst_r),
    )
