import numpy as np
import pytest

from mjlspo.errors import NotMeanSquareStable
from mjlspo.model import Policy
from mjlspo.oracle import (
    McConfig,
    _polished_cost_fn,
    correlation_operator,
    dense_cost,
    dense_coupled_lyapunov,
    dense_ms_radius,
    fd_gradient,
    lti_lqr_reference,
    lyapunov_operator,
    mc_cost,
    random_stabilizing_policy,
)
from mjlspo.policy_opt import cost, policy_gradient
from mjlspo.stability import ms_spectral_radius

from conftest import random_small_model, scalar_model, two_mode_scalar


def test_operators_are_adjoint():
    # <Lyap(P), S> == <P, Corr(S)> in the trace inner product
    m = random_small_model(0, 3, 2, 1)
    pi = random_stabilizing_policy(m, np.random.default_rng(0))
    M, N = lyapunov_operator(m, pi), correlation_operator(m, pi)
    np.testing.assert_allclose(M.T, N, atol=1e-14)


def test_dense_on_two_mode_instance():
    m = two_mode_scalar()
    pi = Policy([[[0.3]], [[0.7]]])
    assert dense_coupled_lyapunov(m, pi).P[:, 0, 0] == pytest.approx([3637 / 2475, 4837 / 2475], rel=1e-13)
    assert dense_cost(m, pi) == pytest.approx(4237 / 2475, rel=1e-13)
    assert dense_ms_radius(m, pi) == pytest.approx(0.25, rel=1e-13)


def test_dense_rejects_unstable():
    m = scalar_model(a=1.5)
    with pytest.raises(NotMeanSquareStable):
        dense_cost(m, Policy.zeros(m))


def test_dense_guard():
    m = random_small_model(0, 50, 10, 1)
    with pytest.raises(ValueError, match="n_s\\*d\\^2"):
        lyapunov_operator(m, Policy.zeros(m))


def test_fd_on_closed_form_scalar():
    m = scalar_model(a=0.0)
    c = 0.5
    assert fd_gradient(m, Policy([[[c]]]))[0, 0, 0] == pytest.approx(4 * c / (1 - c * c) ** 2, rel=1e-9)


def test_fd_polished_path_matches_dense_path():
    m = random_small_model(1, 2, 3, 2)
    pi = random_stabilizing_policy(m, np.random.default_rng(1))
    a = fd_gradient(m, pi)
    b = fd_gradient(m, pi, cost_fn=_polished_cost_fn(m, pi))
    np.testing.assert_allclose(a, b, rtol=1e-7, atol=1e-9)


def test_fd_names_offending_entry():
    m = scalar_model(a=0.0)
    with pytest.raises(NotMeanSquareStable, match=r"K\[0\]\[0\]\[0\]"):
        fd_gradient(m, Policy([[[0.99]]]), h=0.05)


def test_lti_reference_classical_values():
    lti = lti_lqr_reference([[2.0]], [[1.0]], [[1.0]], [[1.0]], [[1.0]])
    p = (4.0 + np.sqrt(20.0)) / 2.0
    assert lti.P[0, 0] == pytest.approx(p, rel=1e-12)
    assert lti.K[0, 0] == pytest.approx(2 * p / (1 + p), rel=1e-12)
    # at the optimum the gradient vanishes
    assert abs(lti.gradient(lti.K)[0, 0]) < 1e-10
    with pytest.raises(NotMeanSquareStable):
        lti.value(np.array([[0.0]]))


def test_lti_reference_agrees_with_single_mode_model():
    m = random_small_model(2, 1, 3, 2)
    lti = lti_lqr_reference(m.A[0], m.B[0], m.Q[0], m.R[0], m.sigma0)
    pi = random_stabilizing_policy(m, np.random.default_rng(2))
    assert cost(m, pi) == pytest.approx(lti.cost(pi.K[0]), rel=1e-10)
    np.testing.assert_allclose(policy_gradient(m, pi).grad[0], lti.gradient(pi.K[0]), rtol=1e-8, atol=1e-10)


def test_mc_is_reproducible_and_consistent(backend):
    m = two_mode_scalar()
    pi = Policy([[[0.3]], [[0.7]]])
    cfg = McConfig(n_rollouts=20_000, horizon=60, seed=3)
    a = mc_cost(m, pi, cfg)
    b = mc_cost(m, pi, cfg)
    assert a == b
    assert abs(a.estimate - 4237 / 2475) <= 4 * a.stderr
    assert a.truncation_bound < a.stderr


def test_mc_fixed_sphere_law():
    m = scalar_model(a=0.5)
    res = mc_cost(m, Policy.zeros(m), McConfig(n_rollouts=1000, horizon=80, x0_law="fixed_unit_sphere_scaled"))
    # |x0| = 1 for every rollout in 1-D, so the cost is deterministic
    assert res.estimate == pytest.approx(4 / 3, rel=1e-12)
    assert res.stderr < 1e-12


def test_mc_unstable_reports_infinite_bound():
    m = scalar_model(a=1.1)
    res = mc_cost(m, Policy.zeros(m), McConfig(n_rollouts=10, horizon=5))
    assert res.truncation_bound == float("inf")


def test_mc_config_validation():
    with pytest.raises(ValueError):
        McConfig(x0_law="uniform")
    with pytest.raises(ValueError):
        McConfig(n_rollouts=0)


def test_random_stabilizing_policy_respects_radius():
    m = random_small_model(4, 3, 3, 2)
    pi = random_stabilizing_policy(m, np.random.default_rng(4), scale=50.0, max_radius=0.9)
    assert ms_spectral_radius(m, pi) < 0.9
