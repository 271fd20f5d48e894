"""Forgetting lab: Hessian probes, recurrence, and the quadratic harness."""

import numpy as np
import pytest

from cascadeseg import forgetting
from cascadeseg.forgetting import (ForgettingLabError, HessianEstimate,
                                   QuadraticTaskSuite)
from cascadeseg.params import Layout, ParameterStore


def _psd(rng, dim, rank=None):
    m = rng.normal(size=(dim, rank or dim))
    return m @ m.T / dim


def _suite(seed=0, dim=6, tasks=3):
    rng = np.random.default_rng(seed)
    mats = [_psd(rng, dim) for _ in range(tasks)]
    centers = [rng.normal(size=dim) for _ in range(tasks)]
    return QuadraticTaskSuite(mats, centers)


def test_hessian_matches_exact_quadratic():
    suite = _suite()
    theta = np.zeros(suite.dim)
    for tau, est in enumerate(suite.measured_hessians(theta), start=1):
        np.testing.assert_allclose(est.matrix, suite.mats[tau - 1],
                                   atol=1e-7)
        assert est.asymmetry < 1e-7
        assert est.min_eig > -1e-9


def test_hessian_limit_guard():
    def grad_fn(v):
        return v
    with pytest.raises(ForgettingLabError):
        forgetting.hessian(grad_fn, np.zeros(10), limit=5)


def test_hessian_index_subset():
    suite = _suite(dim=5, tasks=1)
    est = forgetting.hessian(lambda th: suite.grad(1, th), np.zeros(5),
                             index_set=[1, 3])
    np.testing.assert_allclose(est.matrix,
                               suite.mats[0][np.ix_([1, 3], [1, 3])],
                               atol=1e-8)
    full = forgetting.embed(est, 5)
    assert full[0, 0] == 0.0 and full[1, 3] == pytest.approx(
        suite.mats[0][1, 3], abs=1e-8)


def test_step_sweep_picks_low_asymmetry():
    suite = _suite(dim=4, tasks=1)
    step, asym = forgetting.step_sweep(lambda th: suite.grad(1, th),
                                       np.zeros(4), index_set=[0, 1])
    assert step in (1e-3, 3e-4, 1e-4, 3e-5)
    assert asym < 1e-6


def test_quadratic_term_mixes_layouts():
    delta = np.array([1.0, 2.0, 0.0, -1.0])
    h_full = np.eye(4)
    est = HessianEstimate(matrix=2 * np.eye(2),
                          index_set=np.array([1, 3]), step=1e-4, asymmetry=0.0)
    total = forgetting.quadratic_term(delta, [h_full, est])
    assert total == pytest.approx((1 + 4 + 0 + 1) + 2 * (4 + 1))


def test_forgetting_rate_and_average():
    suite = _suite(dim=4, tasks=2)
    loss_fns = suite.loss_fns()
    theta_star = suite.centers[0]
    theta = theta_star + 0.1
    rate = forgetting.forgetting_rate(loss_fns[0], theta, theta_star)
    assert rate == pytest.approx(suite.loss(1, theta), rel=1e-12)
    assert forgetting.average_forgetting({1: 2.0, 2: 4.0}, 3) == 3.0
    with pytest.raises(ForgettingLabError):
        forgetting.average_forgetting({}, 1)


def test_recurrence_exact_on_quadratic_suite():
    # snapshots must be stationary points of their own task loss (the
    # derivation drops the gradient term at theta_tau*), i.e. the centers
    suite = _suite(seed=3, dim=8, tasks=4)
    snaps = suite.centers
    hessians = suite.exact_hessians()
    for t in range(2, 5):
        out = forgetting.recurrence_check(suite.loss_fns(), snaps, hessians, t)
        assert abs(out["gap"]) <= 1e-9


def test_recurrence_with_measured_hessians():
    suite = _suite(seed=4, dim=6, tasks=3)
    snaps = suite.centers
    hessians = suite.measured_hessians(np.zeros(suite.dim))
    for t in (2, 3):
        out = forgetting.recurrence_check(suite.loss_fns(), snaps, hessians, t)
        assert abs(out["gap"]) <= 1e-6


def test_v_recursion_gap_exact():
    suite = _suite(seed=5, dim=7, tasks=4)
    snaps = suite.centers
    for t in (3, 4):
        gap = forgetting.v_recursion_gap(snaps, suite.exact_hessians(), t,
                                         suite.dim)
        assert gap <= 1e-9
    with pytest.raises(ForgettingLabError):
        forgetting.v_recursion_gap(snaps, suite.exact_hessians(), 2, suite.dim)


def test_zero_forgetting_condition_disjoint_support():
    """Block-diagonal task Hessians + disjoint-support deltas give an exactly
    zero quadratic term (the zero-forgetting condition)."""
    rng = np.random.default_rng(6)
    h1 = np.zeros((6, 6))
    h1[:3, :3] = _psd(rng, 3)
    delta2 = np.concatenate([np.zeros(3), rng.normal(size=3)])
    assert forgetting.quadratic_term(delta2, [h1]) == 0.0


def test_taylor_residual_exponent_on_cubic_loss():
    """Loss with an exact cubic correction: residual must scale ~ delta^3."""
    H = np.diag([2.0, 1.0])

    def loss_fn(th):
        return 0.5 * th @ H @ th + 0.2 * th[0] ** 3

    u = np.array([1.0, 1.0])
    out = forgetting.taylor_residual(loss_fn, np.zeros(2), u, H,
                                     deltas=[1e-3, 3e-3, 1e-2])
    assert out["exponent"] == pytest.approx(3.0, abs=0.05)


def test_taylor_residual_grad_fn_path_at_nonstationary_point():
    """grad_fn supplies both coefficients, so the expansion point need not be
    a stationary point; a cubic loss again leaves a ~delta^3 residual."""
    H = np.diag([2.0, 1.0])
    center = np.array([0.3, -0.4])   # gradient is nonzero here

    def loss_fn(th):
        return 0.5 * th @ H @ th + 0.2 * th[0] ** 3

    def grad_fn(th):
        return H @ th + np.array([0.6 * th[0] ** 2, 0.0])

    out = forgetting.taylor_residual(loss_fn, center, np.array([1.0, 1.0]),
                                     None, deltas=[1e-3, 3e-3, 1e-2],
                                     grad_fn=grad_fn)
    assert out["exponent"] == pytest.approx(3.0, abs=0.05)


def test_taylor_residual_zero_on_pure_quadratic():
    H = np.eye(3)
    out = forgetting.taylor_residual(lambda th: 0.5 * th @ th, np.zeros(3),
                                     np.array([1.0, 0, 0]), H,
                                     deltas=[1e-3, 1e-2])
    assert max(out["residuals"]) < 1e-15


def test_block_structure_check():
    store = ParameterStore()
    store.add_block("a", np.zeros(2), task=1)
    store.add_block("b", np.zeros(2), task=2)
    layout = Layout(store, ["a", "b"])
    m = np.zeros((4, 4))
    m[0, 0] = 5.0          # own-block entry, ignored
    m[0, 2] = 0.25         # cross-block entry, reported
    est = HessianEstimate(matrix=m, index_set=np.arange(4), step=1e-4,
                          asymmetry=0.0)
    assert forgetting.block_structure_check(est, layout, 1) == 0.25


def test_ogm_condition_check_zero_pads():
    updates = [np.array([1.0, 0.0, 2.0])]
    dirs = [np.array([0.0, 3.0])]         # older, shorter direction
    assert forgetting.ogm_condition_check(updates, dirs) == 0.0
    dirs = [np.array([1.0, 0.0])]
    assert forgetting.ogm_condition_check(updates, dirs) == 1.0


def test_report_field_validation():
    rep = forgetting.ForgettingReport(method="spi")
    rep.add(tau=1, t=2, forgetting_rate=0.0)
    assert rep.rows[0]["tau"] == 1 and rep.rows[0]["quad_term"] is None
    with pytest.raises(ForgettingLabError):
        rep.add(bogus=1.0)


def test_quadratic_suite_validation():
    with pytest.raises(ForgettingLabError):
        QuadraticTaskSuite([np.ones((2, 3))], [np.zeros(2)])
    with pytest.raises(ForgettingLabError):
        QuadraticTaskSuite([np.array([[0.0, 1.0], [0.0, 0.0]])],
                           [np.zeros(2)])
