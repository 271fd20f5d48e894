"""Loss values against hand-computed oracles and raw/graph path agreement."""

import numpy as np
import pytest

from cascadeseg import autodiff as ad
from cascadeseg import losses as L


CFG = L.LossConfig()


def test_bce_oracle_value():
    probs = np.array([[0.9, 0.2], [0.4, 0.7]])
    targets = np.array([[1.0, 0.0], [0.0, 1.0]])
    per = -(targets * np.log(probs) + (1 - targets) * np.log(1 - probs))
    expected = per.sum(axis=1).mean()
    assert L.bce_multilabel(probs, targets) == pytest.approx(expected, rel=1e-12)


def test_bce_rejects_soft_targets():
    with pytest.raises(L.LossError):
        L.bce_multilabel(np.array([[0.5]]), np.array([[0.3]]))


def test_bce_clamps_extreme_probabilities():
    v = L.bce_multilabel(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
    assert np.isfinite(v)
    assert v == pytest.approx(-2 * np.log(L.PROB_CLAMP), rel=1e-6)


def test_focal_reduces_to_weighted_bce_at_gamma_zero():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(4, 4))
    m = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    got = L.focal(p, m, alpha_f=0.5, gamma=0.0)
    expected = -np.mean(0.5 * (m * np.log(p) + (1 - m) * np.log(1 - p)))
    assert got == pytest.approx(expected, rel=1e-12)


def test_focal_downweights_easy_pixels():
    easy = L.focal(np.full((2, 2), 0.99), np.ones((2, 2)))
    hard = L.focal(np.full((2, 2), 0.01), np.ones((2, 2)))
    assert hard > 100 * easy


def test_dice_oracle_value():
    pred = np.array([[0.8, 0.1], [0.6, 0.0]])
    m = np.array([[1.0, 0.0], [1.0, 0.0]])
    eps = 1e-6
    expected = (2 * (0.8 + 0.6) + eps) / (1.5 + 2.0 + eps)
    assert L.dice(m, pred, eps) == pytest.approx(expected, rel=1e-12)


def test_dice_perfect_prediction_is_one():
    m = np.zeros((3, 3))
    m[1, 1] = 1.0
    assert L.dice(m, m.copy()) == pytest.approx(1.0, abs=1e-6)


def test_seg_loss_combines_focal_and_dice():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.05, 0.95, size=(5, 5))
    m = (rng.uniform(size=(5, 5)) > 0.6).astype(float)
    got = L.seg_loss(m, p, CFG)
    expected = CFG.seg_alpha * L.focal(p, m, CFG.focal_alpha, CFG.focal_gamma) \
        + CFG.seg_beta * (1.0 - L.dice(m, p, CFG.dice_eps))
    assert got == pytest.approx(expected, rel=1e-12)


def test_total_loss_lambda():
    assert L.total_loss(1.25, 0.5, 2.0) == pytest.approx(2.25)


@pytest.mark.parametrize("loss_name", ["bce", "focal", "dice"])
def test_graph_path_matches_raw_path(loss_name):
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, size=(3, 4))
    m = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
    tape = ad.Tape()
    pt = ad.leaf(p, tape)
    if loss_name == "bce":
        raw, graph = L.bce_multilabel(p, m), L.bce_multilabel(pt, m)
    elif loss_name == "focal":
        raw, graph = L.focal(p, m), L.focal(pt, m)
    else:
        raw, graph = L.dice(m, p), L.dice(m, pt)
    assert float(graph.data) == pytest.approx(raw, rel=1e-14)


@pytest.mark.parametrize("loss_name", ["bce", "focal", "dice", "seg"])
def test_loss_gradients_match_finite_differences(loss_name):
    rng = np.random.default_rng(3)
    theta = rng.uniform(0.1, 0.9, size=12)
    m = (rng.uniform(size=12) > 0.5).astype(float)

    def graph_loss(v, tape):
        p = ad.leaf(v, tape)
        if loss_name == "bce":
            return L.bce_multilabel(ad.reshape(p, (3, 4)), m.reshape(3, 4)), p
        if loss_name == "focal":
            return L.focal(p, m), p
        if loss_name == "dice":
            return L.dice(m, p), p
        return L.seg_loss(m, p, CFG), p

    def loss_fn(v):
        out, _ = graph_loss(v, ad.Tape())
        return float(out.data)

    out, leaf_t = graph_loss(theta, ad.Tape())
    ad.backward(out)
    g = ad.grad_or_zero(leaf_t).ravel()
    g_fd = ad.finite_diff_gradient(loss_fn, theta, step=1e-6)
    assert np.abs(g - g_fd).max() / max(1.0, np.abs(g_fd).max()) < 1e-6


def test_loss_config_validation():
    with pytest.raises(L.LossError):
        L.LossConfig(focal_alpha=1.5)
    with pytest.raises(L.LossError):
        L.LossConfig(dice_eps=0.0)
    with pytest.raises(L.LossError):
        L.LossConfig(combine_lambda=-1.0)
