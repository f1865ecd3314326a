import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cyclecap import autodiff as ad
from cyclecap import losses as L
from cyclecap.autodiff import ShapeError, Tensor

import gradcases
from oracles import kl_quadrature_1d


@pytest.mark.parametrize("name", sorted(gradcases.LOSS_CASES))
def test_loss_gradients(name):
    for seed in range(3):
        assert gradcases.run_case(f"loss/{name}", seed) < gradcases.GRAD_TOL


def test_default_weights():
    w = L.LossWeights()
    assert (w.lambda_kl, w.lambda1, w.lambda2, w.lambda3) == (2.0, 1.0, 1000.0, 0.01)
    with pytest.raises(ValueError):
        L.LossWeights(lambda2=-1.0)


def test_caption_gan_closed_forms():
    assert float(L.g_y_loss(0.5).data) == pytest.approx(0.0, abs=1e-15)
    assert float(L.g_y_loss(0.9).data) == pytest.approx(-math.log(9), abs=1e-12)
    assert float(L.d_y_loss(0.5, 0.5).data) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_image_gan_closed_forms():
    assert float(L.d_x_loss(0.5, 0.5).data) == pytest.approx(2 * math.log(2), abs=1e-12)
    g = L.g_x_loss(0.5, np.zeros((1, 3)), np.zeros((1, 3)))
    assert float(g.data) == pytest.approx(-math.log(2), abs=1e-12)


def test_scores_are_clamped():
    for s in (0.0, 1.0):
        assert np.isfinite(L.d_y_loss(s, s).data)
        assert np.isfinite(L.g_x_loss(s, np.zeros(2), np.zeros(2)).data)
    x = Tensor(np.array([0.0, 1.0, 0.3]), requires_grad=True)
    ad.backward(L.g_y_loss(x))
    assert np.all(np.isfinite(x.grad))


def test_kl_closed_forms():
    assert float(L.kl_diag_gauss(np.zeros((2, 4)), np.zeros((2, 4))).data) == 0.0
    assert float(L.kl_diag_gauss(np.ones((1, 1)), np.zeros((1, 1))).data) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ShapeError):
        L.kl_diag_gauss(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("seed", range(4))
def test_kl_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=3)
    var = rng.uniform(0.2, 3.0, size=3)
    expected = sum(kl_quadrature_1d(m, v) for m, v in zip(mu, var))
    got = float(L.kl_diag_gauss(mu[None], np.log(var)[None]).data)
    assert abs(got - expected) < 1e-4


def _straight_cycle(x, xr, fx, fxr, logits, ref, w):
    pixel = np.abs(xr - x).mean()
    feature = np.abs(fxr - fx).mean()
    ce = 0.0
    for b in range(logits.shape[0]):
        for t in range(logits.shape[1]):
            row = logits[b, t]
            ce -= row[ref[b, t]] - (row.max() + math.log(np.exp(row - row.max()).sum()))
    return w.lambda1 * pixel + w.lambda2 * feature + w.lambda3 * ce / logits.shape[0]


@pytest.mark.parametrize("seed", range(4))
def test_cycle_matches_straight_line_oracle(seed):
    rng = np.random.default_rng(seed)
    x, xr = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    proj = rng.normal(size=(48, 5))
    enc = lambda t: ad.matmul(ad.reshape(t, (t.shape[0], -1)), ad.constant(proj))
    logits = rng.normal(size=(2, 6, 7))
    ref = rng.integers(0, 7, size=(2, 6))
    w = L.LossWeights()
    got = float(L.cycle_loss(Tensor(x), Tensor(xr), Tensor(logits), ref, enc, w).data)
    fx, fxr = x.reshape(2, -1) @ proj, xr.reshape(2, -1) @ proj
    assert got == pytest.approx(_straight_cycle(x, xr, fx, fxr, logits, ref, w), rel=1e-12)


def test_cycle_vanishes_on_perfect_reconstruction():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4, 4)))
    ref = np.array([[2, 0, 1]])
    logits = np.full((1, 3, 4), -60.0)
    logits[0, np.arange(3), ref[0]] = 60.0
    loss = float(L.cycle_loss(x, x, Tensor(logits), ref, lambda t: t).data)
    assert loss < 1e-10


def test_cycle_rejects_mismatched_images():
    with pytest.raises(ShapeError):
        L.cycle_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 8, 8))), None, None, lambda t: t)


def test_cycle_directions_are_optional():
    x = Tensor(np.ones((1, 3, 2, 2)))
    terms = L.cycle_terms(x, Tensor(np.zeros((1, 3, 2, 2))), None, None, lambda t: t)
    assert float(terms.text.data) == 0.0 and float(terms.pixel.data) == 1.0
    assert float(terms.feature.data) == 1000.0


def test_totals_zero_and_additive():
    v_d, v_g = L.total_losses(0.0, 0.0, 0.0, 0.0, 0.0)
    assert float(v_d.data) == 0.0 and float(v_g.data) == 0.0
    rng = np.random.default_rng(1)
    parts = rng.normal(size=5)
    v_d, v_g = L.total_losses(*[Tensor(p) for p in parts])
    assert abs(float(v_d.data) - (parts[0] + parts[1])) < 1e-12
    assert abs(float(v_g.data) - (parts[2] + parts[3] + parts[4])) < 1e-12


def test_no_cycle_ignores_cycle_input():
    a = L.total_losses(0.1, 0.2, 0.3, 0.4, 123.0, cycle_enabled=False)[1]
    b = L.total_losses(0.1, 0.2, 0.3, 0.4, -7.0, cycle_enabled=False)[1]
    assert float(a.data) == float(b.data) == pytest.approx(0.7, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-9, 1 - 1e-9), st.floats(1e-9, 1 - 1e-9))
def test_adversarial_losses_finite(real, fake):
    for loss in (L.d_y_loss(real, fake), L.g_y_loss(fake), L.d_x_loss(real, fake)):
        assert np.isfinite(loss.data)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cycle_is_nonnegative_and_zero_only_when_exact(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 3, 2, 2))
    delta = rng.normal(size=x.shape) * rng.uniform(0.01, 1)
    loss = float(L.cycle_loss(Tensor(x), Tensor(x + delta), None, None, lambda t: t).data)
    assert loss > 0
    assert float(L.cycle_loss(Tensor(x), Tensor(x.copy()), None, None, lambda t: t).data) == 0.0
