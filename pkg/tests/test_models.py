import numpy as np
import pytest

from cyclecap import autodiff as ad
from cyclecap import losses as L
from cyclecap.autodiff import ShapeError, Tensor
from cyclecap.data import EOS_ID
from cyclecap.models import (ModelBundle, ModelConfig, ModelStateError, one_hot, preset_config)

import gradcases
from conftest import TINY_T, tiny_model_config
from oracles import jacobi_singular_values


@pytest.mark.parametrize("name", sorted(gradcases.NETWORK_CASES))
def test_network_gradients(name):
    assert gradcases.run_case(f"net/{name}", 0) < gradcases.GRAD_TOL


def _x(n, size=16, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, size=(n, 3, size, size)))


def _caption(bundle, n, seed=0):
    return np.random.default_rng(seed).integers(3, bundle.cfg.vocab_size, size=(n, bundle.cfg.caption_length))


def test_reference_dimensions():
    cfg = ModelConfig()
    assert (cfg.caption_length, cfg.image_size, cfg.latent_dim) == (20, 64, 100)
    assert 2 * cfg.text_hidden == 1024
    assert cfg.feature_dim == 256


def test_reference_bundle_shapes():
    cfg = ModelConfig(vocab_size=30)
    with ad.precision(np.float32):
        b = ModelBundle(cfg, np.random.default_rng(0))
    b.freeze_image_encoder()
    b.eval()
    with ad.precision(np.float32), ad.no_grad():
        x = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        assert b.image_encode(x).shape == (1, 256)
        out = b.caption_from_image(x, rng=np.random.default_rng(1))
        assert out.soft.shape == (1, 20, 30)
        phi, ca = b.encode_text(out.soft, eps=np.zeros((1, cfg.cond_dim)))
        assert phi.shape == (1, 1024)
        img = b.image_from_text(ca.c, np.zeros((1, 100)))
        assert img.shape == (1, 3, 64, 64)


def test_unfrozen_encoder_is_rejected(tiny_dataset):
    b = ModelBundle(tiny_model_config(len(tiny_dataset.vocab)), np.random.default_rng(0))
    with pytest.raises(ModelStateError):
        b.image_encode(_x(1))


def test_identical_images_identical_features(bundle64):
    x = _x(1)
    both = Tensor(np.concatenate([x.data, x.data]))
    f = bundle64.image_encode(both).data
    np.testing.assert_array_equal(f[0], f[1])
    assert f.shape[1] == bundle64.cfg.feature_dim


def test_rollout_length_and_simplex(bundle64):
    out = bundle64.caption_from_image(_x(2), rng=np.random.default_rng(0))
    assert out.soft.shape[1] == TINY_T == out.logits.shape[1]
    np.testing.assert_allclose(out.soft.data.sum(axis=-1), 1.0, atol=1e-6)


def test_rollout_needs_rng(bundle64):
    with pytest.raises(ValueError):
        bundle64.caption_from_image(_x(1))


def test_teacher_forced_ignores_rng(bundle64):
    ref = _caption(bundle64, 2)
    a = bundle64.caption_from_image(_x(2), mode="teacher_forced", reference=ref, rng=np.random.default_rng(0))
    b = bundle64.caption_from_image(_x(2), mode="teacher_forced", reference=ref, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a.logits.data, b.logits.data)


def test_teacher_forced_rejects_wrong_length(bundle64):
    with pytest.raises(ShapeError):
        bundle64.caption_from_image(_x(2), mode="teacher_forced", reference=np.zeros((2, TINY_T + 1), int))
    with pytest.raises(ValueError):
        bundle64.caption_from_image(_x(2), mode="teacher_forced")


def test_teacher_forcing_feeds_reference_tokens(bundle64):
    """Changing reference token t only changes logits from step t + 1 on."""
    ref = _caption(bundle64, 1)
    alt = ref.copy()
    alt[0, 4] = 3 if ref[0, 4] != 3 else 4
    a = bundle64.caption_from_image(_x(1), mode="teacher_forced", reference=ref).logits.data
    b = bundle64.caption_from_image(_x(1), mode="teacher_forced", reference=alt).logits.data
    np.testing.assert_array_equal(a[:, :5], b[:, :5])
    assert not np.allclose(a[:, 5:], b[:, 5:])


def test_pixels_to_soft_caption_gradient(bundle64):
    """End to end through the frozen encoder: nonzero and matching finite differences."""
    noise = -np.log(-np.log(np.random.default_rng(3).uniform(0.05, 0.95, (1, TINY_T, bundle64.cfg.vocab_size))))
    r = ad.constant(np.random.default_rng(4).normal(size=(1, TINY_T, bundle64.cfg.vocab_size)))
    x = _x(1, seed=5)
    f = lambda t: ad.sum(ad.mul(bundle64.caption_from_image(t, noise=noise, tau=1.0).soft, r))
    x.requires_grad = True
    ad.backward(f(x))
    assert np.abs(x.grad).max() > 0
    x.requires_grad = False
    err = gradcases._robust_check(f, x, np.random.default_rng(6), count=25)
    assert err < 1e-3


def test_parameter_sharing_between_pathways(bundle64):
    x = _x(2)
    ref = _caption(bundle64, 2)
    noise = np.zeros((2, TINY_T, bundle64.cfg.vocab_size))
    before_tf = bundle64.caption_from_image(x, mode="teacher_forced", reference=ref).logits.data.copy()
    before_gr = bundle64.caption_from_image(x, noise=noise).logits.data.copy()
    bundle64.g_y.out.bias.data += 0.5  # one parameter object
    after_tf = bundle64.caption_from_image(x, mode="teacher_forced", reference=ref).logits.data
    after_gr = bundle64.caption_from_image(x, noise=noise).logits.data
    assert not np.allclose(before_tf, after_tf) and not np.allclose(before_gr, after_gr)


def test_greedy_caption_eos_suffix(bundle64):
    ids = bundle64.greedy_caption(_x(3))
    for row in ids:
        hits = np.flatnonzero(row == EOS_ID)
        if hits.size:
            assert np.all(row[hits[0]:] == EOS_ID)


def test_caption_discriminator_range_and_hard_inputs(bundle64):
    ref = _caption(bundle64, 3)
    s_hard = bundle64.discriminate_caption(ref, _x(3)).data
    s_onehot = bundle64.discriminate_caption(one_hot(ref, bundle64.cfg.vocab_size), _x(3)).data
    np.testing.assert_array_equal(s_hard, s_onehot)
    assert np.all((s_hard > 0) & (s_hard < 1))


def test_caption_discriminator_inner_fusion(tiny_dataset):
    cfg = tiny_model_config(len(tiny_dataset.vocab), dy_fusion="inner")
    b = ModelBundle(cfg, np.random.default_rng(0))
    b.freeze_image_encoder()
    s = b.discriminate_caption(_caption(b, 2), _x(2)).data
    assert s.shape == (2,) and np.all((s > 0) & (s < 1))
    with pytest.raises(ValueError):
        tiny_model_config(10, dy_fusion="sum")


def test_encode_text_zero_eps_gives_mu(bundle64):
    phi, ca = bundle64.encode_text(_caption(bundle64, 2), eps=np.zeros((2, bundle64.cfg.cond_dim)))
    np.testing.assert_array_equal(ca.c.data, ca.mu.data)
    assert phi.shape == (2, 2 * bundle64.cfg.text_hidden)


def test_condition_is_reparameterised(bundle64):
    eps = np.random.default_rng(0).normal(size=(1, bundle64.cfg.cond_dim))
    _, ca = bundle64.encode_text(_caption(bundle64, 1), eps=eps)
    np.testing.assert_allclose(ca.c.data, ca.mu.data + np.exp(0.5 * ca.log_var.data) * eps, atol=1e-12)


def test_encode_text_rejects_wrong_length(bundle64):
    with pytest.raises(ShapeError):
        bundle64.encode_text(np.zeros((1, TINY_T - 1), int), eps=np.zeros((1, 4)))


def test_image_generator_range_and_determinism(bundle64):
    bundle64.g_x.eval()
    c = Tensor(np.random.default_rng(0).normal(size=(2, bundle64.cfg.cond_dim)))
    z = np.random.default_rng(1).normal(size=(2, bundle64.cfg.latent_dim))
    a = bundle64.image_from_text(c, z).data
    b = bundle64.image_from_text(c, z).data
    assert a.shape == (2, 3, 16, 16)
    assert a.min() >= -1 and a.max() <= 1
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ShapeError):
        bundle64.image_from_text(c, np.zeros((2, 3)))


def test_image_discriminator_range_and_spectral_bound(bundle64):
    d = bundle64.d_x
    s = bundle64.discriminate_image(_x(2), Tensor(np.ones((2, 2 * bundle64.cfg.text_hidden)))).data
    assert np.all((s > 0) & (s < 1))
    for layer in d.spectral_layers():
        assert jacobi_singular_values(layer.normalized_matrix())[0] <= 1 + 1e-3


def test_bundle_state_roundtrip_and_cast(bundle64):
    state = bundle64.state_dict()
    other = ModelBundle(bundle64.cfg, np.random.default_rng(42))
    other.load_state_dict(state)
    for k, v in other.state_dict().items():
        np.testing.assert_array_equal(v, state[k])
    other.astype(np.float32)
    assert all(v.dtype == np.float32 for v in other.state_dict().values())


def test_preset_config():
    assert preset_config("smoke", vocab_size=40).image_size == 32
    with pytest.raises(ValueError):
        preset_config("huge")
    with pytest.raises(ValueError):
        ModelConfig(image_size=48)


def test_chain_is_differentiable_wrt_captioner(bundle64):
    cfg = bundle64.cfg
    x = _x(2)
    feats = bundle64.image_encode(x)
    noise = np.zeros((2, TINY_T, cfg.vocab_size))
    bundle64.g_x.eval()
    cap = bundle64.caption_from_image(None, noise=noise, feats=feats)
    _, ca = bundle64.encode_text(cap.soft, eps=np.zeros((2, cfg.cond_dim)))
    x_hat = bundle64.image_from_text(ca.c, np.zeros((2, cfg.latent_dim)))
    loss = L.cycle_terms(x, x_hat, None, None, bundle64.image_encode, feats_x=feats).total
    ad.backward(loss)
    assert np.abs(bundle64.g_y.out.weight.grad).sum() > 0
    assert all(p.grad is None for p in bundle64.image_encoder.parameters())
