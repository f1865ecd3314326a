"""Objectives for the caption GAN, the image GAN and the cycle terms.

Discriminator objectives are written as losses to minimize (the negated
maximization targets).  Scores are clamped to ``[SCORE_EPS, 1 - SCORE_EPS]``
before any log.  Batch expectations are means over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SCORE_EPS = 1e-7


@dataclass
class LossWeights:
    lambda_kl: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1000.0
    lambda3: float = 0.01

    def __post_init__(self):
        for name in ("lambda_kl", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.tensor(np.asarray(x, dtype=float))


def _clamped_log(score: Tensor) -> Tensor:
    return ad.log(ad.clip(score, SCORE_EPS, 1 - SCORE_EPS))


def _clamped_log1m(score: Tensor) -> Tensor:
    return ad.log(ad.sub(1.0, ad.clip(score, SCORE_EPS, 1 - SCORE_EPS)))


def d_y_loss(score_real, score_fake) -> Tensor:
    """-(E log D(y, x) + E log(1 - D(G(x), x)))."""
    real, fake = _t(score_real), _t(score_fake)
    return ad.neg(ad.add(ad.mean(_clamped_log(real)), ad.mean(_clamped_log1m(fake))))


def g_y_loss(score_fake) -> Tensor:
    """E[-log(D / (1 - D))] on generated captions."""
    fake = _t(score_fake)
    return ad.neg(ad.mean(ad.sub(_clamped_log(fake), _clamped_log1m(fake))))


def kl_diag_gauss(mu, log_var) -> Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over dims, batch-averaged."""
    mu, log_var = _t(mu), _t(log_var)
    if mu.shape != log_var.shape:
        raise ad.ShapeError(f"kl_diag_gauss: mu {mu.shape} vs log_var {log_var.shape}")
    terms = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(log_var)), ad.add(log_var, 1.0))
    per_sample = ad.mul(ad.sum(terms, axis=-1), 0.5) if terms.ndim else ad.mul(terms, 0.5)
    return ad.mean(per_sample)


def d_x_loss(score_real, score_fake) -> Tensor:
    real, fake = _t(score_real), _t(score_fake)
    return ad.neg(ad.add(ad.mean(_clamped_log(real)), ad.mean(_clamped_log1m(fake))))


def g_x_loss(score_fake, mu, log_var, weights: LossWeights | None = None) -> Tensor:
    """E log(1 - D_X(G_X(z, c), phi)) + lambda_KL * KL."""
    weights = weights or LossWeights()
    adv = ad.mean(_clamped_log1m(_t(score_fake)))
    return ad.add(adv, ad.mul(kl_diag_gauss(mu, log_var), weights.lambda_kl))


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    return ad.mean(ad.abs(ad.sub(a, b)))


def sequence_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Sum over steps of token cross-entropy, averaged over the batch.

    ``logits`` is (B, T, V) pre-softmax; ``target`` is (B, T) ids.
    """
    target = np.asarray(target)
    logp = ad.log_softmax(logits, axis=-1)
    mask = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(mask, target[..., None], 1.0, axis=-1)
    picked = ad.sum(ad.mul(logp, ad.constant(mask, like=logits)), axis=(1, 2))
    return ad.neg(ad.mean(picked))


@dataclass
class CycleTerms:
    pixel: Tensor
    feature: Tensor
    text: Tensor
    total: Tensor

    def breakdown(self) -> dict[str, float]:
        return {"cyc_pixel": float(self.pixel.data), "cyc_feature": float(self.feature.data),
                "cyc_text": float(self.text.data), "cyc_total": float(self.total.data)}


def cycle_terms(x: Tensor | None, x_regen: Tensor | None, y_logits: Tensor | None, y_ref, image_encoder,
                weights: LossWeights | None = None, feats_x: Tensor | None = None) -> CycleTerms:
    """Weighted pixel L1, encoder-feature L1 and caption cross-entropy.

    ``image_encoder`` is a callable mapping pixels to features (the frozen
    encoder); ``feats_x`` may be passed to reuse already-computed features of
    ``x``.  Either direction may be omitted (None) and contributes zero.
    """
    weights = weights or LossWeights()
    zero = ad.tensor(0.0, dtype=(x_regen if x_regen is not None else y_logits).dtype)
    if x_regen is not None:
        if x.shape != x_regen.shape:
            raise ad.ShapeError(f"cycle_loss: x {x.shape} vs x_regen {x_regen.shape}")
        fx = image_encoder(x) if feats_x is None else feats_x
        pixel = ad.mul(l1_mean(x_regen, x), weights.lambda1)
        feature = ad.mul(l1_mean(image_encoder(x_regen), fx), weights.lambda2)
    else:
        pixel = feature = zero
    if y_logits is not None:
        text = ad.mul(sequence_cross_entropy(y_logits, y_ref), weights.lambda3)
    else:
        text = zero
    return CycleTerms(pixel, feature, text, ad.add(ad.add(pixel, feature), text))


def cycle_loss(x, x_regen, y_logits, y_ref, image_encoder, weights: LossWeights | None = None) -> Tensor:
    return cycle_terms(x, x_regen, y_logits, y_ref, image_encoder, weights).total


def total_losses(l_dy, l_dx, l_gy, l_gx, l_cyc=None, cycle_enabled: bool = True) -> tuple[Tensor, Tensor]:
    """(V_D, V_G) as quantities to minimize; the cycle term is dropped when disabled."""
    v_d = ad.add(_t(l_dy), _t(l_dx))
    v_g = ad.add(_t(l_gy), _t(l_gx))
    if cycle_enabled and l_cyc is not None:
        v_g = ad.add(v_g, _t(l_cyc))
    return v_d, v_g
