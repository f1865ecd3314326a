"""Gumbel noise and the Gumbel-softmax relaxation used for caption sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

U_CLAMP = 1e-10
PROB_FLOOR = 1e-10


@dataclass
class GumbelConfig:
    """Temperature settings.  ``anneal_to`` enables a linear schedule."""

    tau: float = 1.0
    anneal_to: float | None = None
    stream: str = "gumbel"

    def __post_init__(self):
        if self.tau <= 0 or (self.anneal_to is not None and self.anneal_to <= 0):
            raise ValueError("Gumbel temperature must be positive")

    def temperature(self, progress: float = 0.0) -> float:
        """Temperature at ``progress`` in [0, 1] of the schedule."""
        if self.anneal_to is None:
            return self.tau
        progress = min(max(progress, 0.0), 1.0)
        return self.tau + (self.anneal_to - self.tau) * progress


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
    return -np.log(-np.log(u))


def gumbel_noise(shape, rng: np.random.Generator, dtype=None) -> Tensor:
    """I.i.d. standard Gumbel samples as a constant tensor."""
    g = gumbel_from_uniform(rng.random(shape))
    return Tensor(g, dtype=dtype)


def _noise_array(g) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g)


def gumbel_softmax(probs: Tensor, g, tau: float = 1.0) -> Tensor:
    """Relaxed one-hot sample ``softmax((log(pi) + g) / tau)`` over the last axis.

    Zero or negative entries in ``probs`` are floored and the rows
    renormalized (with a warning); the floor is applied through the graph so
    gradients still reach ``probs``.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if np.any(probs.data < PROB_FLOOR):
        warnings.warn("gumbel_softmax: class probabilities below floor; flooring and renormalizing",
                      RuntimeWarning)
        floored = ad.add(ad.relu(ad.sub(probs, PROB_FLOOR)), PROB_FLOOR)
        probs = ad.div(floored, ad.sum(floored, axis=-1, keepdims=True))
    noise = ad.constant(_noise_array(g), like=probs)
    return ad.softmax(ad.mul(ad.add(ad.log(probs), noise), 1.0 / tau), axis=-1)


def gumbel_softmax_logits(logits: Tensor, g, tau: float = 1.0) -> Tensor:
    """Same relaxation fed with unnormalized logits (the log is skipped).

    Equal to :func:`gumbel_softmax` on ``softmax(logits)`` because the
    normalizer cancels inside the outer softmax.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    noise = ad.constant(_noise_array(g), like=logits)
    return ad.softmax(ad.mul(ad.add(logits, noise), 1.0 / tau), axis=-1)
