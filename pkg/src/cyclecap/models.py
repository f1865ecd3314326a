"""The six networks of the image <-> caption cycle and the bundle that owns them.

Captions are handled as (B, T, V) simplex tensors everywhere: hard captions
become exact one-hot rows, generated captions are Gumbel-softmax samples.
Images are (B, 3, H, W) in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError
from .data import BOS_ID, EOS_ID, SHAPES, COLOR_NAMES, SIZES
from .nn import (BatchNorm, BiLSTMEncoder, Conv2d, ConvTranspose2d, Embedding, Linear, LSTMCell,
                 LstmState, Module)
from .sampling import gumbel_noise, gumbel_softmax_logits


class ModelStateError(RuntimeError):
    """A network was used in a state its contract forbids (e.g. unfrozen encoder)."""


@dataclass
class ModelConfig:
    vocab_size: int = 128
    image_size: int = 64
    caption_length: int = 20
    embed_dim: int = 128
    captioner_hidden: int = 256
    text_hidden: int = 512
    cond_dim: int = 128
    latent_dim: int = 100
    encoder_channels: tuple = (16, 32, 16)
    gen_channels: int = 32
    disc_channels: int = 32
    disc_text_dim: int = 64
    dy_hidden: int = 128
    dy_fusion_dim: int = 128
    dy_fusion: str = "product"
    tau: float = 1.0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        if self.image_size < 16 or self.image_size & (self.image_size - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {self.image_size}")
        if self.dy_fusion not in ("product", "inner"):
            raise ValueError(f"unknown D_Y fusion {self.dy_fusion!r}")

    @property
    def feature_dim(self) -> int:
        return self.encoder_channels[-1] * 16

    @property
    def n_up(self) -> int:
        return int(math.log2(self.image_size // 4))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d


PRESETS = {
    "full": {},
    "smoke": dict(image_size=32, embed_dim=32, captioner_hidden=64, text_hidden=64, cond_dim=32,
                  encoder_channels=(16, 32, 16), gen_channels=8, disc_channels=8, disc_text_dim=32,
                  dy_hidden=64, dy_fusion_dim=64),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    """Named size presets; ``smoke`` is small enough for CPU smoke runs."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def one_hot(ids: np.ndarray, vocab_size: int, dtype=None) -> Tensor:
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (vocab_size,), dtype=dtype or ad.get_default_dtype())
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return Tensor(out, dtype=out.dtype)


def as_simplex(caption, vocab_size: int, like: Tensor | None = None) -> Tensor:
    """Hard id arrays become one-hot tensors; soft tensors pass through."""
    if isinstance(caption, Tensor):
        return caption
    return one_hot(caption, vocab_size, dtype=like.dtype if like is not None else None)


@dataclass
class CondAugment:
    mu: Tensor
    log_var: Tensor
    c: Tensor

    def __post_init__(self):
        if not (self.mu.shape == self.log_var.shape == self.c.shape):
            raise ShapeError("CondAugment: mu, log_var and c must share a shape")


@dataclass
class CaptionOutput:
    soft: Tensor      # (B, T, V) simplex rows
    logits: Tensor    # (B, T, V) pre-softmax scores


# ---------------------------------------------------------------- F_IE

class ImageEncoder(Module):
    """Three conv+pool blocks and attribute heads; frozen after pretraining.

    The flattened output of the last pooling layer (always 4×4 spatial) is
    the perceptual feature used by the captioner, D_Y and the cycle loss.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c1, c2, c3 = cfg.encoder_channels
        self.convs = [Conv2d(3, c1, 3, rng, padding=1, init_std=None),
                      Conv2d(c1, c2, 3, rng, padding=1, init_std=None),
                      Conv2d(c2, c3, 3, rng, padding=1, init_std=None)]
        self.pools = (2, 2, cfg.image_size // 16)
        self.head_shape = Linear(cfg.feature_dim, len(SHAPES), rng)
        self.head_color = Linear(cfg.feature_dim, len(COLOR_NAMES), rng)
        self.head_size = Linear(cfg.feature_dim, len(SIZES), rng)
        self.trained = False

    def features(self, x: Tensor) -> Tensor:
        h = x
        for conv, k in zip(self.convs, self.pools):
            h = ad.max_pool(ad.relu(conv(h)), k)
        return ad.reshape(h, (h.shape[0], -1))

    def logits(self, feats: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.head_shape(feats), self.head_color(feats), self.head_size(feats)

    def class_probs(self, x: Tensor, head: str = "shape") -> np.ndarray:
        with ad.no_grad():
            shape_l, color_l, size_l = self.logits(self.features(x))
        chosen = {"shape": shape_l, "color": color_l, "size": size_l}[head]
        return ad.softmax(chosen, axis=-1).data


# ---------------------------------------------------------------- G_Y

class CaptionGenerator(Module):
    """LSTM captioner; both caption pathways run through this one object."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.init_hidden = Linear(cfg.feature_dim, cfg.captioner_hidden, rng)
        self.init_cell = Linear(cfg.feature_dim, cfg.captioner_hidden, rng)
        self.embed = Embedding(cfg.vocab_size, cfg.embed_dim, rng)
        self.cell = LSTMCell(cfg.embed_dim, cfg.captioner_hidden, rng)
        self.out = Linear(cfg.captioner_hidden, cfg.vocab_size, rng)

    def _initial(self, feats: Tensor) -> tuple[LstmState, Tensor]:
        state = LstmState(self.init_hidden(feats), self.init_cell(feats))
        bos = self.embed.lookup(np.full(feats.shape[0], BOS_ID))
        return state, bos

    def rollout(self, feats: Tensor, noise: np.ndarray, tau: float) -> CaptionOutput:
        """Free-running generation; each step feeds its relaxed sample back in."""
        T, V = self.cfg.caption_length, self.cfg.vocab_size
        if noise.shape != (feats.shape[0], T, V):
            raise ShapeError(f"noise must be {(feats.shape[0], T, V)}, got {noise.shape}")
        state, inp = self._initial(feats)
        samples, logits = [], []
        for t in range(T):
            h, state = self.cell.step(inp, state)
            lg = self.out(h)
            z = gumbel_softmax_logits(lg, noise[:, t, :], tau)
            samples.append(z)
            logits.append(lg)
            inp = self.embed.soft(z)
        return CaptionOutput(ad.stack(samples, axis=1), ad.stack(logits, axis=1))

    def teacher_forced(self, feats: Tensor, reference: np.ndarray) -> CaptionOutput:
        reference = np.asarray(reference)
        T = self.cfg.caption_length
        if reference.ndim != 2 or reference.shape != (feats.shape[0], T):
            raise ShapeError(f"reference caption must be (B, {T}), got {reference.shape}")
        state, bos = self._initial(feats)
        inputs = ad.concat([ad.reshape(bos, (bos.shape[0], 1, -1)), self.embed.lookup(reference[:, :-1])], axis=1)
        xw = self.cell.project_inputs(inputs)
        hs = []
        for t in range(T):
            h, state = self.cell.step_projected(xw[:, t, :], state)
            hs.append(h)
        logits = self.out(ad.stack(hs, axis=1))
        return CaptionOutput(ad.softmax(logits, axis=-1), logits)

    def greedy(self, feats: Tensor) -> np.ndarray:
        """Argmax decoding (no noise) -> (B, T) ids, EOS-suffixed."""
        T = self.cfg.caption_length
        with ad.no_grad():
            state, inp = self._initial(feats)
            ids = np.zeros((feats.shape[0], T), dtype=np.int64)
            for t in range(T):
                h, state = self.cell.step(inp, state)
                ids[:, t] = self.out(h).data.argmax(axis=-1)
                inp = self.embed.lookup(ids[:, t])
        ended = np.cumsum(ids == EOS_ID, axis=1) > 0
        ids[ended] = EOS_ID
        return ids


# ---------------------------------------------------------------- D_Y

class CaptionDiscriminator(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.embed = Embedding(cfg.vocab_size, cfg.embed_dim, rng)
        self.cell = LSTMCell(cfg.embed_dim, cfg.dy_hidden, rng)
        self.img_proj = Linear(cfg.feature_dim, cfg.dy_fusion_dim, rng)
        self.txt_proj = Linear(cfg.dy_hidden, cfg.dy_fusion_dim, rng)
        self.score = Linear(cfg.dy_fusion_dim, 1, rng) if cfg.dy_fusion == "product" else None
        if cfg.dy_fusion == "inner":
            self.score_bias = Linear(1, 1, rng)

    def __call__(self, caption: Tensor, feats: Tensor) -> Tensor:
        T = self.cfg.caption_length
        if caption.ndim != 3 or caption.shape[1] != T:
            raise ShapeError(f"D_Y expects (B, {T}, V) captions, got {caption.shape}")
        state = self.cell.run(self.embed.soft(caption))
        fused = ad.mul(ad.tanh(self.img_proj(feats)), ad.tanh(self.txt_proj(state.hidden)))
        if self.score is not None:
            logit = self.score(fused)
        else:
            logit = self.score_bias(ad.sum(fused, axis=1, keepdims=True))
        return ad.sigmoid(ad.reshape(logit, (-1,)))


# ---------------------------------------------------------------- text encoder + CA

class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.embed = Embedding(cfg.vocab_size, cfg.embed_dim, rng)
        self.bilstm = BiLSTMEncoder(cfg.embed_dim, cfg.text_hidden, cfg.caption_length, rng)
        self.mu_head = Linear(self.bilstm.out_dim, cfg.cond_dim, rng)
        self.logvar_head = Linear(self.bilstm.out_dim, cfg.cond_dim, rng)

    def __call__(self, caption: Tensor, eps: np.ndarray) -> tuple[Tensor, CondAugment]:
        phi = self.bilstm(self.embed.soft(caption))
        mu = self.mu_head(phi)
        log_var = self.logvar_head(phi)
        std = ad.exp(ad.mul(log_var, 0.5))
        c = ad.add(mu, ad.mul(std, ad.constant(eps, like=mu)))
        return phi, CondAugment(mu, log_var, c)


# ---------------------------------------------------------------- G_X

class ImageGenerator(Module):
    """concat(z, c) -> linear -> 4×4 map -> transposed-conv upsampling -> tanh."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_up
        chans = [cfg.gen_channels * 2 ** (n - 1 - i) for i in range(n)] + [3]
        self.base = chans[0]
        self.fc = Linear(cfg.latent_dim + cfg.cond_dim, self.base * 16, rng)
        self.bn0 = BatchNorm(self.base * 16)
        self.ups = [ConvTranspose2d(chans[i], chans[i + 1], 4, rng, stride=2, padding=1) for i in range(n)]
        self.bns = [BatchNorm(chans[i + 1]) for i in range(n - 1)]

    def __call__(self, z: Tensor, c: Tensor) -> Tensor:
        h = ad.relu(self.bn0(self.fc(ad.concat([z, c], axis=1))))
        h = ad.reshape(h, (h.shape[0], self.base, 4, 4))
        for i, up in enumerate(self.ups):
            h = up(h)
            h = ad.relu(self.bns[i](h)) if i < len(self.bns) else ad.tanh(h)
        return h


# ---------------------------------------------------------------- D_X

class ImageDiscriminator(Module):
    """Spectral-normalized conv stack; text features joined at the 4×4 stage."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_up
        chans = [3] + [cfg.disc_channels * 2 ** i for i in range(n)]
        self.downs = [Conv2d(chans[i], chans[i + 1], 4, rng, stride=2, padding=1, spectral=True)
                      for i in range(n)]
        top = chans[-1]
        self.text_proj = Linear(2 * cfg.text_hidden, cfg.disc_text_dim, rng, spectral=True)
        self.joint = Conv2d(top + cfg.disc_text_dim, top, 3, rng, padding=1, spectral=True)
        self.out = Linear(top * 16, 1, rng, spectral=True)

    def spectral_layers(self) -> list:
        return list(self.downs) + [self.text_proj, self.joint, self.out]

    def __call__(self, x: Tensor, phi: Tensor) -> Tensor:
        h = x
        for conv in self.downs:
            h = ad.leaky_relu(conv(h), 0.2)
        t = ad.leaky_relu(self.text_proj(phi), 0.2)
        t = ad.add(ad.reshape(t, (t.shape[0], t.shape[1], 1, 1)),
                   ad.constant(np.zeros((1, 1, 4, 4)), like=t))
        h = ad.leaky_relu(self.joint(ad.concat([h, t], axis=1)), 0.2)
        logit = self.out(ad.reshape(h, (h.shape[0], -1)))
        return ad.sigmoid(ad.reshape(logit, (-1,)))


# ---------------------------------------------------------------- bundle

GROUPS = ("image_encoder", "g_y", "d_y", "text_encoder", "g_x", "d_x")


class ModelBundle:
    """All networks plus the operations that chain them."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg, rng)
        self.g_y = CaptionGenerator(cfg, rng)
        self.d_y = CaptionDiscriminator(cfg, rng)
        self.text_encoder = TextEncoder(cfg, rng)
        self.g_x = ImageGenerator(cfg, rng)
        self.d_x = ImageDiscriminator(cfg, rng)

    def modules(self) -> dict[str, Module]:
        return {g: getattr(self, g) for g in GROUPS}

    def parameters(self, groups=GROUPS) -> list[Tensor]:
        return [p for g in groups for p in getattr(self, g).parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{g}/{k}": v for g, m in self.modules().items() for k, v in m.state_dict().items()}

    def load_state_dict(self, state: dict) -> None:
        for g, m in self.modules().items():
            prefix = g + "/"
            m.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def train(self, mode: bool = True) -> "ModelBundle":
        for m in self.modules().values():
            m.train(mode)
        return self

    def eval(self) -> "ModelBundle":
        return self.train(False)

    def astype(self, dtype) -> "ModelBundle":
        for m in self.modules().values():
            m.astype(dtype)
        return self

    def freeze_image_encoder(self) -> None:
        self.image_encoder.trained = True
        self.image_encoder.freeze()
        self.image_encoder.eval()

    # -- operations

    def image_encode(self, x: Tensor) -> Tensor:
        enc = self.image_encoder
        if not (enc.trained and enc.frozen):
            raise ModelStateError("image encoder must be pretrained and frozen before use")
        return enc.features(x)

    def caption_from_image(self, x: Tensor, mode: str = "gumbel_rollout", reference=None,
                           rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
                           tau: float | None = None, feats: Tensor | None = None) -> CaptionOutput:
        feats = self.image_encode(x) if feats is None else feats
        if mode == "gumbel_rollout":
            if noise is None:
                if rng is None:
                    raise ValueError("gumbel_rollout needs an rng or explicit noise")
                shape = (feats.shape[0], self.cfg.caption_length, self.cfg.vocab_size)
                noise = gumbel_noise(shape, rng, dtype=feats.dtype).data
            return self.g_y.rollout(feats, noise, self.cfg.tau if tau is None else tau)
        if mode == "teacher_forced":
            if reference is None:
                raise ValueError("teacher_forced mode needs a reference caption")
            return self.g_y.teacher_forced(feats, reference)
        raise ValueError(f"unknown caption mode {mode!r}")

    def discriminate_caption(self, caption, x: Tensor | None = None, feats: Tensor | None = None) -> Tensor:
        feats = self.image_encode(x) if feats is None else feats
        return self.d_y(as_simplex(caption, self.cfg.vocab_size, like=feats), feats)

    def encode_text(self, caption, rng: np.random.Generator | None = None,
                    eps: np.ndarray | None = None) -> tuple[Tensor, CondAugment]:
        simplex = as_simplex(caption, self.cfg.vocab_size)
        if simplex.shape[1] != self.cfg.caption_length:
            raise ShapeError(f"caption length {simplex.shape[1]} != {self.cfg.caption_length}")
        if eps is None:
            if rng is None:
                raise ValueError("encode_text needs an rng or explicit eps")
            eps = rng.standard_normal((simplex.shape[0], self.cfg.cond_dim))
        return self.text_encoder(simplex, np.asarray(eps, dtype=simplex.dtype))

    def image_from_text(self, c: Tensor, z) -> Tensor:
        z = z if isinstance(z, Tensor) else ad.constant(z, like=c)
        if z.shape[1] != self.cfg.latent_dim:
            raise ShapeError(f"latent must have {self.cfg.latent_dim} dims, got {z.shape}")
        return self.g_x(z, c)

    def discriminate_image(self, pixels: Tensor, phi: Tensor) -> Tensor:
        return self.d_x(pixels, phi)

    def greedy_caption(self, x: Tensor) -> np.ndarray:
        with ad.no_grad():
            feats = self.image_encode(x)
        return self.g_y.greedy(feats)
