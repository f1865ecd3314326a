"""Training phases, optimizer, loss logging and checkpoints.

Phases run in order: ``encoder`` (attribute classifier, then frozen),
``captioner`` (teacher-forced cross-entropy), ``t2i`` (text-to-image GAN)
and ``main`` (joint adversarial training with optional cycle terms).
Every random draw comes from a named stream derived from the master seed,
so runs are reproducible and resumable at epoch boundaries.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .data import COLOR_NAMES, CaptionDataset, PairingMode, Vocab, batches
from .losses import LossWeights
from .models import ModelBundle, ModelConfig, one_hot
from .sampling import gumbel_from_uniform

PHASES = ("encoder", "captioner", "t2i", "main")
STREAMS = ("init", "shuffle", "gumbel", "latent", "cond_eps", "eval", "pairing")
EVAL_SEED = 20240

LOSS_COLUMNS = ("phase", "epoch", "step", "f_ie", "caption_ce", "d_x", "g_x", "kl", "d_y", "g_y",
                "cyc_pixel", "cyc_feature", "cyc_text", "v_d", "v_g")
EVAL_COLUMNS = ("phase", "epoch", "heldout_cycle_image", "color_accuracy")


class TrainingAborted(RuntimeError):
    """A loss went non-finite; ``checkpoint`` names the last good state (may be None)."""

    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs_pretrain: int = 50
    epochs_main: int = 20
    epochs_encoder: int = 30
    batch_size: int = 16
    lr: float = 2e-4
    encoder_lr: float = 2e-3
    captioner_lr: float = 1e-3
    betas: tuple = (0.5, 0.999)
    weight_decay: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    pairing: str = "paired"
    cycle_enabled: bool = True
    seed: int = 0
    shuffle_seed: int | None = None
    tau: float = 1.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("epochs_pretrain", "epochs_main", "epochs_encoder", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.lr, self.encoder_lr, self.captioner_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.pairing not in ("paired", "unpaired"):
            raise ValueError(f"pairing must be 'paired' or 'unpaired', got {self.pairing!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, named_params, lr: float, betas=(0.5, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.data.dtype, copy=False)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/m/{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}/v/{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, prefix: str, arrays: dict) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"{prefix}/m/{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(arrays[f"{prefix}/v/{k}"], dtype=self.v[k].dtype)


def _named(bundle: ModelBundle, groups) -> list[tuple[str, Tensor]]:
    return [(f"{g}/{k}", p) for g in groups for k, p in getattr(bundle, g).named_parameters()]


OPTIMIZER_GROUPS = {
    "encoder": {"encoder": ("image_encoder",)},
    "captioner": {"captioner": ("g_y",)},
    "t2i": {"t2i_d": ("d_x",), "t2i_g": ("g_x", "text_encoder")},
    "main": {"main_d": ("d_y", "d_x"), "main_g": ("g_y", "g_x", "text_encoder")},
}


# ---------------------------------------------------------------- checkpoint format

MAGIC = b"CYCAPCK\x00"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _pack(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "dtype": "float32", "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(header, tensors=table)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, CHECKPOINT_VERSION, len(head)) + head + b"".join(blobs)


def _unpack(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"truncated checkpoint: {len(raw)} bytes is shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError("truncated checkpoint: header is incomplete")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    tensors = {}
    for entry in header.get("tensors", []):
        lo, n = start + entry["offset"], entry["nbytes"]
        if lo + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: tensor {entry['name']!r} extends past end of file")
        arr = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=lo)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    expected = start + sum(e["nbytes"] for e in header.get("tensors", []))
    if len(raw) != expected:
        raise CheckpointError(f"checkpoint size {len(raw)} does not match its table ({expected})")
    return header, tensors


@dataclass
class Checkpoint:
    header: dict
    tensors: dict

    @property
    def model_state(self) -> dict[str, np.ndarray]:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.header["model_config"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.header["train_config"])

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.header["vocab"])

    def bundle(self) -> ModelBundle:
        """Rebuild the networks with the stored weights (float32, eval mode)."""
        with ad.precision(np.float32):
            b = ModelBundle(self.model_config, np.random.default_rng(0))
            b.astype(np.float32)
        b.load_state_dict(self.model_state)
        if self.header.get("encoder_frozen"):
            b.freeze_image_encoder()
        return b.eval()

    def to_bytes(self) -> bytes:
        return _pack({k: v for k, v in self.header.items() if k != "tensors"}, self.tensors)


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    """Atomically write a checkpoint (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = _pack(header, tensors)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    header, tensors = _unpack(path.read_bytes())
    return Checkpoint(header, tensors)


# ---------------------------------------------------------------- helpers

def rng_streams(seed: int, shuffle_seed: int | None = None) -> dict[str, np.random.Generator]:
    out = {}
    for i, name in enumerate(STREAMS):
        base = shuffle_seed if (name == "shuffle" and shuffle_seed is not None) else seed
        out[name] = np.random.default_rng(np.random.SeedSequence([base, i]))
    return out


def _finite(values: dict[str, float]) -> bool:
    return all(math.isfinite(v) for v in values.values())


def first_color(words) -> str | None:
    for w in words:
        if w in COLOR_NAMES:
            return w
    return None


def _f(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


# ---------------------------------------------------------------- trainer

class Trainer:
    """Owns one bundle and runs the phases over one dataset.

    ``out_dir`` (optional) receives ``losses.csv``, ``eval.csv`` and
    ``last.ckpt`` (rewritten at every epoch end).
    """

    def __init__(self, dataset: CaptionDataset, model_config: ModelConfig, config: TrainConfig,
                 out_dir=None):
        self.dataset, self.mcfg, self.cfg = dataset, model_config, config
        if model_config.vocab_size != len(dataset.vocab):
            raise ValueError(f"model vocab_size {model_config.vocab_size} != dataset vocab {len(dataset.vocab)}")
        if model_config.caption_length != dataset.T:
            raise ValueError(f"model caption_length {model_config.caption_length} != dataset T {dataset.T}")
        if model_config.image_size != dataset.images.shape[-1]:
            raise ValueError(f"model image_size {model_config.image_size} != dataset images {dataset.images.shape[-1]}")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rngs = rng_streams(config.seed, config.shuffle_seed)
        with ad.precision(np.float32):
            self.bundle = ModelBundle(model_config, self.rngs["init"]).astype(np.float32)
        self.bundle.train()
        n_train = len(dataset.indices("train"))
        if config.pairing == "unpaired":
            self.pairing = PairingMode.unpaired(config.seed, n_train)
        else:
            self.pairing = PairingMode()
        self.images32 = dataset.images.astype(np.float32)
        self.phase = None
        self.epoch = 0
        self.step = 0
        self.optimizers: dict[str, Adam] = {}
        self.loss_rows: list[dict] = []
        self.eval_rows: list[dict] = []
        self.phases_done: list[str] = []
        self._good: bytes | None = None

    # -- state

    def _header(self) -> dict:
        return {
            "model_config": self.mcfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "vocab": list(self.dataset.vocab.tokens),
            "phase": self.phase,
            "epoch": self.epoch,
            "step": self.step,
            "phases_done": list(self.phases_done),
            "encoder_frozen": bool(self.bundle.image_encoder.frozen),
            "rng_states": {k: r.bit_generator.state for k, r in self.rngs.items()},
            "optimizers": {k: {"t": o.t, "lr": o.lr} for k, o in self.optimizers.items()},
            "pairing_permutation": (None if self.pairing.permutation is None
                                    else [int(i) for i in self.pairing.permutation]),
        }

    def _tensors(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.bundle.state_dict().items()}
        for name, opt in self.optimizers.items():
            out.update(opt.state_arrays(f"opt/{name}"))
        return out

    def checkpoint_bytes(self) -> bytes:
        return _pack(self._header(), self._tensors())

    def save(self, path) -> Path:
        return save_checkpoint(path, self._header(), self._tensors())

    def restore(self, ckpt: Checkpoint, reset_phase: bool = False) -> None:
        """Load weights (and, unless ``reset_phase``, optimizer and rng state)."""
        h = ckpt.header
        if h["vocab"] != list(self.dataset.vocab.tokens):
            raise CheckpointError("checkpoint vocabulary does not match the dataset")
        if h["model_config"] != self.mcfg.to_dict():
            raise CheckpointError("checkpoint model configuration does not match")
        self.bundle.load_state_dict(ckpt.model_state)
        if h.get("encoder_frozen"):
            self.bundle.freeze_image_encoder()
        self.phases_done = list(h.get("phases_done", []))
        if reset_phase:
            return
        self.phase, self.epoch, self.step = h["phase"], h["epoch"], h["step"]
        for k, state in h["rng_states"].items():
            self.rngs[k].bit_generator.state = state
        self.optimizers = {}
        if self.phase is not None:
            self._make_optimizers(self.phase)
            for name, meta in h["optimizers"].items():
                self.optimizers[name].t = meta["t"]
                self.optimizers[name].load_arrays(f"opt/{name}", ckpt.tensors)

    def _make_optimizers(self, phase: str) -> None:
        lr = {"encoder": self.cfg.encoder_lr, "captioner": self.cfg.captioner_lr}.get(phase, self.cfg.lr)
        self.optimizers = {name: Adam(_named(self.bundle, groups), lr, self.cfg.betas,
                                      weight_decay=self.cfg.weight_decay)
                           for name, groups in OPTIMIZER_GROUPS[phase].items()}

    # -- logging

    def truncate_logs(self) -> None:
        """Drop CSV rows written after the restored checkpoint (an interrupted epoch)."""
        if self.out_dir is None:
            return
        keep_loss = lambda r: int(r["step"]) <= self.step
        order = {p: i for i, p in enumerate(PHASES)}
        here = order.get(self.phase, -1)
        keep_eval = lambda r: (order[r["phase"]], int(r["epoch"])) <= (here, self.epoch)
        for name, keep in (("losses.csv", keep_loss), ("eval.csv", keep_eval)):
            path = self.out_dir / name
            if not path.exists():
                continue
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                rows = [r for r in reader if r]
            if header is None:
                continue
            kept = [r for r in rows if keep(dict(zip(header, r)))]
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            w.writerows(kept)
            path.write_text(buf.getvalue(), encoding="utf-8")

    def _log(self, values: dict[str, float]) -> None:
        row = {"phase": self.phase, "epoch": self.epoch, "step": self.step, **values}
        self.loss_rows.append(row)
        if self.out_dir is not None:
            _append_csv(self.out_dir / "losses.csv", LOSS_COLUMNS, [row])

    def _maybe_eval(self) -> None:
        if len(self.dataset.indices("test")):
            self._log_eval(self.evaluate())

    def _log_eval(self, values: dict[str, float]) -> None:
        row = {"phase": self.phase, "epoch": self.epoch, **values}
        self.eval_rows.append(row)
        if self.out_dir is not None:
            _append_csv(self.out_dir / "eval.csv", EVAL_COLUMNS, [row])

    # -- phase driver

    def _epochs_for(self, phase: str) -> int:
        return {"encoder": self.cfg.epochs_encoder, "captioner": self.cfg.epochs_pretrain,
                "t2i": self.cfg.epochs_pretrain, "main": self.cfg.epochs_main}[phase]

    def run_phase(self, phase: str, epochs: int | None = None) -> None:
        """Run ``phase`` up to ``epochs`` total epochs, continuing a restored run if needed."""
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if phase != "encoder" and not self.bundle.image_encoder.frozen:
            raise RuntimeError("the image encoder must be trained and frozen before this phase")
        target = self._epochs_for(phase) if epochs is None else epochs
        if self.phase != phase:
            self.phase, self.epoch = phase, 0
            self._make_optimizers(phase)
            if phase == "main":
                self._maybe_eval()
        step_fn = {"encoder": self._encoder_step, "captioner": self._captioner_step,
                   "t2i": self._t2i_step, "main": self._main_step}[phase]
        self._good = self.checkpoint_bytes()
        while self.epoch < target:
            self.bundle.train()
            self.epoch += 1
            for batch in batches(self.dataset, "train", self.pairing, self.cfg.batch_size, self.rngs["shuffle"]):
                if len(batch.indices) < 2:
                    continue
                self.step += 1
                with ad.precision(np.float32):
                    values = step_fn(batch)
                if not _finite(values):
                    self._abort(values)
                self._log(values)
            if phase == "main":
                self._maybe_eval()
            self._good = self.checkpoint_bytes()
            if self.out_dir is not None:
                self.save(self.out_dir / "last.ckpt")
        if self.epoch < self._epochs_for(phase):
            return  # partial run; the phase continues on the next call
        if phase == "encoder":
            self.bundle.freeze_image_encoder()
        if phase not in self.phases_done:
            self.phases_done.append(phase)

    def _abort(self, values: dict) -> None:
        bad = sorted(k for k, v in values.items() if not math.isfinite(v))
        path = None
        if self._good is not None:
            header, tensors = _unpack(self._good)
            self.bundle.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
            if self.out_dir is not None:
                path = save_checkpoint(self.out_dir / "last_good.ckpt", header, tensors)
        raise TrainingAborted(f"non-finite loss in phase {self.phase} epoch {self.epoch} step {self.step}: "
                              f"{', '.join(bad)}", path)

    def pretrain(self) -> None:
        self.run_phase("encoder")
        self.run_phase("captioner")
        self.run_phase("t2i")

    def train_main(self) -> None:
        self.run_phase("main")

    # -- steps

    def _x(self, batch) -> Tensor:
        return Tensor(batch.images.astype(np.float32, copy=False))

    def _encoder_step(self, batch) -> dict:
        opt = self.optimizers["encoder"]
        enc = self.bundle.image_encoder
        labels = self.dataset.labels[batch.indices]
        logits = enc.logits(enc.features(self._x(batch)))
        loss = None
        for k, lg in enumerate(logits):
            ce = L.sequence_cross_entropy(ad.reshape(lg, (lg.shape[0], 1, -1)), labels[:, k:k + 1])
            loss = ce if loss is None else ad.add(loss, ce)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        return {"f_ie": _f(loss)}

    def _captioner_step(self, batch) -> dict:
        opt = self.optimizers["captioner"]
        with ad.no_grad():
            feats = self.bundle.image_encode(self._x(batch))
        out = self.bundle.caption_from_image(None, mode="teacher_forced", reference=batch.captions, feats=feats)
        loss = L.sequence_cross_entropy(out.logits, batch.captions)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        return {"caption_ce": _f(loss)}

    def _latent(self, n: int) -> np.ndarray:
        return self.rngs["latent"].standard_normal((n, self.mcfg.latent_dim)).astype(np.float32)

    def _eps(self, n: int) -> np.ndarray:
        return self.rngs["cond_eps"].standard_normal((n, self.mcfg.cond_dim)).astype(np.float32)

    def _t2i_step(self, batch) -> dict:
        b, w = self.bundle, self.cfg.weights
        opt_d, opt_g = self.optimizers["t2i_d"], self.optimizers["t2i_g"]
        x = self._x(batch)
        n = x.shape[0]
        phi, ca = b.encode_text(batch.captions, eps=self._eps(n))
        x_fake = b.image_from_text(ca.c, self._latent(n))
        # D step: text features and fakes enter as constants
        phi_c = phi.detach()
        scores = b.discriminate_image(ad.concat([x, x_fake.detach()], axis=0), ad.concat([phi_c, phi_c], axis=0))
        l_d = L.d_x_loss(scores[:n], scores[n:])
        opt_d.zero_grad()
        ad.backward(l_d)
        opt_d.step()
        # G step: generator and text encoder through the updated discriminator
        l_g = L.g_x_loss(b.discriminate_image(x_fake, phi), ca.mu, ca.log_var, w)
        opt_g.zero_grad()
        ad.backward(l_g)
        opt_g.step()
        return {"d_x": _f(l_d), "g_x": _f(l_g), "kl": _f(L.kl_diag_gauss(ca.mu.detach(), ca.log_var.detach()))}

    def _main_step(self, batch) -> dict:
        b, w, cfg = self.bundle, self.cfg.weights, self.mcfg
        opt_d, opt_g = self.optimizers["main_d"], self.optimizers["main_g"]
        x = self._x(batch)
        n = x.shape[0]
        y = batch.captions
        y_hot = one_hot(y, cfg.vocab_size, dtype=np.float32)
        with ad.no_grad():
            feats = b.image_encode(x)
        noise = self.rngs["gumbel"].random((n, cfg.caption_length, cfg.vocab_size))
        y_gen = b.caption_from_image(None, noise=gumbel_from_uniform(noise).astype(np.float32),
                                     tau=self.cfg.tau, feats=feats)
        cycle = self.cfg.cycle_enabled
        # one text-encoder pass and one generator pass cover both directions
        texts = ad.concat([y_hot, y_gen.soft], axis=0) if cycle else y_hot
        m = texts.shape[0]
        phi_all, ca_all = b.encode_text(texts, eps=self._eps(m))
        x_all = b.image_from_text(ca_all.c, self._latent(m))
        phi, x_tilde = phi_all[:n], x_all[:n]
        mu, log_var = ca_all.mu[:n], ca_all.log_var[:n]

        # D step
        ds_y = b.d_y(ad.concat([y_hot, y_gen.soft.detach()], axis=0), ad.concat([feats, feats], axis=0))
        phi_c = phi.detach()
        ds_x = b.discriminate_image(ad.concat([x, x_tilde.detach()], axis=0), ad.concat([phi_c, phi_c], axis=0))
        l_dy = L.d_y_loss(ds_y[:n], ds_y[n:])
        l_dx = L.d_x_loss(ds_x[:n], ds_x[n:])
        v_d, _ = L.total_losses(l_dy, l_dx, 0.0, 0.0)
        opt_d.zero_grad()
        ad.backward(v_d)
        opt_d.step()

        # G step
        l_gy = L.g_y_loss(b.d_y(y_gen.soft, feats))
        l_gx = L.g_x_loss(b.discriminate_image(x_tilde, phi), mu, log_var, w)
        values = {"d_y": _f(l_dy), "d_x": _f(l_dx), "g_y": _f(l_gy), "g_x": _f(l_gx),
                  "kl": _f(L.kl_diag_gauss(mu.detach(), log_var.detach()))}
        if cycle:
            x_hat = x_all[n:]
            y_back = b.caption_from_image(None, mode="teacher_forced", reference=y,
                                          feats=b.image_encode(x_tilde))
            terms = L.cycle_terms(x, x_hat, y_back.logits, y, b.image_encode, w, feats_x=feats)
            values.update(terms.breakdown())
            del values["cyc_total"]
            _, v_g = L.total_losses(l_dy, l_dx, l_gy, l_gx, terms.total, True)
        else:
            _, v_g = L.total_losses(l_dy, l_dx, l_gy, l_gx, None, False)
        opt_g.zero_grad()
        ad.backward(v_g)
        opt_g.step()
        values["v_d"] = _f(v_d)
        values["v_g"] = _f(v_g)
        return values

    # -- evaluation

    def evaluate(self, split: str = "test") -> dict[str, float]:
        """Held-out cycle image loss (fixed noise) and caption colour accuracy."""
        return evaluate_bundle(self.bundle, self.dataset, self.cfg.weights, split=split, tau=self.cfg.tau)


def evaluate_bundle(bundle: ModelBundle, dataset: CaptionDataset, weights: LossWeights | None = None,
                    split: str = "test", tau: float = 1.0, batch_size: int = 128) -> dict[str, float]:
    weights = weights or LossWeights()
    cfg = bundle.cfg
    idx = dataset.indices(split)
    rng = np.random.default_rng(EVAL_SEED)
    was_training = bundle.g_x.training
    bundle.eval()
    img_total, hits = 0.0, 0
    try:
        with ad.precision(np.float32), ad.no_grad():
            for s in range(0, len(idx), batch_size):
                part = idx[s:s + batch_size]
                n = len(part)
                x = Tensor(dataset.images[part].astype(np.float32))
                feats = bundle.image_encode(x)
                noise = rng.random((n, cfg.caption_length, cfg.vocab_size))
                y_gen = bundle.caption_from_image(None, noise=gumbel_from_uniform(noise).astype(np.float32),
                                                  tau=tau, feats=feats)
                _, ca = bundle.encode_text(y_gen.soft, eps=rng.standard_normal((n, cfg.cond_dim)))
                x_hat = bundle.image_from_text(ca.c, rng.standard_normal((n, cfg.latent_dim)))
                terms = L.cycle_terms(x, x_hat, None, None, bundle.image_encode, weights, feats_x=feats)
                img_total += (float(terms.pixel.data) + float(terms.feature.data)) * n
                greedy = bundle.g_y.greedy(feats)
                for i, row in zip(part, greedy):
                    if first_color(dataset.vocab.decode(row)) == dataset.color_of(int(i)):
                        hits += 1
    finally:
        bundle.train(was_training)
    return {"heldout_cycle_image": img_total / len(idx), "color_accuracy": hits / len(idx)}


def _append_csv(path: Path, columns, rows) -> None:
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns=LOSS_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------- functional wrappers

def pretrain_captioner(trainer: Trainer) -> ModelBundle:
    trainer.run_phase("encoder")
    trainer.run_phase("captioner")
    return trainer.bundle


def pretrain_t2i(trainer: Trainer) -> ModelBundle:
    trainer.run_phase("t2i")
    return trainer.bundle


def train_cycle(trainer: Trainer) -> list[dict]:
    missing = [p for p in ("encoder", "captioner", "t2i") if p not in trainer.phases_done]
    if missing:
        raise RuntimeError(f"pretraining phases not complete: {', '.join(missing)}")
    trainer.run_phase("main")
    return trainer.eval_rows
