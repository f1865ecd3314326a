"""Trainable layers built on :mod:`cyclecap.autodiff`."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError

SN_EPS = 1e-12
CONVERGE_TOL = 1e-12
CONVERGE_MAX_ITERS = 20000


class Module:
    """Container with named parameters, buffers and a train/eval flag."""

    training = True
    frozen = False

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, self, name
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, owner, key in self.named_buffers():
            state[name] = owner._buffers[key]
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (owner, key) for name, owner, key in self.named_buffers()}
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for name, (owner, key) in buffers.items():
            owner._buffers[key] = np.array(state[name], dtype=owner._buffers[key].dtype)

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (float32 <-> float64)."""
        dtype = np.dtype(dtype)
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, owner, key in self.named_buffers():
            owner._buffers[key] = owner._buffers[key].astype(dtype)
        return self


class Parameter(Tensor):
    """Trainable leaf owned by a :class:`Module`."""

    __slots__ = ()


def _param(data: np.ndarray) -> Parameter:
    return Parameter(data, requires_grad=True)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), SN_EPS)


# ---------------------------------------------------------------- spectral norm

def power_iteration(matrix: np.ndarray, u: np.ndarray, iters: int | None) -> tuple[np.ndarray, np.ndarray, float]:
    """Run power iteration on ``matrix`` (out × rest) starting from ``u``.

    ``iters=None`` iterates until the left singular vector stops moving.
    Returns ``(u, v, sigma)``.
    """
    u = _unit(u)
    v = _unit(matrix.T @ u)
    count = CONVERGE_MAX_ITERS if iters is None else iters
    for _ in range(count):
        v = _unit(matrix.T @ u)
        u_next = _unit(matrix @ v)
        # converge on the singular vectors: sigma settles much earlier than they do
        moved = float(np.linalg.norm(u_next - u))
        u = u_next
        if iters is None and moved <= CONVERGE_TOL:
            break
    return u, v, float(u @ matrix @ v)


def spectral_normalize(weight: Tensor, u: np.ndarray, iters: int | None = 1) -> tuple[Tensor, np.ndarray]:
    """Divide ``weight`` by its power-iteration top singular value estimate.

    ``weight`` is viewed as (out_channels × everything else).  The estimate
    ``sigma = u^T W v`` stays differentiable through ``W`` while ``u`` and
    ``v`` are treated as constants.  Returns the normalized weight and the
    updated ``u`` that the caller should persist.
    """
    shape = weight.shape
    if weight.ndim < 2:
        raise ShapeError(f"spectral_normalize needs a matrix, got shape {shape}")
    mat = ad.reshape(weight, (shape[0], -1))
    u_new, v, sigma = power_iteration(mat.data.astype(np.float64), u.astype(np.float64), iters)
    if not np.isfinite(sigma) or abs(sigma) < 1e-8:
        warnings.warn("spectral_normalize: weight has (near) zero spectral norm; clamping", RuntimeWarning)
        return ad.div(weight, 1e-8), u_new.astype(u.dtype)
    uc = ad.constant(u_new.reshape(1, -1), like=weight)
    vc = ad.constant(v.reshape(1, -1), like=weight)
    sigma_t = ad.sum(ad.mul(ad.matmul(uc, mat), vc))
    return ad.div(weight, sigma_t), u_new.astype(u.dtype)


class _SpectralMixin:
    """Shared spectral-norm handling for linear and conv layers.

    One power-iteration round per training-mode forward (``u`` persisted);
    eval mode runs to convergence without touching the stored ``u``.
    """

    spectral: bool = False

    def _init_spectral(self, rows: int, rng: np.random.Generator) -> None:
        if self.spectral:
            self.register_buffer("u", _unit(rng.normal(size=rows)).astype(ad.get_default_dtype()))

    def effective_weight(self, weight: Tensor, training: bool | None = None) -> Tensor:
        if not self.spectral:
            return weight
        training = self.training if training is None else training
        if training:
            w, u = spectral_normalize(weight, self._buffers["u"], iters=1)
            self._buffers["u"] = u
            return w
        # warm start from the last converged vector; the stored u stays untouched
        start = getattr(self, "_u_eval", None)
        if start is None or start.shape != self._buffers["u"].shape:
            start = self._buffers["u"]
        w, self._u_eval = spectral_normalize(weight, start, iters=None)
        return w


class Linear(Module, _SpectralMixin):
    """``x @ W + b`` with W stored as (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                 spectral: bool = False):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _param(_uniform(rng, (in_dim, out_dim), in_dim))
        self.bias = _param(_uniform(rng, (out_dim,), in_dim)) if bias else None
        self.spectral = spectral
        # power iteration on W^T (out × in)
        self._init_spectral(out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear expects last dim {self.in_dim}, got input {x.shape}")
        w = self.weight
        if self.spectral:
            w = ad.transpose(self.effective_weight(ad.transpose(w)))
        out = ad.matmul(x, w)
        return ad.add(out, self.bias) if self.bias is not None else out

    def normalized_matrix(self) -> np.ndarray:
        with ad.no_grad():
            w = self.effective_weight(ad.transpose(self.weight), training=False) if self.spectral \
                else ad.transpose(self.weight)
        return w.data


class Conv2d(Module, _SpectralMixin):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = True, spectral: bool = False, init_std: float | None = 0.02):
        super().__init__()
        self.stride, self.padding = stride, padding
        # init_std=None: He initialization for ReLU stacks
        std = np.sqrt(2.0 / (in_ch * kernel * kernel)) if init_std is None else init_std
        self.weight = _param(rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)))
        self.bias = _param(np.zeros(out_ch)) if bias else None
        self.spectral = spectral
        self._init_spectral(out_ch, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.effective_weight(self.weight), self.bias, self.stride, self.padding)

    def normalized_matrix(self) -> np.ndarray:
        with ad.no_grad():
            w = self.effective_weight(self.weight, training=False)
        return w.data.reshape(w.shape[0], -1)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = _param(rng.normal(0.0, 0.02, size=(in_ch, out_ch, kernel, kernel)))
        self.bias = _param(np.zeros(out_ch)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = _param(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)))

    def lookup(self, ids: np.ndarray) -> Tensor:
        return ad.take_rows(self.weight, ids)

    def soft(self, simplex: Tensor) -> Tensor:
        """Soft-one-hot (…, V) times the embedding matrix; exact for hard one-hots."""
        return ad.matmul(simplex, self.weight)


class BatchNorm(Module):
    """Per-channel normalization over (N,) or (N, H, W) for (N, C) / (N, C, H, W) inputs."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = _param(np.ones(num_features))
        self.beta = _param(np.zeros(num_features))
        dtype = ad.get_default_dtype()
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            axes, bshape = (0,), (1, -1)
        elif x.ndim == 4:
            axes, bshape = (0, 2, 3), (1, -1, 1, 1)
        else:
            raise ShapeError(f"BatchNorm expects 2-D or 4-D input, got {x.shape}")
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("BatchNorm in training mode needs a batch of at least 2")
            mu = ad.mean(x, axis=axes, keepdims=True)
            centered = ad.sub(x, mu)
            var = ad.mean(ad.mul(centered, centered), axis=axes, keepdims=True)
            normed = ad.mul(centered, ad.pow(ad.add(var, self.eps), -0.5))
            m = self.momentum
            n = int(np.prod([x.shape[a] for a in axes]))
            unbiased = var.data.reshape(-1) * n / max(n - 1, 1)
            self._buffers["running_mean"] = ((1 - m) * self._buffers["running_mean"]
                                             + m * mu.data.reshape(-1)).astype(x.dtype)
            self._buffers["running_var"] = ((1 - m) * self._buffers["running_var"]
                                            + m * unbiased).astype(x.dtype)
        else:
            mu = ad.constant(self._buffers["running_mean"].reshape(bshape), like=x)
            inv = ad.constant((self._buffers["running_var"] + self.eps).reshape(bshape) ** -0.5, like=x)
            normed = ad.mul(ad.sub(x, mu), inv)
        return ad.add(ad.mul(normed, ad.reshape(self.gamma, bshape)), ad.reshape(self.beta, bshape))


def batch_norm(x: Tensor, params: BatchNorm, training: bool) -> Tensor:
    """Functional form: run ``params`` in the requested mode without changing its flag."""
    old = params.training
    params.training = training
    try:
        return params(x)
    finally:
        params.training = old


# ---------------------------------------------------------------- recurrent

@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError(f"LstmState: hidden {self.hidden.shape} != cell {self.cell.shape}")


class LSTMCell(Module):
    """Single-layer LSTM cell, gate order (input, forget, candidate, output)."""

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim, self.hidden_dim = in_dim, hidden_dim
        self.weight_ih = _param(_uniform(rng, (in_dim, 4 * hidden_dim), hidden_dim))
        self.weight_hh = _param(_uniform(rng, (hidden_dim, 4 * hidden_dim), hidden_dim))
        self.bias = _param(_uniform(rng, (4 * hidden_dim,), hidden_dim))

    def zero_state(self, batch: int, like: Tensor | None = None) -> LstmState:
        dtype = like.dtype if like is not None else ad.get_default_dtype()
        z = np.zeros((batch, self.hidden_dim), dtype=dtype)
        return LstmState(Tensor(z, dtype=dtype), Tensor(z, dtype=dtype))

    def project_inputs(self, x: Tensor) -> Tensor:
        """Input contribution ``x @ W_ih + b`` for any leading shape."""
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"LSTM input dim {x.shape[-1]} != {self.in_dim}")
        return ad.add(ad.matmul(x, self.weight_ih), self.bias)

    def step(self, x: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
        return self.step_projected(self.project_inputs(x), state)

    def step_projected(self, xw: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
        if xw.shape[0] != state.hidden.shape[0]:
            raise ShapeError(f"LSTM batch mismatch: input {xw.shape} vs state {state.hidden.shape}")
        h = self.hidden_dim
        gates = ad.add(xw, ad.matmul(state.hidden, self.weight_hh))
        i = ad.sigmoid(gates[:, :h])
        f = ad.sigmoid(gates[:, h:2 * h])
        g = ad.tanh(gates[:, 2 * h:3 * h])
        o = ad.sigmoid(gates[:, 3 * h:])
        cell = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
        hidden = ad.mul(o, ad.tanh(cell))
        return hidden, LstmState(hidden, cell)

    def run(self, seq: Tensor, state: LstmState | None = None, reverse: bool = False) -> LstmState:
        """Consume a (B, T, in) sequence and return the final state."""
        batch, steps = seq.shape[0], seq.shape[1]
        state = state or self.zero_state(batch, like=seq)
        xw = self.project_inputs(seq)
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        for t in order:
            _, state = self.step_projected(xw[:, t, :], state)
        return state


def lstm_step(x: Tensor, state: LstmState, params: LSTMCell) -> tuple[Tensor, LstmState]:
    return params.step(x, state)


class BiLSTMEncoder(Module):
    """Forward and backward LSTMs over a sequence; output is [h_fwd_final, h_bwd_final]."""

    def __init__(self, in_dim: int, hidden_dim: int, seq_len: int, rng: np.random.Generator):
        super().__init__()
        self.seq_len = seq_len
        self.hidden_dim = hidden_dim
        self.forward_cell = LSTMCell(in_dim, hidden_dim, rng)
        self.backward_cell = LSTMCell(in_dim, hidden_dim, rng)

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden_dim

    def __call__(self, seq: Tensor) -> Tensor:
        if seq.ndim != 3 or seq.shape[1] != self.seq_len:
            raise ShapeError(f"BiLSTM expects (B, {self.seq_len}, D) input, got {seq.shape}")
        fwd = self.forward_cell.run(seq)
        bwd = self.backward_cell.run(seq, reverse=True)
        return ad.concat([fwd.hidden, bwd.hidden], axis=1)


def bilstm_encode(seq: Tensor, params: BiLSTMEncoder) -> Tensor:
    return params(seq)
