"""Neural building blocks on top of the tensor engine.

Layers follow a light convention: construction takes an ``np.random.Generator``
and a name prefix, ``parameters()`` returns the trainable leaves, and
``__call__`` maps tensors to tensors.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor, uniform_init

_ACTIVATIONS = {
    "sigmoid": T.sigmoid,
    "relu": T.relu,
    "tanh": T.tanh,
}


def activation(name: str):
    if name not in _ACTIVATIONS:
        raise ValueError(f"unknown activation '{name}'; known: {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[name]


class Linear:
    """Affine map on row vectors: x @ W + b."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, name: str):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = uniform_init(rng, (in_dim, out_dim), in_dim, f"{name}.W")
        self.b = uniform_init(rng, (out_dim,), in_dim, f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


class TwoLayerMLP:
    """act(W2 act(W1 x + b1) + b2): the message/update network shape."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden_dim: int,
                 out_dim: int, name: str, act: str = "sigmoid"):
        self.l1 = Linear(rng, in_dim, hidden_dim, f"{name}.l1")
        self.l2 = Linear(rng, hidden_dim, out_dim, f"{name}.l2")
        self.act = activation(act)

    def __call__(self, x: Tensor) -> Tensor:
        return self.act(self.l2(self.act(self.l1(x))))

    def parameters(self) -> list[Parameter]:
        return self.l1.parameters() + self.l2.parameters()


class LSTMCell:
    """Standard LSTM cell; gate order i, f, g, o."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden_dim: int, name: str):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.Wx = uniform_init(rng, (in_dim, 4 * hidden_dim), hidden_dim, f"{name}.Wx")
        self.Wh = uniform_init(rng, (hidden_dim, 4 * hidden_dim), hidden_dim, f"{name}.Wh")
        self.b = uniform_init(rng, (4 * hidden_dim,), hidden_dim, f"{name}.b")

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        z = x @ self.Wx + h @ self.Wh + self.b
        i, f, g, o = T.split(z, [self.hidden_dim] * 4, axis=1)
        i, f, o = T.sigmoid(i), T.sigmoid(f), T.sigmoid(o)
        g = T.tanh(g)
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, c_new

    def zero_state(self, rows: int) -> tuple[Tensor, Tensor]:
        zeros = np.zeros((rows, self.hidden_dim), dtype=T.default_dtype())
        return Tensor(zeros), Tensor(zeros.copy())

    def parameters(self) -> list[Parameter]:
        return [self.Wx, self.Wh, self.b]


class BatchNorm:
    """Per-channel normalization over rows.

    Training mode normalizes with batch statistics and updates running
    averages (momentum on the old value); eval mode uses the stored running
    statistics and is deterministic.
    """

    def __init__(self, rng: np.random.Generator, dim: int, name: str,
                 momentum: float = 0.9, eps: float = 1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(dim), f"{name}.gamma",
                               init_info={"distribution": "constant", "value": 1.0})
        self.beta = Parameter(np.zeros(dim), f"{name}.beta",
                              init_info={"distribution": "constant", "value": 0.0})
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"batchnorm expects (rows, {self.dim}), got {x.shape}")
        if training:
            mu = x.mean(axes=0, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axes=0, keepdims=True)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu.data.reshape(-1)
            self.running_var = m * self.running_var + (1 - m) * var.data.reshape(-1)
            norm = centered / T.sqrt(var + self.eps)
        else:
            dt = T.default_dtype()
            mu = Tensor(self.running_mean.astype(dt))
            sd = Tensor(np.sqrt(self.running_var + self.eps).astype(dt))
            norm = (x - mu) / sd
        return norm * self.gamma + self.beta

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


def conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Same-padding stride-1 cross-correlation.

    x: (B, H, W, C_in); kernels: (kh, kw, C_in, C_out) -> (B, H, W, C_out).
    """
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernels, got "
                         f"{x.shape} and {kernels.shape}")
    B, H, W, c_in = x.shape
    kh, kw, kc_in, c_out = kernels.shape
    if c_in != kc_in:
        raise ShapeError(f"conv2d channel mismatch: input {c_in} vs kernel {kc_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d needs odd kernel sides, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    wd = kernels.data
    out = np.zeros((B * H * W, c_out), dtype=x.data.dtype)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di:di + H, dj:dj + W, :].reshape(-1, c_in)
            out += patch @ wd[di, dj]
    out = out.reshape(B, H, W, c_out)

    def backward_fn(g):
        gm = g.reshape(-1, c_out)
        need_x = x.requires_grad
        need_w = kernels.requires_grad
        dw = np.zeros_like(wd) if need_w else None
        dxp = np.zeros_like(xp) if need_x else None
        for di in range(kh):
            for dj in range(kw):
                if need_w:
                    patch = xp[:, di:di + H, dj:dj + W, :].reshape(-1, c_in)
                    dw[di, dj] = patch.T @ gm
                if need_x:
                    dxp[:, di:di + H, dj:dj + W, :] += (gm @ wd[di, dj].T).reshape(B, H, W, c_in)
        dx = dxp[:, ph:ph + H, pw:pw + W, :] if need_x else None
        return (dx, dw)

    return Tensor.from_op(out, (x, kernels), backward_fn, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient routes to the first max per window."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects 4-D input, got {x.shape}")
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    h2, w2 = H // 2, W // 2
    windows = (x.data.reshape(B, h2, 2, w2, 2, C)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(B, h2, w2, C, 4))
    arg = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1).squeeze(-1)

    def backward_fn(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(B, h2, w2, C, 2, 2)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(B, H, W, C))
        return (gx,)

    return Tensor.from_op(out, (x,), backward_fn, "maxpool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, C)."""
    return x.mean(axes=(1, 2))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over a batch of integer labels."""
    labels = np.asarray(labels)
    B, n_classes = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} != ({B},)")
    m = logits.max(axes=1, keepdims=True)
    z = logits - m
    lse = T.log(T.exp(z).sum(axes=1, keepdims=True)) + m
    onehot = np.zeros((B, n_classes), dtype=T.default_dtype())
    onehot[np.arange(B), labels] = 1.0
    picked = (logits * Tensor(onehot)).sum(axes=1, keepdims=True)
    return (lse - picked).mean()


def softmax_probs(logits: Tensor) -> np.ndarray:
    """Row-wise softmax of logits, computed outside the graph."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def accuracy(logits_data: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits_data, axis=1) == labels))


def collect_parameters(*modules) -> list[Parameter]:
    """Flatten parameters of layers and validate that names are unique."""
    params: list[Parameter] = []
    for mod in modules:
        if mod is None:
            continue
        params.extend(mod.parameters())
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate parameter names: {dupes}")
    return params


def cast_parameters(params: Sequence[Parameter], dtype=None) -> None:
    """Cast parameter storage in place to the given (or current) dtype."""
    dt = np.dtype(dtype) if dtype is not None else np.dtype(T.default_dtype())
    for p in params:
        p.data = p.data.astype(dt.type)
        p.zero_grad()
