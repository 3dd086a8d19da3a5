"""Layer zoo: convolution blocks, norms, attention, MLP.

Layers own their parameters (registered into a ParamStore under a dotted
name prefix) and are plain callables over tensors.  Convolutional blocks
pair BatchNorm with SiLU; transformer blocks pair LayerNorm with GELU.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .rng import Rng


def _register(store: ParamStore, name: str, arr: np.ndarray, trainable: bool = True) -> T.Tensor:
    return store.add(name, arr, trainable=trainable)


class Conv2d:
    """Bare convolution, kernel 1 or 3; padding fixed so extents follow stride."""

    def __init__(self, store, rng: Rng, name: str, c_in: int, c_out: int, k: int, stride: int = 1, bias: bool = True, dtype=np.float64):
        if k not in (1, 3):
            raise ValueError(f"kernel {k} unsupported; use 1 or 3")
        self.stride = stride
        self.padding = 0 if k == 1 else 1
        fan_in = c_in * k * k
        bound = float(np.sqrt(6.0 / fan_in))
        w = rng.split(name + ".weight").uniform(c_out * fan_in, -bound, bound)
        self.weight = _register(store, name + ".weight", w.astype(dtype).reshape(c_out, c_in, k, k))
        self.bias = None
        if bias:
            self.bias = _register(store, name + ".bias", np.zeros((1, c_out, 1, 1), dtype=dtype))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d:
    def __init__(self, store, name: str, c: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.momentum = momentum
        self.eps = eps
        self.gamma = _register(store, name + ".gamma", np.ones((1, c, 1, 1), dtype=dtype))
        self.beta = _register(store, name + ".beta", np.zeros((1, c, 1, 1), dtype=dtype))
        # running stats are saved/loaded but never touched by the optimizer
        self.running_mean = _register(store, name + ".running_mean", np.zeros((1, c, 1, 1), dtype=dtype), trainable=False)
        self.running_var = _register(store, name + ".running_var", np.ones((1, c, 1, 1), dtype=dtype), trainable=False)

    def __call__(self, x: T.Tensor, training: bool) -> T.Tensor:
        c = self.gamma.shape[1]
        return T.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean.data.reshape(c),
            self.running_var.data.reshape(c),
            self.momentum,
            self.eps,
            training,
        )


class ConvBlock:
    """conv (bias-free, BatchNorm absorbs the shift) -> BatchNorm -> SiLU."""

    def __init__(self, store, rng, name, c_in, c_out, k, stride=1, dtype=np.float64):
        self.conv = Conv2d(store, rng, name + ".conv", c_in, c_out, k, stride=stride, bias=False, dtype=dtype)
        self.norm = BatchNorm2d(store, name + ".norm", c_out, dtype=dtype)

    def __call__(self, x: T.Tensor, training: bool) -> T.Tensor:
        nm = self.norm
        c = nm.gamma.shape[1]
        return T.conv_bn_silu(
            x,
            self.conv.weight,
            nm.gamma,
            nm.beta,
            nm.running_mean.data.reshape(c),
            nm.running_var.data.reshape(c),
            nm.momentum,
            nm.eps,
            training,
            stride=self.conv.stride,
            padding=self.conv.padding,
        )


class LayerNorm:
    def __init__(self, store, name: str, d: int, eps: float = 1e-5, dtype=np.float64):
        self.eps = eps
        self.gamma = _register(store, name + ".gamma", np.ones((1, 1, 1, d), dtype=dtype))
        self.beta = _register(store, name + ".beta", np.zeros((1, 1, 1, d), dtype=dtype))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layernorm_lastdim(x, self.gamma, self.beta, self.eps)


class Linear:
    def __init__(self, store, rng, name, d_in, d_out, bias: bool = True, dtype=np.float64):
        w = rng.split(name + ".weight").trunc_normal(d_in * d_out, std=0.02)
        self.weight = _register(store, name + ".weight", w.astype(dtype).reshape(1, 1, d_in, d_out))
        self.bias = None
        if bias:
            self.bias = _register(store, name + ".bias", np.zeros((1, 1, 1, d_out), dtype=dtype))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.linear(x, self.weight, self.bias)


class MultiHeadAttention:
    """Scaled dot-product attention over token matrices (n,1,T,d)."""

    def __init__(self, store, rng, name, d: int, n_heads: int, dtype=np.float64):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d // n_heads
        for proj in ("wq", "wk", "wv", "wo"):
            w = rng.split(f"{name}.{proj}").trunc_normal(d * d, std=0.02)
            setattr(self, proj, _register(store, f"{name}.{proj}", w.astype(dtype).reshape(1, 1, d, d)))

    def __call__(self, q_tokens: T.Tensor, kv_tokens: T.Tensor) -> T.Tensor:
        qh = T.split_heads(T.matmul(q_tokens, self.wq), self.n_heads)
        kh = T.split_heads(T.matmul(kv_tokens, self.wk), self.n_heads)
        vh = T.split_heads(T.matmul(kv_tokens, self.wv), self.n_heads)
        logits = T.scale(T.matmul(qh, T.transpose_last2(kh)), 1.0 / float(np.sqrt(self.d_head)))
        attn = T.softmax_lastdim(logits)
        out = T.merge_heads(T.matmul(attn, vh))
        return T.matmul(out, self.wo)


class MlpBlock:
    """Linear(d -> mult*d) -> activation -> Linear(mult*d -> d)."""

    def __init__(self, store, rng, name, d: int, mult: int = 4, act: str = "gelu", dtype=np.float64):
        self.fc1 = Linear(store, rng, name + ".fc1", d, mult * d, dtype=dtype)
        self.fc2 = Linear(store, rng, name + ".fc2", mult * d, d, dtype=dtype)
        if act not in ("gelu", "silu"):
            raise ValueError(f"unknown activation {act}")
        self.act = T.gelu if act == "gelu" else T.silu

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.fc2(self.act(self.fc1(x)))
