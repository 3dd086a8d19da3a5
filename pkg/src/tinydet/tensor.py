"""Dense rank-4 tensors with a reverse-mode differentiation tape.

Every value in the package is a ``Tensor`` with shape (n, c, h, w) stored
contiguously in row-major order.  Token matrices reuse the same type with
shape (n, heads, tokens, dim).  Operations record backward closures onto
the active :class:`Tape`; ``Tape.backward`` replays them in strict reverse
append order and accumulates into ``.grad``.

Only exact-shape elementwise arithmetic is supported (no general
broadcasting); the few broadcast-like primitives (bias add, batch tiling)
are explicit ops with explicit reduction rules in their backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from .rng import Rng

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# ---------------------------------------------------------------------------
# tape


class Tape:
    """Append-only record of one forward pass; append order is topological."""

    def __init__(self):
        self.nodes = []  # (output Tensor, backward closure)

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/dx into .grad of every reachable tensor.

        ``loss`` must be scalar-shaped (1,1,1,1).  Repeated calls without
        zeroing add up; the tape is cleared afterwards (one tape per
        forward/backward cycle).
        """
        if loss.shape != (1, 1, 1, 1):
            raise ValueError(f"loss must have shape (1,1,1,1), got {loss.shape}")
        if not self.nodes:
            raise ValueError("backward on an empty tape")
        _accum(loss, np.ones((1, 1, 1, 1), dtype=loss.data.dtype))
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)
        self.nodes.clear()


_tape_stack: list = []


def _push_tape(t: Tape) -> None:
    _tape_stack.append(t)


def _pop_tape(t: Tape) -> None:
    assert _tape_stack and _tape_stack[-1] is t
    _tape_stack.pop()


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _accum(t: "Tensor", g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)  # own the buffer
    else:
        t.grad += g


def _accum_own(t: "Tensor", g: np.ndarray) -> None:
    """Accumulate a freshly-allocated, unaliased gradient (no copy)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _record(out: "Tensor", fn) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append((out, fn))


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation (used by the FLOPs cross-check)

_mac_counter: Optional[list] = None


class count_macs:
    """Context manager that counts multiply-adds executed by conv/matmul."""

    def __enter__(self):
        global _mac_counter
        self._saved = _mac_counter
        _mac_counter = [0]
        return self

    def __exit__(self, *exc):
        global _mac_counter
        self.total = _mac_counter[0]
        _mac_counter = self._saved
        return False


def _add_macs(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[0] += n


# ---------------------------------------------------------------------------
# tensor type and creation


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if data.ndim != 4:
            raise ValueError(f"tensors are rank-4, got shape {data.shape}")
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() on non-scalar tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, rg={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass
class Zeros:
    pass


@dataclass
class Ones:
    pass


@dataclass
class Uniform:
    seed: int
    lo: float
    hi: float


@dataclass
class Normal:
    seed: int
    mean: float
    std: float


@dataclass
class Literal:
    values: Sequence[float]


def create(shape, init, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Create a tensor.  Seeded inits are bit-reproducible per (seed, shape)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 0 for s in shape):
        raise ValueError(f"invalid shape {shape}")
    n = 1
    for s in shape:
        n *= s
        if n > 2**62:
            raise OverflowError("extent product overflow")
    if isinstance(init, Zeros):
        data = np.zeros(shape, dtype=dtype)
    elif isinstance(init, Ones):
        data = np.ones(shape, dtype=dtype)
    elif isinstance(init, Uniform):
        data = Rng(init.seed).uniform(n, init.lo, init.hi).astype(dtype).reshape(shape)
    elif isinstance(init, Normal):
        data = Rng(init.seed).normal(n, init.mean, init.std).astype(dtype).reshape(shape)
    elif isinstance(init, Literal):
        vals = np.asarray(init.values, dtype=dtype).reshape(-1)
        if vals.size != n:
            raise ValueError(f"literal has {vals.size} values, shape needs {n}")
        data = vals.reshape(shape).copy()
    else:
        raise TypeError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def from_array(a: np.ndarray, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ascontiguousarray(a), requires_grad=requires_grad)


def _out(data: np.ndarray, *inputs: Tensor) -> Tensor:
    rg = _active_tape() is not None and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=rg)


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic (exact shapes only)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    out = _out(a.data + b.data, a, b)

    def bwd(g):
        _accum(a, g)
        _accum_own(b, g)  # g is the producer's dead buffer

    _record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    out = _out(a.data - b.data, a, b)

    def bwd(g):
        _accum_own(b, -g)
        _accum_own(a, g)

    _record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    out = _out(a.data * b.data, a, b)

    def bwd(g):
        _accum_own(a, g * b.data)
        _accum_own(b, g * a.data)

    _record(out, bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    out = _out(a.data / b.data, a, b)

    def bwd(g):
        _accum_own(a, g / b.data)
        _accum_own(b, -g * a.data / (b.data * b.data))

    _record(out, bwd)
    return out


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, s: float) -> Tensor:
    out = _out(a.data * s, a)

    def bwd(g):
        _accum_own(a, g * s)

    _record(out, bwd)
    return out


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = _out(a.data + s, a)

    def bwd(g):
        _accum_own(a, g)

    _record(out, bwd)
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to ``a``."""
    _check_same_shape(a, b)
    take_a = a.data >= b.data
    out = _out(np.where(take_a, a.data, b.data), a, b)

    def bwd(g):
        _accum_own(a, g * take_a)
        _accum_own(b, g * ~take_a)

    _record(out, bwd)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    take_a = a.data <= b.data
    out = _out(np.where(take_a, a.data, b.data), a, b)

    def bwd(g):
        _accum_own(a, g * take_a)
        _accum_own(b, g * ~take_a)

    _record(out, bwd)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _out(a.data * mask, a)

    def bwd(g):
        _accum_own(a, g * mask)

    _record(out, bwd)
    return out


def absolute(a: Tensor) -> Tensor:
    out = _out(np.abs(a.data), a)

    def bwd(g):
        _accum_own(a, g * np.sign(a.data))

    _record(out, bwd)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _out(s, a)

    def bwd(g):
        _accum_own(a, g * s * (1.0 - s))

    _record(out, bwd)
    return out


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _out(a.data * s, a)

    def bwd(g):
        _accum_own(a, g * s * (1.0 + a.data * (1.0 - s)))

    _record(out, bwd)
    return out


def gelu(a: Tensor) -> Tensor:
    # exact erf form: 0.5*x*(1 + erf(x/sqrt(2)))
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
    out = _out(x * cdf, a)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accum_own(a, g * (cdf + x * pdf))

    _record(out, bwd)
    return out


def softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _out(s, a)

    def bwd(g):
        _accum_own(a, (g - (g * s).sum(axis=-1, keepdims=True)) * s)

    _record(out, bwd)
    return out


def bce_with_logits(a: Tensor, targets: np.ndarray) -> Tensor:
    """Stable per-element binary cross-entropy; targets are constants."""
    x = a.data
    out_data = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    out = _out(out_data, a)

    def bwd(g):
        _accum_own(a, g * (1.0 / (1.0 + np.exp(-x)) - targets))

    _record(out, bwd)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _out(np.array(a.data.sum(), dtype=a.data.dtype).reshape(1, 1, 1, 1), a)

    def bwd(g):
        _accum_own(a, np.full_like(a.data, g.reshape(-1)[0]))

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# structure: concat / split / reshapes


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat of zero parts")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != n or p.shape[2:] != (h, w):
            raise ValueError(f"spatial mismatch in concat: {[p.shape for p in parts]}")
    out = _out(np.concatenate([p.data for p in parts], axis=1), *parts)
    sizes = [p.shape[1] for p in parts]

    def bwd(g):
        ofs = 0
        for p, c in zip(parts, sizes):
            _accum(p, g[:, ofs : ofs + c])
            ofs += c

    _record(out, bwd)
    return out


def split_channels(x: Tensor, sizes: Sequence[int]):
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    outs = []
    ofs = 0
    for c in sizes:
        lo = ofs
        part = _out(np.ascontiguousarray(x.data[:, lo : lo + c]), x)

        def bwd(g, lo=lo, c=c):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[:, lo : lo + c] += g

        _record(part, bwd)
        outs.append(part)
        ofs += c
    return outs


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate token matrices along the token axis (dim 2)."""
    n, c, _, d = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != n or p.shape[1] != c or p.shape[3] != d:
            raise ValueError("token-concat shape mismatch")
    out = _out(np.concatenate([p.data for p in parts], axis=2), *parts)
    sizes = [p.shape[2] for p in parts]

    def bwd(g):
        ofs = 0
        for p, t in zip(parts, sizes):
            _accum(p, g[:, :, ofs : ofs + t])
            ofs += t

    _record(out, bwd)
    return out


def split_lastdim(x: Tensor, sizes: Sequence[int]):
    if sum(sizes) != x.shape[3]:
        raise ValueError("split sizes do not sum to last extent")
    outs = []
    ofs = 0
    for c in sizes:
        lo = ofs
        part = _out(np.ascontiguousarray(x.data[..., lo : lo + c]), x)

        def bwd(g, lo=lo, c=c):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[..., lo : lo + c] += g

        _record(part, bwd)
        outs.append(part)
        ofs += c
    return outs


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    out = _out(np.concatenate([p.data for p in parts], axis=3), *parts)
    sizes = [p.shape[3] for p in parts]

    def bwd(g):
        ofs = 0
        for p, c in zip(parts, sizes):
            _accum(p, g[..., ofs : ofs + c])
            ofs += c

    _record(out, bwd)
    return out


def map_to_tokens(x: Tensor) -> Tensor:
    """(n,c,h,w) -> (n,1,h*w,c); tokens scan left-to-right, top-to-bottom."""
    n, c, h, w = x.shape
    out = _out(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n, 1, h * w, c), x)

    def bwd(g):
        _accum_own(x, np.ascontiguousarray(g.reshape(n, h, w, c).transpose(0, 3, 1, 2)))

    _record(out, bwd)
    return out


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    """(n,1,h*w,d) -> (n,d,h,w), inverse of map_to_tokens."""
    n, one, t, d = x.shape
    if one != 1 or t != h * w:
        raise ValueError(f"cannot reshape tokens {x.shape} to map {h}x{w}")
    out = _out(np.ascontiguousarray(x.data.reshape(n, h, w, d).transpose(0, 3, 1, 2)), x)

    def bwd(g):
        _accum_own(x, np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n, 1, t, d))

    _record(out, bwd)
    return out


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(n,1,T,d) -> (n,H,T,d/H)."""
    n, one, t, d = x.shape
    if one != 1 or d % n_heads:
        raise ValueError(f"cannot split {x.shape} into {n_heads} heads")
    dh = d // n_heads
    out = _out(np.ascontiguousarray(x.data.reshape(n, t, n_heads, dh).transpose(0, 2, 1, 3)), x)

    def bwd(g):
        _accum_own(x, np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(n, 1, t, d))

    _record(out, bwd)
    return out


def merge_heads(x: Tensor) -> Tensor:
    """(n,H,T,dh) -> (n,1,T,H*dh)."""
    n, nh, t, dh = x.shape
    out = _out(np.ascontiguousarray(x.data.transpose(0, 2, 1, 3)).reshape(n, 1, t, nh * dh), x)

    def bwd(g):
        _accum_own(x, np.ascontiguousarray(g.reshape(n, t, nh, dh).transpose(0, 2, 1, 3)))

    _record(out, bwd)
    return out


def transpose_last2(x: Tensor) -> Tensor:
    """Swap the trailing two dims: (n,c,r,k) -> (n,c,k,r)."""
    out = _out(np.ascontiguousarray(x.data.swapaxes(-1, -2)), x)

    def bwd(g):
        _accum_own(x, np.ascontiguousarray(g.swapaxes(-1, -2)))

    _record(out, bwd)
    return out


def broadcast_batch(x: Tensor, n: int) -> Tensor:
    """Tile a batch-1 tensor to batch n; backward sums over the batch."""
    if x.shape[0] != 1:
        raise ValueError("broadcast_batch requires batch extent 1")
    out = _out(np.ascontiguousarray(np.broadcast_to(x.data, (n,) + x.shape[1:])), x)

    def bwd(g):
        _accum_own(x, g.sum(axis=0, keepdims=True))

    _record(out, bwd)
    return out


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x + v with v shaped (1,1,1,d): bias add over rows/batch."""
    if v.shape != (1, 1, 1, x.shape[3]):
        raise ValueError(f"rowvec shape {v.shape} incompatible with {x.shape}")
    out = _out(x.data + v.data, x, v)

    def bwd(g):
        _accum_own(v, g.sum(axis=(0, 1, 2), keepdims=True))
        _accum_own(x, g)  # dead producer buffer

    _record(out, bwd)
    return out


def extract_patches(x: Tensor, patch: int) -> Tensor:
    """(n,c,h,w) -> (n,1,(h/p)*(w/p), c*p*p); pure re-indexing."""
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"extents {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    v = x.data.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    out = _out(np.ascontiguousarray(v).reshape(n, 1, gh * gw, c * patch * patch), x)

    def bwd(g):
        gv = g.reshape(n, gh, gw, c, patch, patch).transpose(0, 3, 1, 4, 2, 5)
        _accum_own(x, np.ascontiguousarray(gv).reshape(n, c, h, w))

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two dims.

    Batch extents must match, except that ``b`` may have batch extents
    (1,1) (shared weights); its gradient then sums over the batch.
    """
    an, ac, ar, ak = a.shape
    bn, bc, bk, bs = b.shape
    if ak != bk:
        raise ValueError(f"inner dims differ: {a.shape} @ {b.shape}")
    if (bn, bc) not in ((an, ac), (1, 1)):
        raise ValueError(f"batch dims differ: {a.shape} @ {b.shape}")
    shared_b = (bn, bc) == (1, 1) and (an, ac) != (1, 1)
    if shared_b:
        # fold the batch into a single 2-D product against the shared weights
        y = (a.data.reshape(-1, ak) @ b.data.reshape(ak, bs)).reshape(an, ac, ar, bs)
    else:
        y = np.matmul(a.data, b.data)
    out = _out(y, a, b)
    _add_macs(an * ac * ar * ak * bs)

    def bwd(g):
        if a.requires_grad:
            if shared_b:
                da = (g.reshape(-1, bs) @ b.data.reshape(ak, bs).T).reshape(a.shape)
            else:
                da = np.matmul(g, b.data.swapaxes(-1, -2))
            _accum_own(a, da)
        if b.requires_grad:
            if shared_b:
                db = a.data.reshape(-1, ak).T @ g.reshape(-1, bs)
                _accum_own(b, db.reshape(1, 1, ak, bs))
            else:
                _accum_own(b, np.matmul(a.data.swapaxes(-1, -2), g))

    _record(out, bwd)
    return out


def matmul2d(a: Tensor, b: Tensor) -> Tensor:
    """Plain (r,k)@(k,s) product on (1,1,r,k) tensors."""
    return matmul(a, b)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add_rowvec(y, b)
    return y


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    )
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    weight: (c_out, c_in, k, k); bias: (1, c_out, 1, 1) or None.
    Output extent: floor((h + 2*pad - k)/stride) + 1.
    """
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ValueError("non-square kernels unsupported")
    if c != cin:
        raise ValueError(f"channel mismatch: input {c}, weight expects {cin}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"padded extents {h}x{w} smaller than kernel {k}")
    if stride == 2 and (h % 2 or w % 2):
        raise ValueError(f"stride-2 conv needs even extents, got {h}x{w}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = weight.data.reshape(cout, cin * k * k)
    y = cols @ wmat.T
    _add_macs(n * oh * ow * cin * k * k * cout)
    y = y.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data
    out = _out(np.ascontiguousarray(y), x, weight, *( [bias] if bias is not None else [] ))

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        if bias is not None and bias.requires_grad:
            _accum_own(bias, g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1))
        if weight.requires_grad:
            _accum_own(weight, (gmat.T @ cols).reshape(cout, cin, k, k))
        if x.requires_grad:
            if k == 1 and stride == 1:
                dx = (gmat @ wmat).reshape(n, oh, ow, cin).transpose(0, 3, 1, 2)
                _accum_own(x, np.ascontiguousarray(dx))
            elif stride == 1:
                # dx is a full correlation of g with channel-swapped, rotated kernels
                wrot = np.ascontiguousarray(weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                pad_b = k - 1 - padding
                gp = np.zeros((n, cout, oh + 2 * pad_b, ow + 2 * pad_b), dtype=g.dtype)
                gp[:, :, pad_b : pad_b + oh, pad_b : pad_b + ow] = g
                gcols = _im2col(gp, k, 1, h, w)
                dx = (gcols @ wrot.reshape(cin, cout * k * k).T).reshape(n, h, w, cin)
                _accum_own(x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))
            else:
                # strided col2im: scatter-add each kernel offset
                dcols = (wmat.T @ gmat.T).reshape(cin, k, k, n, oh, ow)
                dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for ki in range(k):
                    for kj in range(k):
                        dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dcols[
                            :, ki, kj
                        ].transpose(1, 0, 2, 3)
                if padding:
                    dxp = dxp[:, :, padding : padding + h, padding : padding + w]
                _accum_own(x, dxp)

    _record(out, bwd)
    return out


def conv_bn_silu(
    x: Tensor,
    weight: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    training: bool,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Fused conv (no bias) -> BatchNorm -> SiLU with one backward closure.

    Numerically equivalent to composing the three primitive ops; fusing
    them halves the tape traffic on the conv-heavy training path.
    """
    n, c, h, w = x.shape
    cout, cin, k, _ = weight.shape
    if c != cin:
        raise ValueError(f"channel mismatch: input {c}, weight expects {cin}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"padded extents {h}x{w} smaller than kernel {k}")
    if stride == 2 and (h % 2 or w % 2):
        raise ValueError(f"stride-2 conv needs even extents, got {h}x{w}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = weight.data.reshape(cout, cin * k * k)
    y1 = np.ascontiguousarray((cols @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))
    _add_macs(n * oh * ow * cin * k * k * cout)

    if training:
        mu = y1.mean(axis=(0, 2, 3), keepdims=True)
        var = np.maximum((y1 * y1).mean(axis=(0, 2, 3), keepdims=True) - mu * mu, 0.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(cout)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(cout)
    else:
        mu = running_mean.reshape(1, cout, 1, 1).astype(y1.dtype)
        var = running_var.reshape(1, cout, 1, 1).astype(y1.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (y1 - mu) * inv_std
    y2 = gamma.data * xhat + beta.data
    sig = 1.0 / (1.0 + np.exp(-y2))
    out = _out(y2 * sig, x, weight, gamma, beta)

    def bwd(g):
        dy2 = g * (sig * (1.0 + y2 * (1.0 - sig)))
        if gamma.requires_grad:
            _accum_own(gamma, (dy2 * xhat).sum(axis=(0, 2, 3), keepdims=True))
        if beta.requires_grad:
            _accum_own(beta, dy2.sum(axis=(0, 2, 3), keepdims=True))
        if not (x.requires_grad or weight.requires_grad):
            return
        if training:
            dxhat = dy2 * gamma.data
            dy1 = dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
            dy1 -= xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dy1 *= inv_std
        else:
            dy1 = dy2 * (gamma.data * inv_std)
        gmat = np.ascontiguousarray(dy1.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        if weight.requires_grad:
            _accum_own(weight, (gmat.T @ cols).reshape(cout, cin, k, k))
        if x.requires_grad:
            if k == 1 and stride == 1:
                dx = (gmat @ wmat).reshape(n, oh, ow, cin).transpose(0, 3, 1, 2)
                _accum_own(x, np.ascontiguousarray(dx))
            elif stride == 1:
                wrot = np.ascontiguousarray(weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                pad_b = k - 1 - padding
                gp = np.zeros((n, cout, oh + 2 * pad_b, ow + 2 * pad_b), dtype=dy1.dtype)
                gp[:, :, pad_b : pad_b + oh, pad_b : pad_b + ow] = dy1
                gcols = _im2col(gp, k, 1, h, w)
                dx = (gcols @ wrot.reshape(cin, cout * k * k).T).reshape(n, h, w, cin)
                _accum_own(x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))
            else:
                dcols = (wmat.T @ gmat.T).reshape(cin, k, k, n, oh, ow)
                dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dy1.dtype)
                for ki in range(k):
                    for kj in range(k):
                        dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dcols[
                            :, ki, kj
                        ].transpose(1, 0, 2, 3)
                if padding:
                    dxp = dxp[:, :, padding : padding + h, padding : padding + w]
                _accum_own(x, dxp)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# bilinear upsampling (half-pixel centers, edge clamped)

_upsample_cache: dict = {}


def _upsample_matrix(size: int, dtype) -> np.ndarray:
    """Row-interpolation matrix M (2s x s): dst row d samples src (d+0.5)/2 - 0.5."""
    key = (size, np.dtype(dtype).str)
    m = _upsample_cache.get(key)
    if m is None:
        m = np.zeros((2 * size, size), dtype=dtype)
        for d in range(2 * size):
            src = (d + 0.5) / 2.0 - 0.5
            src = min(max(src, 0.0), size - 1.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, size - 1)
            f = src - i0
            m[d, i0] += 1.0 - f
            m[d, i1] += f
        _upsample_cache[key] = m
    return m


def upsample_bilinear_x2(x: Tensor) -> Tensor:
    """Double both spatial extents with half-pixel-center bilinear sampling."""
    n, c, h, w = x.shape
    my = _upsample_matrix(h, x.data.dtype)
    mx = _upsample_matrix(w, x.data.dtype)
    out = _out(np.matmul(np.matmul(my, x.data), mx.T), x)

    def bwd(g):
        _accum_own(x, np.matmul(np.matmul(my.T, g), mx))

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# normalization


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    training: bool,
) -> Tensor:
    """Per-channel batch normalization over (n, h, w).

    Training uses biased batch statistics and updates the running buffers
    in place; inference reads the running buffers only.
    """
    n, c, h, w = x.shape
    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(x.data.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = _out(gamma.data * xhat + beta.data, x, gamma, beta)

    def bwd(g):
        if gamma.requires_grad:
            _accum_own(gamma, (g * xhat).sum(axis=(0, 2, 3), keepdims=True))
        if beta.requires_grad:
            _accum_own(beta, g.sum(axis=(0, 2, 3), keepdims=True))
        if x.requires_grad:
            if training:
                dxhat = g * gamma.data
                term = dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                term -= xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                _accum_own(x, inv_std * term)
            else:
                _accum_own(x, g * (gamma.data * inv_std))

    _record(out, bwd)
    return out


def layernorm_lastdim(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dim (per token); gamma/beta shaped (1,1,1,d)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = _out(gamma.data * xhat + beta.data, x, gamma, beta)

    def bwd(g):
        if gamma.requires_grad:
            _accum_own(gamma, (g * xhat).sum(axis=(0, 1, 2), keepdims=True))
        if beta.requires_grad:
            _accum_own(beta, g.sum(axis=(0, 1, 2), keepdims=True))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum_own(x, inv_std * term)

    _record(out, bwd)
    return out
