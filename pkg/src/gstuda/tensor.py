"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives the translator and its losses need are provided. Binary
elementwise ops require identical shapes; the only broadcast allowed is a
python scalar against a tensor.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    """Array value plus the bookkeeping needed to backpropagate into it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None,
                 op: str = "leaf"):
        if dtype is None and not (isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f"):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0 and op == "leaf":
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def square(self) -> "Tensor":
        return square(self)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, _parents=parents if needs else (), _backward=backward if needs else None, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _operand(a: Tensor, b):
    """Arrays become constant tensors; python scalars pass through."""
    if isinstance(b, np.ndarray) and b.ndim > 0:
        return Tensor(b.astype(a.dtype, copy=False))
    return b


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    b = _operand(a, b)
    if not isinstance(b, Tensor):
        c = float(b)
        out = None

        def backward():
            _accumulate(a, out.grad)

        out = _node(a.data + a.dtype.type(c), (a,), backward, "add_scalar")
        return out
    _check_same(a, b, "add")
    out = None

    def backward():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out = _node(a.data + b.data, (a, b), backward, "add")
    return out


def neg(a: Tensor) -> Tensor:
    out = None

    def backward():
        _accumulate(a, -out.grad)

    out = _node(-a.data, (a,), backward, "neg")
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _operand(a, b)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    out = None

    def backward():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    out = _node(a.data - b.data, (a, b), backward, "sub")
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _operand(a, b)
    if not isinstance(b, Tensor):
        c = a.dtype.type(float(b))
        out = None

        def backward():
            _accumulate(a, out.grad * c)

        out = _node(a.data * c, (a,), backward, "mul_scalar")
        return out
    _check_same(a, b, "mul")
    out = None

    def backward():
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    out = _node(a.data * b.data, (a, b), backward, "mul")
    return out


def square(a: Tensor) -> Tensor:
    out = None

    def backward():
        _accumulate(a, 2 * a.data * out.grad)

    out = _node(a.data * a.data, (a,), backward, "square")
    return out


def exp(a: Tensor) -> Tensor:
    out = None

    def backward():
        _accumulate(a, out.data * out.grad)

    out = _node(np.exp(a.data), (a,), backward, "exp")
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero wherever the clip is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = None

    def backward():
        _accumulate(a, out.grad * inside)

    out = _node(np.clip(a.data, lo, hi), (a,), backward, "clamp")
    return out


def tsum(a: Tensor) -> Tensor:
    out = None

    def backward():
        _accumulate(a, np.broadcast_to(out.grad.reshape(()), a.shape))

    out = _node(np.asarray(a.data.sum(dtype=a.dtype)).reshape(()), (a,), backward, "sum")
    return out


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    pos = a.data > 0
    out = None

    def backward():
        _accumulate(a, out.grad * pos)

    out = _node(a.data * pos, (a,), backward, "relu")
    return out


def dropout(a: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval needs no rescale."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(a.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(a.dtype)
    out = None

    def backward():
        _accumulate(a, out.grad * scale)

    out = _node(a.data * scale, (a,), backward, "dropout")
    return out


# ---------------------------------------------------------------- spatial

def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. Accepts [C,H,W] or a leading batch axis [N,C,H,W]."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xd, squeeze = _batched(x.data)
    n, c_in, h, w = xd.shape
    if kernel.data.ndim != 4:
        raise ValueError(f"kernel must be [C_out,C_in,kh,kw], got {kernel.shape}")
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ValueError(f"conv2d: input has {c_in} channels, kernel expects {kc}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError("conv2d: kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError(
            f"conv2d: output extent not exact for H={h}, W={w}, k=({kh},{kw}), "
            f"stride={stride}, padding={padding}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [N, C_in, Ho, Wo, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c_in * kh * kw)
    wmat = kernel.data.reshape(c_out, -1)
    y = (cols @ wmat.T + bias.data).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    out = None

    def backward():
        g = out.grad if not squeeze else out.grad[None]
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        if kernel.requires_grad:
            _accumulate(kernel, (gmat.T @ cols).reshape(kernel.shape))
        if bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c_in, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            _accumulate(x, dx[0] if squeeze else dx)

    out = _node(y[0] if squeeze else y, (x, kernel, bias), backward, "conv2d")
    return out


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block on the last two axes."""
    if x.data.ndim < 2:
        raise ValueError("upsample needs at least 2 spatial axes")
    y = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    out = None

    def backward():
        g = out.grad
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1))
        _accumulate(x, g)

    out = _node(y, (x,), backward, "upsample2x")
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis (a then b); works for [C,H,W] and [N,C,H,W]."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (3, 4):
        raise ValueError(f"concat_channels: incompatible ranks {a.shape}, {b.shape}")
    axis = a.data.ndim - 3
    if a.shape[:axis] != b.shape[:axis] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    c1 = a.shape[axis]
    y = np.concatenate([a.data, b.data], axis=axis)
    out = None

    def backward():
        g = out.grad
        if axis == 0:
            _accumulate(a, g[:c1])
            _accumulate(b, g[c1:])
        else:
            _accumulate(a, g[:, :c1])
            _accumulate(b, g[:, c1:])

    out = _node(y, (a, b), backward, "concat")
    return out


# ---------------------------------------------------------------- autodiff

def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Gradients accumulate into leaves, so zero them between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    # interior grads are per-call scratch; leaves keep accumulating
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


def sgd_step(params: Mapping[str, Tensor], lr: float, grads: Mapping[str, np.ndarray] | None = None) -> None:
    """In-place p <- p - lr * g. Raises NonFiniteError before touching anything if a grad is bad."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            p.data -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad
