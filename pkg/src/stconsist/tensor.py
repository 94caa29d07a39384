"""Dense tensors with a small tape-style reverse-mode autodiff.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to per-parent gradients.  The graph is
rebuilt for every training step; :func:`backward` walks it once in reverse
topological order.

Shapes never broadcast, except for the bias add inside :func:`conv2d`.
Scalars (loss values) are rank-0 tensors.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "tensor",
    "precision",
    "set_precision",
    "default_dtype",
    "topological_order",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "absolute",
    "relu",
    "total",
    "softmax_channels",
    "log_softmax_channels",
    "pick_channels",
    "conv2d",
    "linear_map",
    "take",
]

_DTYPE = np.float32
DEBUG = os.environ.get("STCONSIST_DEBUG", "") not in ("", "0")


def default_dtype():
    return _DTYPE


def set_precision(bits: int) -> None:
    """Switch the global float width: 32 for training, 64 for verification."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    prev = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = prev


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "parents", "_backward", "grad")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Backward | None = None,
    ):
        if data.ndim > 4:
            raise DimensionError(f"rank {data.ndim} exceeds 4")
        if DEBUG and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite output from {op}")
        self.data = data
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Make a leaf tensor, cast to the current default float width."""
    arr = np.array(data, dtype=dtype or _DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn: Backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op, parents=parents if needs else (),
                  backward_fn=fn if needs else None)


def _same_shape(a: Tensor, b, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
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
        for p in reversed(node.parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar ``root`` with respect to every trainable leaf.

    Leaves also get their ``.grad`` attribute set (overwritten, not summed
    across calls).
    """
    if root.data.ndim != 0:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.data.dtype)}
    out: dict[Tensor, np.ndarray] = {}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g
                out[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a constant ndarray of the same shape."""
    if not isinstance(b, Tensor):
        w = np.asarray(b, dtype=a.data.dtype)
        _same_shape(a, w, "mul")
        return _node(a.data * w, "mul_const", (a,), lambda g: (g * w,))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * a.data.dtype.type(s), "scale", (a,),
                 lambda g: (g * g.dtype.type(s),))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _node(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.maximum(a.data, 0), "relu", (a,), lambda g: (g * mask,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a rank-0 tensor."""
    shape, dtype = a.shape, a.data.dtype
    return _node(np.asarray(a.data.sum(dtype=dtype)), "sum", (a,),
                 lambda g: (np.full(shape, g, dtype=dtype),))


# --------------------------------------------------------------------------
# channel ops (last axis)


def softmax_channels(a: Tensor) -> Tensor:
    if a.shape[-1] < 2:
        raise ContractError("softmax needs at least 2 channels")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, "softmax", (a,), fn)


def log_softmax_channels(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, "log_softmax", (a,), fn)


def pick_channels(a: Tensor, index: np.ndarray) -> Tensor:
    """out[...] = a[..., index[...]]; ``index`` is integer and constant."""
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise DimensionError(f"pick: index {index.shape} vs {a.shape}")
    idx = index[..., None].astype(np.intp)
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]
    shape, dtype = a.shape, a.data.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _node(out, "pick", (a,), fn)


def take(a: Tensor, i: int) -> Tensor:
    """Slice ``a[i]`` along the leading axis."""
    shape, dtype = a.shape, a.data.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[i] = g
        return (full,)

    return _node(a.data[i], "take", (a,), fn)


# --------------------------------------------------------------------------
# convolution


def _pad_flat(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad NxHxWxC and flatten rows, with slack so every shifted window fits."""
    n, h, w, c = x.shape
    wp = w + 2 * pw
    flat = np.zeros((n, (h + 2 * ph) * wp + 2 * pw, c), dtype=x.dtype)
    flat[:, :(h + 2 * ph) * wp].reshape(n, h + 2 * ph, wp, c)[:, ph:ph + h, pw:pw + w] = x
    return flat


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 'same' convolution with zero padding.

    ``x`` is HxWxCin or NxHxWxCin, ``kernel`` is khxkwxCinxCout with odd
    extents, ``bias`` has Cout entries.

    The padded image is flattened row-major so that each kernel tap is one
    contiguous window; output is computed on an HxW' grid (W' = padded width)
    and the wrap-around columns are dropped.
    """
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be rank 3 or 4, got {x.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d kernel must be rank 4, got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")

    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n, h, w, _ = xd.shape
    kd = kernel.data
    dtype = xd.dtype

    if kh == 1 and kw == 1:
        x2 = xd.reshape(-1, cin)
        k2 = kd.reshape(cin, cout)
        out = (x2 @ k2 + bias.data).reshape(n, h, w, cout)

        def fn(g):
            g2 = g.reshape(-1, cout)
            gk = (x2.T @ g2).reshape(kd.shape) if kernel.requires_grad else None
            gb = g2.sum(axis=0) if bias.requires_grad else None
            gx = (g2 @ k2.T).reshape(xd.shape) if x.requires_grad else None
            if gx is not None and not batched:
                gx = gx[0]
            return gx, gk, gb

        return _node(out if batched else out[0], "conv2d", (x, kernel, bias), fn)

    ph, pw = kh // 2, kw // 2
    wp = w + 2 * pw
    span = h * wp
    xp = _pad_flat(xd, ph, pw)
    taps = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
    acc = np.zeros((n, span, cout), dtype=dtype)
    for i, j, off in taps:
        acc += xp[:, off:off + span] @ kd[i, j]
    out = acc.reshape(n, h, wp, cout)[:, :, :w] + bias.data

    def fn(g):
        gf = np.zeros((n, h, wp, cout), dtype=dtype)
        gf[:, :, :w] = g.reshape(n, h, w, cout)
        gf = gf.reshape(n, span, cout)
        gk = gx = None
        if kernel.requires_grad:
            gk = np.empty(kd.shape, dtype=dtype)
            for i, j, off in taps:
                gk[i, j] = (xp[:, off:off + span].transpose(0, 2, 1) @ gf).sum(axis=0)
        gb = gf.sum(axis=(0, 1)) if bias.requires_grad else None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i, j, off in taps:
                gp[:, off:off + span] += gf @ kd[i, j].T
            gx = gp[:, :(h + 2 * ph) * wp].reshape(n, h + 2 * ph, wp, cin)[:, ph:ph + h, pw:pw + w]
            gx = gx if batched else gx[0]
        return gx, gk, gb

    return _node(out if batched else out[0], "conv2d", (x, kernel, bias), fn)


# --------------------------------------------------------------------------
# fixed linear maps (warping)


def linear_map(x: Tensor, matrix) -> Tensor:
    """Apply a constant (sparse) matrix over the pixels of an HxWxC tensor.

    ``matrix`` has shape (H*W, H*W); channels are mapped independently.
    """
    h, w, c = x.shape
    if matrix.shape != (h * w, h * w):
        raise DimensionError(f"linear_map: matrix {matrix.shape} vs {h}x{w} grid")
    flat = x.data.reshape(h * w, c)
    out = np.asarray(matrix @ flat, dtype=x.data.dtype).reshape(h, w, c)
    mt = matrix.T.tocsr()

    def fn(g):
        return (np.asarray(mt @ g.reshape(h * w, c), dtype=g.dtype).reshape(h, w, c),)

    return _node(out, "linear_map", (x,), fn)
