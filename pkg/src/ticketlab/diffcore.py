"""Small reverse-mode autodiff engine over numpy arrays.

Images are channels-last.  Every spatial op accepts either a single image
``[H, W, C]`` or a batch ``[N, H, W, C]``; the batch axis is carried through
untouched.  Parameters and activations are float32 by default; an op keeps the
dtype of its inputs, so feeding float64 tensors (as the finite-difference
harness does) runs the whole graph in 64-bit.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "global_avg_pool",
    "softmax_vec",
    "concat_channels",
    "split_channels",
    "upsample_nearest2x",
    "resize_bilinear",
    "weighted_sum",
    "activation",
    "relu",
    "gelu",
    "sigmoid",
    "l1_loss",
    "backward",
    "finite_diff_check",
]

_GELU_C = math.sqrt(2.0 / math.pi)


class GraphError(RuntimeError):
    """Raised on misuse of the compute graph (e.g. a second backward)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-d array node in the compute graph.

    ``grad`` is populated by :func:`backward` for every tensor with
    ``requires_grad`` reachable from the loss.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


# elementwise / reductions ---------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), bw, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _make(out, (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


# spatial ops ---------------------------------------------------------------

def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [H,W,C] or [N,H,W,C], got shape {x.shape}")


def _im2col(xb: np.ndarray, k: int, padding: int, stride: int) -> np.ndarray:
    """``[n, h, w, c]`` -> ``[n*ho*wo, k*k*c]`` patch matrix, (i, j, c) column order."""
    n, h, w, c = xb.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xb
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [n, h', w', c, k, k]
    win = win[:, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """2-D cross-correlation.  ``kernel`` is ``[k, k, Cin, Cout]``.

    ``padding`` defaults to ``k // 2`` (size-preserving at stride 1).
    """
    k, k2, cin, cout = kernel.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {kernel.shape}")
    if k not in (1, 3):
        raise ValueError(f"kernel size must be 1 or 3, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if padding is None:
        padding = k // 2
    xb, squeeze = _batched(x.data)
    n, h, w, c = xb.shape
    if c != cin:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, kernel expects {cin} "
            f"(kernel shape {kernel.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match Cout={cout}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {k} with padding {padding}")

    kmat = kernel.data.reshape(k * k * cin, cout)
    if k == 1 and padding == 0:
        xs = xb[:, ::stride, ::stride, :]
        cols = xs.reshape(-1, cin)
    else:
        cols = _im2col(xb, k, padding, stride)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    if squeeze:
        out = out[0]

    def bw(g):
        gb = g.reshape(-1, cout)
        dk = (cols.T @ gb).reshape(kernel.shape) if kernel.requires_grad or kernel._parents else None
        db = gb.sum(axis=0) if bias is not None else None
        dx = None
        if x.requires_grad or x._parents:
            if k == 1 and padding == 0:
                d = (gb @ kmat.T).reshape(n, ho, wo, cin)
                if stride == 1:
                    dx = d
                else:
                    dx = np.zeros((n, h, w, cin), dtype=g.dtype)
                    dx[:, ::stride, ::stride, :] = d
            elif stride == 1 and 2 * padding == k - 1:
                # size-preserving: input grad is a correlation with the flipped kernel
                kflip = np.ascontiguousarray(
                    kernel.data[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(k * k * cout, cin)
                dx = (_im2col(g if g.ndim == 4 else g[None], k, padding, 1) @ kflip
                      ).reshape(n, h, w, cin)
            else:
                dcols = (gb @ kmat.T).reshape(n, ho, wo, k, k, cin)
                dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, cin), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i: i + (ho - 1) * stride + 1: stride,
                            j: j + (wo - 1) * stride + 1: stride, :] += dcols[:, :, :, i, j, :]
                dx = dxp[:, padding: padding + h, padding: padding + w, :] if padding else dxp
            if squeeze:
                dx = dx[0]
        return (dx, dk, db) if bias is not None else (dx, dk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, parents, bw, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping them as size 1: ``[.., H, W, C] -> [.., 1, 1, C]``."""
    if x.data.ndim not in (3, 4):
        raise ValueError(f"expected [H,W,C] or [N,H,W,C], got shape {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    out = x.data.mean(axis=(-3, -2), keepdims=True, dtype=np.float64).astype(x.dtype)

    def bw(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return _make(out, (x,), bw, "global_avg_pool")


def softmax_vec(z: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    if z.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return _make(s, (z,), bw, "softmax")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=-1)

    def bw(g):
        return g[..., :ca], g[..., ca:]

    return _make(out, (a, b), bw, "concat")


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_channels`."""
    c = x.shape[-1]
    if not 0 <= at <= c:
        raise ValueError(f"split index {at} outside [0, {c}]")

    def part(lo, hi):
        def bw(g):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[..., lo:hi] = g
            return (full,)

        return _make(np.ascontiguousarray(x.data[..., lo:hi]), (x,), bw, "split")

    return part(0, at), part(at, c)


def upsample_nearest2x(x: Tensor) -> Tensor:
    xb, squeeze = _batched(x.data)
    out = np.repeat(np.repeat(xb, 2, axis=1), 2, axis=2)
    if squeeze:
        out = out[0]

    def bw(g):
        gb, _ = _batched(g)
        n, h2, w2, c = gb.shape
        d = gb.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
        return (d[0] if squeeze else d,)

    return _make(out, (x,), bw, "upsample2x")


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centre linear interpolation weights, shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize of the spatial axes (half-pixel centres, edge clamped)."""
    xb, squeeze = _batched(x.data)
    n, h, w, c = xb.shape
    if (h, w) == (height, width):
        return x
    ry = _bilinear_matrix(height, h).astype(x.dtype)
    rx = _bilinear_matrix(width, w).astype(x.dtype)
    out = np.einsum("ih,nhwc,jw->nijc", ry, xb, rx, optimize=True)
    if squeeze:
        out = out[0]

    def bw(g):
        gb, _ = _batched(g)
        d = np.einsum("ih,nijc,jw->nhwc", ry, gb, rx, optimize=True)
        return (d[0] if squeeze else d,)

    return _make(out, (x,), bw, "resize_bilinear")


def weighted_sum(weights: Tensor, components: Tensor) -> Tensor:
    """Sum of ``components[i]`` weighted by ``weights[..., i]``.

    ``weights`` is ``[N]`` or ``[B, N]`` (any singleton spatial axes are
    squeezed); ``components`` is ``[N, H, W, C]``.  Returns ``[H, W, C]`` or
    ``[B, H, W, C]``.
    """
    nc = components.shape[0]
    wshape = weights.shape
    wv = weights.data.reshape(-1, wshape[-1]) if weights.data.ndim > 1 else weights.data[None]
    if wv.shape[-1] != nc:
        raise ValueError(f"{wv.shape[-1]} weights for {nc} components")
    batched = weights.data.ndim > 1
    comp = components.data.reshape(nc, -1)
    out = (wv @ comp).reshape((wv.shape[0],) + components.shape[1:])
    if not batched:
        out = out[0]

    def bw(g):
        gb = g.reshape(wv.shape[0], -1)
        dw = (gb @ comp.T).reshape(wshape)
        dc = (wv.T @ gb).reshape(components.shape)
        return dw, dc

    return _make(out, (weights, components), bw, "weighted_sum")


# activations -----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)

    def bw(g):
        return (g * pos,)

    return _make(out, (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def bw(g):
        return (g * out * (1 - out),)

    return _make(out, (x,), bw, "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    d2 = d * d
    inner = _GELU_C * (d + 0.044715 * d2 * d)
    t = np.tanh(inner)
    out = (0.5 * d * (1 + t)).astype(x.dtype)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * dinner),)

    return _make(out, (x,), bw, "gelu")


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


def l1_loss(restored: Tensor, target) -> Tensor:
    """Mean absolute error over every element; subgradient 0 where equal."""
    target = _as_tensor(target, restored.dtype)
    if restored.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {restored.shape} vs {target.shape}")
    diff = restored.data - target.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=restored.dtype)

    def bw(g):
        s = (np.sign(diff) * (g / n)).astype(restored.dtype)
        return s, -s

    return _make(out, (restored, target), bw, "l1_loss")


# backward ---------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``requires_grad`` tensor.

    The graph is released afterwards; calling again on the same loss raises
    :class:`GraphError`.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph; run the forward pass again")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: accumulate across backward calls
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        node._backward = None
        node._parents = ()
    loss._consumed = True


# finite differences -----------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-3,
                      coords: Iterable[int] | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a tensor to a scalar tensor.  Everything is evaluated in float64.
    ``coords`` restricts the check to the given flat indices.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(base) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
