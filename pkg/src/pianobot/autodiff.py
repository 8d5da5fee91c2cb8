"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine in the micrograd style: every operation returns a
new :class:`Tensor` holding the forward value and a closure that propagates
adjoints to its inputs.  ``backward()`` walks the recorded graph once in
reverse topological order.  The primitive set is exactly what the 1-D U-Net
denoiser needs; nothing here knows about networks or diffusion.

All data is double precision so finite-difference gradient checks can run
at tight tolerances.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeMismatch",
    "Tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv1d",
    "conv1d_transposed",
    "group_norm",
    "silu",
    "concat",
    "narrow",
    "reshape",
    "pad_edge1d",
    "reduce_mean",
    "mse_loss",
    "grad_check",
    "save_arrays",
    "load_arrays",
]


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested primitive."""


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node in the autodiff graph: forward value + backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] = lambda: None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accum(self, g: np.ndarray) -> None:
        """Accumulate an adjoint into this node."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar output, visiting each node once."""
        if self.data.size != 1:
            raise ShapeMismatch(f"backward() needs a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._backward()

    # Small operator sugar; the named functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _node(data: np.ndarray, prev: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in prev)
    out._prev = prev
    return out


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _node(a.data + b.data, (a, b))

    def backward():
        a.accum(_unbroadcast(out.grad, a.shape))
        b.accum(_unbroadcast(out.grad, b.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _node(a.data - b.data, (a, b))

    def backward():
        a.accum(_unbroadcast(out.grad, a.shape))
        b.accum(_unbroadcast(-out.grad, b.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _node(a.data * b.data, (a, b))

    def backward():
        a.accum(_unbroadcast(out.grad * b.data, a.shape))
        b.accum(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b))

    def backward():
        ga = out.grad @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ out.grad
        a.accum(_unbroadcast(ga, a.shape))
        b.accum(_unbroadcast(gb, b.shape))

    out._backward = backward
    return out


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Read-only strided view (B, C, n, k) of sliding windows along the last axis."""
    b, c, length = x.shape
    n = (length - k) // stride + 1
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, n, k), (s0, s1, s2 * stride, s2), writeable=False
    )


def conv1d(x, w, bias=None, *, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the last axis: (B, Cin, L) * (Cout, Cin, K) -> (B, Cout, Lout)."""
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: x {x.shape}, w {w.shape}")
    k = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    if xp.shape[2] < k:
        raise ShapeMismatch(f"conv1d: padded length {xp.shape[2]} < kernel {k}")
    win = _windows(xp, k, stride)
    val = np.einsum("bcik,ock->boi", win, w.data)
    prev = (x, w)
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeMismatch(f"conv1d: bias {bias.shape} vs {w.shape[0]} channels")
        val = val + bias.data[:, None]
        prev = (x, w, bias)
    out = _node(val, prev)

    def backward():
        g = out.grad
        w.accum(np.einsum("boi,bcik->ock", g, win))
        if bias is not None:
            bias.accum(g.sum(axis=(0, 2)))
        # grad wrt x: correlate the stride-dilated adjoint with the flipped kernel
        n_out = g.shape[2]
        dil = np.zeros((g.shape[0], g.shape[1], (n_out - 1) * stride + 1))
        dil[:, :, ::stride] = g
        lp = xp.shape[2]
        tail = lp - k - (n_out - 1) * stride  # samples the forward pass never touched
        gd = np.pad(dil, ((0, 0), (0, 0), (k - 1, k - 1 + tail)))
        gwin = _windows(gd, k, 1)
        gxp = np.einsum("boji,oci->bcj", gwin, w.data[:, :, ::-1])
        x.accum(gxp[:, :, padding : padding + x.shape[2]])

    out._backward = backward
    return out


def conv1d_transposed(x, w, bias=None, *, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 1-D convolution: (B, Cin, L) * (Cin, Cout, K) -> (B, Cout, (L-1)*s + K - 2p)."""
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"conv1d_transposed: x {x.shape}, w {w.shape}")
    k = w.shape[2]
    l_in = x.shape[2]
    l_full = (l_in - 1) * stride + k
    if l_full - 2 * padding < 1:
        raise ShapeMismatch("conv1d_transposed: output length < 1")
    dil = np.zeros((x.shape[0], x.shape[1], (l_in - 1) * stride + 1))
    dil[:, :, ::stride] = x.data
    dp = np.pad(dil, ((0, 0), (0, 0), (k - 1, k - 1)))
    win = _windows(dp, k, 1)
    full = np.einsum("bcji,coi->boj", win, w.data[:, :, ::-1])
    val = full[:, :, padding : l_full - padding]
    prev = (x, w)
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (w.shape[1],):
            raise ShapeMismatch(f"conv1d_transposed: bias {bias.shape} vs {w.shape[1]} channels")
        val = val + bias.data[:, None]
        prev = (x, w, bias)
    out = _node(val, prev)

    def backward():
        g = out.grad
        gf = np.pad(g, ((0, 0), (0, 0), (padding, padding)))
        gwin = _windows(gf, k, stride)
        x.accum(np.einsum("boik,cok->bci", gwin, w.data))
        w.accum(np.einsum("bci,boik->cok", x.data, gwin))
        if bias is not None:
            bias.accum(g.sum(axis=(0, 2)))

    out._backward = backward
    return out


def group_norm(x, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (B, C, L) per sample over channel groups; no affine part."""
    x = _lift(x)
    if x.data.ndim != 3 or x.shape[1] % groups:
        raise ShapeMismatch(f"group_norm: shape {x.shape} with {groups} groups")
    b, c, length = x.shape
    r = x.data.reshape(b, groups, -1)
    mu = r.mean(axis=2, keepdims=True)
    var = r.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (r - mu) * inv
    out = _node(xhat.reshape(b, c, length), (x,))

    def backward():
        g = out.grad.reshape(b, groups, -1)
        gm = g.mean(axis=2, keepdims=True)
        gx = (g * xhat).mean(axis=2, keepdims=True)
        x.accum((inv * (g - gm - xhat * gx)).reshape(b, c, length))

    out._backward = backward
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = _lift(x)
    s = expit(x.data)
    out = _node(x.data * s, (x,))

    def backward():
        x.accum(out.grad * s * (1.0 + x.data * (1.0 - s)))

    out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]

    def backward():
        pieces = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
        for t, g in zip(tensors, pieces):
            t.accum(g)

    out._backward = backward
    return out


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = _lift(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeMismatch(f"narrow: [{start}, {start + length}) out of axis {axis} size {x.shape[axis]}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _node(x.data[idx], (x,))

    def backward():
        g = np.zeros_like(x.data)
        g[idx] = out.grad
        x.accum(g)

    out._backward = backward
    return out


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _lift(x)
    out = _node(x.data.reshape(shape), (x,))

    def backward():
        x.accum(out.grad.reshape(x.shape))

    out._backward = backward
    return out


def pad_edge1d(x, n: int) -> Tensor:
    """Right-pad the last axis by replicating the final sample n times."""
    x = _lift(x)
    if n == 0:
        return x
    last = x.data[..., -1:]
    out = _node(np.concatenate([x.data, np.repeat(last, n, axis=-1)], axis=-1), (x,))
    length = x.shape[-1]

    def backward():
        g = out.grad[..., :length].copy()
        g[..., -1] += out.grad[..., length:].sum(axis=-1)
        x.accum(g)

    out._backward = backward
    return out


def reduce_mean(x, axis: int | tuple[int, ...] | None = None) -> Tensor:
    x = _lift(x)
    out = _node(np.mean(x.data, axis=axis), (x,))
    count = x.data.size if axis is None else x.data.size // out.data.size

    def backward():
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        x.accum(np.broadcast_to(g, x.shape) / count)

    out._backward = backward
    return out


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return reduce_mean(mul(d, d))


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    fd_step: float = 1e-5,
    rel_tol: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare tape gradients of a scalar function against central differences.

    Returns the max relative error per parameter.  ``f`` must rebuild its
    graph on every call and be deterministic.  When a parameter is large,
    ``max_coords_per_param`` limits the check to a random coordinate subset.
    """
    loss = f()
    loss.backward()
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        gflat = grads[name].reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + fd_step
            f_plus = float(f().data)
            flat[i] = orig - fd_step
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * fd_step)
            ad = gflat[i]
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
            worst = max(worst, err)
        report[name] = worst
    return report


# --- parameter checkpoint format -------------------------------------------
#
# magic "PBCK" | u32 version | u32 count | entries sorted by name, each:
#   u16 name length | name utf-8 | u8 ndim | u32 dims... | f64 LE data
_MAGIC = b"PBCK"
_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in the flat little-endian checkpoint format."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_arrays`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        out[name] = arr.astype(np.float64)
    return out
