"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a small record graph (op name + parent tensors +
a backward closure); `backward` walks the graph once in reverse
topological order and accumulates gradients into the leaves.  Structured
ops treat the trailing axes as the operand and accept an optional
leading batch axis, so the same primitives serve single-sample and
batched evaluation.

All storage is float64.  Nothing here mutates a tensor that already
participates in a graph; parameter updates happen between steps, on
leaf `.data` arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's contract."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class Tensor:
    """A dense float64 array with an optional gradient slot.

    `parents` and `_backward` make each tensor an operation record in the
    value graph; leaves have no parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @classmethod
    def _from_op(cls, data, parents, op, backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def all_finite(self) -> bool:
        """Explicit NaN/Inf check; nothing in the core checks silently."""
        return bool(np.isfinite(self.data).all())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Convenience arithmetic used by loss plumbing.  Tensor operands must
    # match shapes exactly; Python scalars are folded into the closure.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return elementwise_add(self, other)
        return _scalar_shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return _scalar_scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return _scalar_scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return elementwise_add(self, _scalar_scale(other, -1.0))
        return _scalar_shift(self, -float(other))

    def __truediv__(self, other):
        return _scalar_scale(self, 1.0 / float(other))

    def sum(self) -> "Tensor":
        out_data = np.asarray(self.data.sum())
        shape = self.data.shape

        def bw():
            self.accumulate_grad(np.broadcast_to(node.grad, shape).copy())

        node = Tensor._from_op(out_data, (self,), "sum", bw)
        return node

    def mean(self) -> "Tensor":
        n = self.data.size
        out_data = np.asarray(self.data.mean())
        shape = self.data.shape

        def bw():
            g = node.grad
            self.accumulate_grad(np.broadcast_to(g / n, shape).copy())

        node = Tensor._from_op(out_data, (self,), "mean", bw)
        return node

    def abs(self) -> "Tensor":
        out_data = np.abs(self.data)

        def bw():
            self.accumulate_grad(node.grad * np.sign(self.data))

        node = Tensor._from_op(out_data, (self,), "abs", bw)
        return node

    def reshape(self, *shape) -> "Tensor":
        out_data = self.data.reshape(shape)
        old = self.data.shape

        def bw():
            self.accumulate_grad(node.grad.reshape(old))

        node = Tensor._from_op(out_data, (self,), "reshape", bw)
        return node

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"


@dataclass
class ValueGraph:
    """Operation records of one evaluation, leaves first (topological)."""

    nodes: list[Tensor]


def trace(root: Tensor) -> ValueGraph:
    """Topologically order every node that can influence `root`."""
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return ValueGraph(order)


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into every reachable
    tensor with `requires_grad`.  Unreachable tensors are untouched."""
    if loss.data.shape != ():
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    graph = trace(loss)
    loss.grad = np.asarray(1.0)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward()


def _scalar_scale(x: Tensor, c: float) -> Tensor:
    def bw():
        x.accumulate_grad(node.grad * c)

    node = Tensor._from_op(x.data * c, (x,), "scale", bw)
    return node


def _scalar_shift(x: Tensor, c: float) -> Tensor:
    def bw():
        x.accumulate_grad(node.grad)

    node = Tensor._from_op(x.data + c, (x,), "shift", bw)
    return node


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def bw():
        g = node.grad
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    node = Tensor._from_op(a.data + b.data, (a, b), "add", bw)
    return node


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")

    def bw():
        g = node.grad
        a.accumulate_grad(g * b.data)
        b.accumulate_grad(g * a.data)

    node = Tensor._from_op(a.data * b.data, (a, b), "mul", bw)
    return node


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def bw():
        x.accumulate_grad(node.grad * (x.data > 0.0))

    node = Tensor._from_op(out_data, (x,), "relu", bw)
    return node


def sigmoid(x: Tensor) -> Tensor:
    out_data = _sigmoid(x.data)

    def bw():
        x.accumulate_grad(node.grad * out_data * (1.0 - out_data))

    node = Tensor._from_op(out_data, (x,), "sigmoid", bw)
    return node


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(x: Tensor) -> Tensor:
    out_data = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0.0)

    def bw():
        x.accumulate_grad(node.grad * _sigmoid(x.data))

    node = Tensor._from_op(out_data, (x,), "softplus", bw)
    return node


def softmax(z: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if z.data.size == 0:
        raise ShapeError("softmax: empty input")
    if np.isnan(z.data).any():
        raise ValueError("softmax: NaN in input")
    m = z.data.max(axis=-1, keepdims=True)
    e = np.exp(z.data - m)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw():
        g = node.grad
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        z.accumulate_grad(out_data * (g - dot))

    node = Tensor._from_op(out_data, (z,), "softmax", bw)
    return node


def log_softmax(z: Tensor) -> Tensor:
    if np.isnan(z.data).any():
        raise ValueError("log_softmax: NaN in input")
    m = z.data.max(axis=-1, keepdims=True)
    shifted = z.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def bw():
        g = node.grad
        z.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    node = Tensor._from_op(out_data, (z,), "log_softmax", bw)
    return node


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: (..., C, H, W) -> (..., C)."""
    if x.data.ndim < 3:
        raise ShapeError(f"global_avg_pool: need (..., C, H, W), got {x.data.shape}")
    h, w = x.data.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool: empty spatial extent")
    out_data = x.data.mean(axis=(-2, -1))

    def bw():
        g = node.grad[..., None, None] / (h * w)
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    node = Tensor._from_op(out_data, (x,), "global_avg_pool", bw)
    return node


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """out[..., k] = sum_m x[..., m] * w[k, m]  (+ b[k])."""
    if w.data.ndim != 2:
        raise ShapeError(f"fully_connected: weight must be 2-D, got {w.data.shape}")
    if x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(
            f"fully_connected: input width {x.data.shape[-1]} != weight width "
            f"{w.data.shape[1]}"
        )
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"fully_connected: bias shape {b.data.shape} != ({w.data.shape[0]},)")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw():
        g = node.grad
        x.accumulate_grad(g @ w.data)
        if g.ndim == 1:
            w.accumulate_grad(np.outer(g, x.data))
        else:
            gw = np.einsum("...k,...m->km", g, x.data)
            w.accumulate_grad(gw)
        if b is not None:
            gb = g if g.ndim == 1 else g.reshape(-1, g.shape[-1]).sum(axis=0)
            b.accumulate_grad(gb)

    node = Tensor._from_op(out_data, parents, "fully_connected", bw)
    return node


def concat_columns(vectors: Sequence[Tensor]) -> Tensor:
    """Stack N conforming vectors (..., C) into a matrix (..., C, N)."""
    if not vectors:
        raise ShapeError("concat_columns: need at least one vector")
    shape0 = vectors[0].data.shape
    for v in vectors[1:]:
        if v.data.shape != shape0:
            raise ShapeError(
                f"concat_columns: shapes differ ({v.data.shape} vs {shape0})"
            )
    out_data = np.stack([v.data for v in vectors], axis=-1)

    def bw():
        g = node.grad
        for i, v in enumerate(vectors):
            v.accumulate_grad(g[..., i])

    node = Tensor._from_op(out_data, tuple(vectors), "concat_columns", bw)
    return node


def mix_columns(cols: Tensor, weights: Tensor) -> Tensor:
    """out[..., c] = sum_n cols[..., c, n] * weights[..., n]."""
    if cols.data.shape[-1] != weights.data.shape[-1]:
        raise ShapeError(
            f"mix_columns: {cols.data.shape[-1]} columns vs "
            f"{weights.data.shape[-1]} weights"
        )
    if cols.data.shape[:-2] != weights.data.shape[:-1]:
        raise ShapeError(
            f"mix_columns: batch dims {cols.data.shape[:-2]} vs "
            f"{weights.data.shape[:-1]}"
        )
    out_data = np.einsum("...cn,...n->...c", cols.data, weights.data)

    def bw():
        g = node.grad
        cols.accumulate_grad(np.einsum("...c,...n->...cn", g, weights.data))
        weights.accumulate_grad(np.einsum("...c,...cn->...n", g, cols.data))

    node = Tensor._from_op(out_data, (cols, weights), "mix_columns", bw)
    return node


def channelwise_scale(x: Tensor, s: Tensor) -> Tensor:
    """out[..., c, h, w] = x[..., c, h, w] * s[..., c]."""
    if x.data.ndim < 3 or x.data.shape[:-2] != s.data.shape:
        raise ShapeError(
            f"channelwise_scale: map {x.data.shape} vs scale {s.data.shape}"
        )
    out_data = x.data * s.data[..., None, None]

    def bw():
        g = node.grad
        x.accumulate_grad(g * s.data[..., None, None])
        s.accumulate_grad((g * x.data).sum(axis=(-2, -1)))

    node = Tensor._from_op(out_data, (x, s), "channelwise_scale", bw)
    return node


def conv2d(
    x: Tensor,
    k: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Direct 2-D convolution (cross-correlation), square odd kernels.

    x: (Cin, H, W) or (B, Cin, H, W); k: (Cout, Cin, kh, kw).
    Computed as a sum over kernel offsets of channel contractions on
    shifted slices; no im2col buffer.
    """
    if k.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {k.data.shape}")
    cout, cin, kh, kw = k.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got {x.data.shape}")
    if x.data.shape[-3] != cin:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[-3]} != kernel channels {cin}"
        )
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
    h, w = x.data.shape[-2:]
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: nonpositive output extent {oh}x{ow} for input {h}x{w}, "
            f"kernel {kh}, stride {stride}, pad {pad}"
        )

    x4 = x.data if batched else x.data[None]
    if pad:
        xp = np.pad(x4, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x4
    out = np.zeros((x4.shape[0], cout, oh, ow))
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride]
            out += np.einsum("oi,bihw->bohw", k.data[:, :, dy, dx], patch, optimize=True)
    if b is not None:
        out += b.data[None, :, None, None]
    out_data = out if batched else out[0]
    parents = (x, k) if b is None else (x, k, b)

    def bw():
        g = node.grad if batched else node.grad[None]
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k.data)
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[:, :, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride]
                gk[:, :, dy, dx] = np.einsum("bohw,bihw->oi", g, patch, optimize=True)
                gxp[:, :, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride] += (
                    np.einsum("oi,bohw->bihw", k.data[:, :, dy, dx], g, optimize=True)
                )
        k.accumulate_grad(gk)
        gx4 = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        x.accumulate_grad(gx4 if batched else gx4[0])
        if b is not None:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))

    node = Tensor._from_op(out_data, parents, "conv2d", bw)
    return node


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Narrow the channel axis of a feature map: (..., C, H, W) -> (..., stop-start, H, W)."""
    c = x.data.shape[-3]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for C={c}")
    out_data = x.data[..., start:stop, :, :]

    def bw():
        g = np.zeros_like(x.data)
        g[..., start:stop, :, :] = node.grad
        x.accumulate_grad(g)

    node = Tensor._from_op(out_data, (x,), "slice_channels", bw)
    return node


def gather_last(x: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one entry along the last axis: (..., K) + (...,) int -> (...)."""
    idx = np.asarray(indices)
    if idx.shape != x.data.shape[:-1]:
        raise ShapeError(
            f"gather_last: index shape {idx.shape} != {x.data.shape[:-1]}"
        )
    out_data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw():
        g = np.zeros_like(x.data)
        np.put_along_axis(g, idx[..., None], node.grad[..., None], axis=-1)
        x.accumulate_grad(g)

    node = Tensor._from_op(out_data, (x,), "gather_last", bw)
    return node


def gather_cell(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick one spatial cell per sample: (B, C, H, W) + (B,) + (B,) -> (B, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"gather_cell: need (B, C, H, W), got {x.data.shape}")
    bidx = np.arange(x.data.shape[0])
    out_data = x.data[bidx, :, rows, cols]

    def bw():
        g = np.zeros_like(x.data)
        g[bidx, :, rows, cols] = node.grad
        x.accumulate_grad(g)

    node = Tensor._from_op(out_data, (x,), "gather_cell", bw)
    return node


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, every coordinate.

    This is the test oracle for `backward`; it never touches the graph.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); the adapter/head rule."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)); keeps variance under ReLU.

    Used for the backbone convolutions, which stack deep without
    normalization layers.
    """
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def write_tensor(fh, arr: np.ndarray) -> None:
    """Serialize one array: u32 header length, JSON shape header, LE float64."""
    header = json.dumps({"shape": list(arr.shape)}).encode("utf-8")
    fh.write(len(header).to_bytes(4, "little"))
    fh.write(header)
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh) -> np.ndarray:
    """Inverse of `write_tensor`; raises ValueError on truncation."""
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError("tensor header truncated")
    hlen = int.from_bytes(raw, "little")
    header = fh.read(hlen)
    if len(header) != hlen:
        raise ValueError("tensor header truncated")
    shape = tuple(json.loads(header.decode("utf-8"))["shape"])
    n = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise ValueError("tensor payload truncated")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
