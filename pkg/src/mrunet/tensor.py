"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Only the operations the two segmentation networks need are provided. A
:class:`Tape` records every operation executed while it is active; calling
:func:`backward` on a scalar result walks the tape in reverse and
accumulates ``.grad`` on every leaf tensor that requires it.

Outside an active tape, operations run forward-only (inference mode).
"""

from __future__ import annotations

import itertools
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "custom_op",
    "conv2d",
    "max_pool2x2",
    "avg_pool2x2",
    "transposed_conv2x2",
    "relu",
    "concat_channels",
    "softmax_channels",
    "add",
    "mul",
    "tensor_sum",
]

_ids = itertools.count()
_active: List["Tape"] = []

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-d array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward = backward_fn


class Tape:
    """Ordered log of the operations executed while the tape is active.

    Used as a context manager::

        with Tape():
            loss = model_loss(...)
        backward(loss)
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        output.tape = self
        self.records.append(_Record(inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise GraphError("loss was not produced on this tape")
        grads = {loss.node_id: np.ones_like(loss.data)}
        leaves = {}
        for rec in reversed(self.records):
            g = grads.pop(rec.output.node_id, None)
            if g is None:
                continue
            input_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + ig
                else:
                    grads[inp.node_id] = ig
                if inp.tape is None:
                    leaves[inp.node_id] = inp
        for nid, leaf in leaves.items():
            g = grads[nid]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.records.clear()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise GraphError("loss is not on a tape; compute it inside `with Tape():`")
    loss.tape.backward(loss)


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    Recording happens only when a tape is active and some input needs grad.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _active:
        _active[-1].record(tuple(inputs), out, backward_fn)
    return out


def _check4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: Optional[int] = None) -> Tensor:
    """Stride-1 'same' convolution with zero padding (k in {1, 3})."""
    _check4d(x, "input")
    if weight.ndim != 4:
        raise ShapeError(f"weight must be 4-D (Cout, Cin, k, k), got {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if cin != c:
        raise ShapeError(f"channel mismatch: input has {c}, weight expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ShapeError(f"padding must be {pad} for a {k}x{k} kernel, got {padding}")

    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xd, k, h, w)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))

    def _backward(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, h, w, c, k, k)
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            for dy in range(k):
                for dx in range(k):
                    gxp[:, :, dy:dy + h, dx:dx + w] += dcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    return custom_op(out, (x, weight, bias), _backward)


def transposed_conv2x2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel (exact 2x upsampling).

    ``weight`` has shape (Cin, Cout, 2, 2). Every input pixel scatters
    ``value * kernel`` into its own disjoint 2x2 output block.
    """
    _check4d(x, "input")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"weight must have shape (Cin, Cout, 2, 2), got {weight.shape}")
    cin, cout = weight.shape[:2]
    if cin != c:
        raise ShapeError(f"channel mismatch: input has {c}, weight expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")

    xmat = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    wmat = weight.data.reshape(c, cout * 4)
    y = (xmat @ wmat).reshape(n, h, w, cout, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    out = out + bias.data[None, :, None, None]

    def _backward(g: np.ndarray):
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        # (N, Cout, H, 2, W, 2) -> (N*H*W, Cout*4) matching wmat's column order
        gm = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, cout * 4)
        gx = gw = None
        if weight.requires_grad:
            gw = (xmat.T @ gm).reshape(weight.shape)
        if x.requires_grad:
            gx = (gm @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return gx, gw, gb

    return custom_op(out, (x, weight, bias), _backward)


# ---------------------------------------------------------------------------
# pooling


def _blocks(x: Tensor) -> np.ndarray:
    _check4d(x, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 pooling needs even H and W, got {h}x{w}")
    # (N, C, H/2, W/2, 4) with the 4 block entries in row-major order
    return x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def _unblocks(b: np.ndarray) -> np.ndarray:
    n, c, h2, w2, _ = b.shape
    return b.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; ties route the gradient to the first row-major index."""
    b = _blocks(x)
    idx = np.argmax(b, axis=-1)[..., None]
    out = np.take_along_axis(b, idx, axis=-1)[..., 0]

    def _backward(g: np.ndarray):
        gb = np.zeros(b.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (_unblocks(gb),)

    return custom_op(out, (x,), _backward)


def avg_pool2x2(x: Tensor) -> Tensor:
    b = _blocks(x)
    out = b.mean(axis=-1)

    def _backward(g: np.ndarray):
        gb = np.broadcast_to((g * 0.25)[..., None], b.shape)
        return (_unblocks(gb),)

    return custom_op(out, (x,), _backward)


# ---------------------------------------------------------------------------
# elementwise and structural


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return custom_op(out, (x,), lambda g: (g * mask,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4d(a, "a")
    _check4d(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return custom_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1."""
    _check4d(x, "input")
    if x.shape[1] < 2:
        raise ShapeError(f"softmax over channels needs C >= 2, got {x.shape[1]}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return custom_op(s, (x,), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return custom_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
