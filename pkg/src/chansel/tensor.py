"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations needed by the pruning networks are provided: convolution,
per-channel scaling, batch normalization, ReLU, max pooling, global average
pooling, dense layers, softmax cross-entropy and a handful of elementwise
helpers. Every op builds a :class:`TapeNode` only when at least one input
requires a gradient, so frozen sub-graphs cost nothing on the way back.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf appears in a tensor."""


class TapeNode:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        # backward(grad_out) -> tuple of input grads (None where not needed)
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 node: Optional[TapeNode] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            where = f" in {name!r}" if name else (f" produced by {node.op}" if node else "")
            raise NonFiniteError(f"non-finite value{where}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad needs a single-element tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)

        order = _topological_order(self)
        grads = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            in_grads = t.node.backward(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig

    # elementwise sugar used by loss assembly
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in reversed(t.node.inputs):
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def apply_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``; record a tape node if any input needs grad."""
    if any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, node=TapeNode(op, inputs, backward))
    return Tensor(data)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return apply_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return apply_op("scale", a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    return apply_op("sum", np.asarray(a.data.sum()), (a,),
                    lambda g: (np.broadcast_to(g, a.shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- convolution


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``w[Cout,Cin,k,k]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernels, got {x.shape} and {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, k_in, kh, kw = w.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but kernels expect {k_in}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels are supported, got {kh}x{kw}")
    k = kh
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{wd} (pad {padding})")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {c_out} kernels")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # channel-major im2col: rows (c, i, j), columns (n, h', w')
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c_in, k, k, n, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c_in * k * k, n * ho * wo)
    wmat = w.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c_in, k, k, n, ho, wo)
            dxt = np.zeros((c_in, n) + xp.shape[2:], dtype=DTYPE)
            # fixed (i, j) accumulation order keeps results reproducible
            for i in range(k):
                for j in range(k):
                    dxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            dxp = dxt.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + wd])
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return apply_op("conv2d", out, inputs, backward)


def channel_scale(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply channel ``c`` of ``x[N,C,H,W]`` by ``weights[c]``."""
    if x.ndim != 4:
        raise ShapeError(f"channel_scale: expected 4-d input, got {x.shape}")
    if weights.shape != (x.shape[1],):
        raise ShapeError(f"channel_scale: {weights.shape[0] if weights.ndim else 0} weights "
                         f"for {x.shape[1]} channels")
    wb = weights.data[None, :, None, None]

    def backward(g):
        gx = g * wb if x.requires_grad else None
        gw = (g * x.data).sum(axis=(0, 2, 3)) if weights.requires_grad else None
        return gx, gw

    return apply_op("channel_scale", x.data * wb, (x, weights), backward)


# ---------------------------------------------------------------- normalization


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, update_stats: bool = True,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and, if ``update_stats`` is set,
    ``running_mean``/``running_var`` are updated in place. In eval mode the
    running statistics are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if n == 0:
        raise ShapeError("batchnorm2d: empty batch")
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm2d: parameters of size {gamma.shape[0]} for {c} channels")
    g4 = gamma.data[None, :, None, None]

    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]

        def backward(g):
            gx = None
            if x.requires_grad:
                dxhat = g * g4
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = inv[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]

        def backward(g):
            gx = g * g4 * inv[None, :, None, None] if x.requires_grad else None
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return gx, gg, gb

    out = xhat * g4 + beta.data[None, :, None, None]
    return apply_op("batchnorm2d", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- pooling


def maxpool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"maxpool2d: window {kernel} larger than input {h}x{w}")
    ho, wo = _conv_out(h, kernel, stride, 0), _conv_out(w, kernel, stride, 0)
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == idx, g, 0.0)
        return (gx,)

    return apply_op("maxpool2d", out, (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    """Average over spatial dims: ``[N,C,H,W] -> [N,C]``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool: expected 4-d input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return apply_op("global_avgpool", x.data.mean(axis=(2, 3)), (x,),
                    lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


# ---------------------------------------------------------------- dense / loss


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x[N,in] @ w[out,in].T + b[out]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"dense: bias {b.shape} for {w.shape[0]} outputs")
        out = out + b.data

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return apply_op("dense", out, (x, w, b) if b is not None else (x, w), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    if n == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape} labels for {n} rows")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: labels must be integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean())

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return apply_op("softmax_cross_entropy", loss, (logits,), backward)
