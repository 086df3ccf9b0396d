"""A small reverse-mode autodiff engine over numpy arrays, plus Adam.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient::

    with Tape() as tape:
        y = relu(conv2d(x, w, b))
        loss = sum_all(y)
    grads = backward(tape, loss)

Arrays are N x C x H x W; ``conv2d`` and the pooling ops also accept
C x H x W and return the same rank.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

_active: List["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c: float):
        return scale(self, c)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("output", "inputs", "vjp", "op")

    def __init__(self, output, inputs, vjp, op):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Optional[Tape]:
    return _active[-1] if _active else None


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str = "custom") -> Tensor:
    """Wrap a forward result and register its vector-Jacobian product.

    ``vjp(g)`` must return one cotangent (or ``None``) per input, shaped like it.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out.node = len(tape.records)
        tape.records.append(_Record(out, tuple(inputs), vjp, op))
    return out


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss; accumulates into ``.grad`` of leaf tensors.

    Returns a mapping from each reached leaf tensor to the gradient
    contributed by this call.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise RuntimeError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.node is None:
                leaves[key] = t
    out = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g
        out[t] = g
    return out


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def multiply_const(a, m: np.ndarray) -> Tensor:
    """Elementwise product with a constant (non-differentiable) array."""
    a = as_tensor(a)
    m = np.asarray(m, dtype=a.dtype)
    return custom_op(a.data * m, (a,), lambda g: (g * m,), "multiply_const")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return custom_op(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(dtype=np.float64))
    return custom_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),), "sum")


def square(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = tensors[0].data.ndim - 3
    sizes = [t.shape[axis] for t in tensors]
    rest = {t.shape[:axis] + t.shape[axis + 1:] for t in tensors}
    if len(rest) != 1:
        raise ValueError("concat_channels: non-channel dimensions differ")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(tensors)))

    return custom_op(out, tensors, vjp, "concat")


# -- spatial ops ---------------------------------------------------------------

def _batched(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def conv2d(x, w, b=None, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Cross-correlation with zero padding (default ``k // 2``)."""
    x, w = as_tensor(x), as_tensor(w)
    xd, squeeze = _batched(x.data)
    n, c, h, wd = xd.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ValueError(f"conv2d: input has {c} channels, weights {w.shape}")
    if k % 2 == 0:
        raise ValueError("conv2d: kernel size must be odd")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (co,):
            raise ValueError(f"conv2d: bias shape {b.shape}, expected ({co},)")
    p = k // 2 if padding is None else padding
    s = stride
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: output would be empty")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)
    wm = w.data.reshape(co, c * k * k)
    out = (wm @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        g2 = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(co, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + s * ho:s, dj:dj + s * wo:s] += gcols[:, di, dj].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return custom_op(out, inputs, vjp, "conv2d")


def avg_pool(x, k: int, stride: Optional[int] = None) -> Tensor:
    """Mean over k x k windows (no padding; trailing partial windows dropped)."""
    x = as_tensor(x)
    s = k if stride is None else stride
    xd, squeeze = _batched(x.data)
    n, c, h, w = xd.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError("avg_pool: window larger than input")
    if k == s:
        out = xd[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
    else:
        win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        out = win[:, :, :ho, :wo].mean(axis=(4, 5))
    out = out.astype(x.dtype)
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = (g[None] if squeeze else g) / (k * k)
        gx = np.zeros_like(xd)
        if k == s:
            gx[:, :, :ho * k, :wo * k] = np.broadcast_to(
                g4[:, :, :, None, :, None], (n, c, ho, k, wo, k)).reshape(n, c, ho * k, wo * k)
        else:
            for di in range(k):
                for dj in range(k):
                    gx[:, :, di:di + s * ho:s, dj:dj + s * wo:s] += g4
        return (gx[0] if squeeze else gx,)

    return custom_op(out, (x,), vjp, "avg_pool")


def upsample_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear-interpolation matrix with half-pixel alignment and edge clamping."""
    scale_ = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale_ - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m.astype(dtype)


def bilinear_upsample(x, factor: int = 2, size: Optional[Tuple[int, int]] = None) -> Tensor:
    x = as_tensor(x)
    xd, squeeze = _batched(x.data)
    h, w = xd.shape[2:]
    ho, wo = size if size is not None else (h * factor, w * factor)
    uh = upsample_matrix(h, ho, x.dtype)
    uw = upsample_matrix(w, wo, x.dtype)
    out = np.matmul(np.matmul(uh, xd), uw.T)
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = np.matmul(np.matmul(uh.T, g4), uw)
        return (gx[0] if squeeze else gx,)

    return custom_op(out, (x,), vjp, "upsample")


# -- optimizer -----------------------------------------------------------------

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 1e-4) -> None:
    """One in-place Adam update at step ``t`` (1-based), with L2 decay folded into the gradient."""
    g = grad + weight_decay * param if weight_decay else grad
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = np.zeros_like(p.data, dtype=np.float64)
            else:
                g = p.grad.astype(np.float64)
            adam_step(p.data, g, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
