"""Define-by-run reverse-mode autodiff over numpy arrays.

Every operator records a closure mapping the output gradient to the
gradients of its inputs. ``Tensor.backward`` walks the recorded graph in
reverse topological order. Reductions accumulate in float64 and cast back
to the storage dtype.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import expit

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def max(self, axis=None, keepdims=False): return max_(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sigmoid(self): return sigmoid(self)
    def relu(self): return relu(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, backward, op) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    shape = tuple(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            unbroadcast(g * a.data, b.shape) if b.requires_grad else None), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log10(a: Tensor) -> Tensor:
    return mul(log(a), 1.0 / math.log(10.0))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def back(g):
        return (g * expit(x),)
    return _make(out, (a,), back, "softplus")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, axes, keepdims):
    if keepdims:
        return g
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return _make(out, (a,), lambda g: (np.broadcast_to(_expand(g, axes, keepdims), a.shape).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return _make(out, (a,),
                 lambda g: (np.broadcast_to(_expand(g, axes, keepdims) / n, a.shape).astype(a.dtype),), "mean")


def max_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum; tied maxima share the gradient equally."""
    axes = _norm_axis(axis, a.ndim)
    keep = np.max(a.data, axis=axes, keepdims=True)
    out = keep if keepdims else np.squeeze(keep, axis=axes)

    def back(g):
        mask = a.data == keep
        count = mask.sum(axis=axes, keepdims=True)
        return ((_expand(g, axes, keepdims) * mask / count).astype(a.dtype),)
    return _make(out, (a,), back, "max")


def softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)

    def back(g):
        inner = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)
        return (out * (g - inner),)
    return _make(out, (a,), back, "softmax")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        if b.ndim == 2:
            # weight-style operand: fold batch dims into one GEMM
            ga = g @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                ka, n = a.shape[-1], g.shape[-1]
                gb = a.data.reshape(-1, ka).T @ g.reshape(-1, n)
            return ga, gb
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), back, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


def layer_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Per-channel learnable scaling of the last axis."""
    if scale.shape != (x.shape[-1],):
        raise ShapeError(f"layer_scale: scale shape {scale.shape} != ({x.shape[-1]},)")
    return mul(x, scale)


def layer_norm(x: Tensor, axes, eps: float = 1e-8) -> Tensor:
    """Zero-mean unit-variance normalization over ``axes`` (no affine)."""
    axes = _norm_axis(axes, x.ndim)
    n = int(np.prod([x.shape[i] for i in axes]))
    mu = np.mean(x.data, axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv

    def back(g):
        gm = np.sum(g, axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype) / n
        gx = np.sum(g * xhat, axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype) / n
        return (inv * (g - gm - xhat * gx),)
    return _make(xhat, (x,), back, "layer_norm")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    """Slicing (basic or integer-array indexing)."""
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _make(np.array(out, copy=True), (a,), back, "slice")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} incompatible on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------- convolution

def conv1d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1, padding=(0, 0)) -> Tensor:
    """Channel-last 1-D convolution.

    x: (B, T, Cin); w: (K, Cin, Cout). ``padding`` is (left, right) zeros.
    """
    x, w = _pair(x, w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {w.shape}")
    if isinstance(padding, int):
        padding = (padding, padding)
    pl, pr = padding
    K, cin, cout = w.shape
    B = x.shape[0]
    xp = np.pad(x.data, ((0, 0), (pl, pr), (0, 0))) if (pl or pr) else x.data
    Tp = xp.shape[1]
    span = dilation * (K - 1) + 1
    if Tp < span:
        raise ShapeError(f"conv1d: padded length {Tp} shorter than kernel span {span}")
    t_out = (Tp - span) // stride + 1
    stop = stride * (t_out - 1) + 1
    cols = np.stack([xp[:, k * dilation:k * dilation + stop:stride, :] for k in range(K)], axis=2)
    cols2 = cols.reshape(B * t_out, K * cin)
    w2 = w.data.reshape(K * cin, cout)
    out = (cols2 @ w2).reshape(B, t_out, cout)

    def back(g):
        g2 = g.reshape(B * t_out, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (g2 @ w2.T).reshape(B, t_out, K, cin)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k * dilation:k * dilation + stop:stride, :] += gc[:, :, k, :]
            gx = gxp[:, pl:Tp - pr, :] if (pl or pr) else gxp
        return gx, gw
    return _make(out, (x, w), back, "conv1d")


def conv2d(x: Tensor, w: Tensor, padding=None) -> Tensor:
    """Channel-last stride-1 2-D convolution.

    x: (B, H, W, C); w: (kh, kw, C, O). ``padding`` defaults to "same" for
    odd kernels.
    """
    x, w = _pair(x, w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    kh, kw, cin, cout = w.shape
    ph, pw = padding if padding is not None else (kh // 2, kw // 2)
    B, H, W, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    ho, wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    cols = np.stack([xp[:, i:i + ho, j:j + wo, :] for i in range(kh) for j in range(kw)], axis=3)
    cols2 = cols.reshape(B * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ w2).reshape(B, ho, wo, cout)

    def back(g):
        g2 = g.reshape(B * ho * wo, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (g2 @ w2.T).reshape(B, ho, wo, kh * kw, cin)
            gxp = np.zeros_like(xp)
            for n, (i, j) in enumerate((i, j) for i in range(kh) for j in range(kw)):
                gxp[:, i:i + ho, j:j + wo, :] += gc[:, :, :, n, :]
            gx = gxp[:, ph:ph + H, pw:pw + W, :]
        return gx, gw
    return _make(out, (x, w), back, "conv2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling over (H, W) of a (B, H, W, C) tensor; trailing remainder dropped."""
    B, H, W, C = x.shape
    ho, wo = H // k, W // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: input {x.shape} smaller than pool size {k}")
    r = x.data[:, :ho * k, :wo * k, :].reshape(B, ho, k, wo, k, C)
    out = r.max(axis=(2, 4))

    def back(g):
        mask = r == out[:, :, None, :, None, :]
        count = mask.sum(axis=(2, 4), keepdims=True)
        gr = (g[:, :, None, :, None, :] * mask / count).astype(x.dtype)
        full = np.zeros_like(x.data)
        full[:, :ho * k, :wo * k, :] = gr.reshape(B, ho * k, wo * k, C)
        return (full,)
    return _make(out, (x,), back, "max_pool2d")


# ---------------------------------------------------------------- framing

def _frame_np(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    T = x.shape[-1]
    n = (T - win) // hop + 1
    idx = np.arange(n)[:, None] * hop + np.arange(win)[None, :]
    return x[..., idx]


def _ola_np(fr: np.ndarray, hop: int) -> np.ndarray:
    *lead, n, win = fr.shape
    T = (n - 1) * hop + win
    out = np.zeros((*lead, T), dtype=fr.dtype)
    if win % hop == 0:
        r = win // hop
        blocks = fr.reshape(*lead, n, r, hop)
        acc = np.zeros((*lead, n + r - 1, hop), dtype=fr.dtype)
        for i in range(r):
            acc[..., i:i + n, :] += blocks[..., :, i, :]
        out[...] = acc.reshape(*lead, T)
    else:
        stop = hop * (n - 1) + 1
        for j in range(win):
            out[..., j:j + stop:hop] += fr[..., :, j]
    return out


def frame(x: Tensor, win: int, hop: int) -> Tensor:
    """Split the last axis into overlapping frames: (..., T) -> (..., F, win)."""
    if x.shape[-1] < win:
        raise ShapeError(f"frame: length {x.shape[-1]} shorter than window {win}")
    out = _frame_np(x.data, win, hop)
    n = out.shape[-2]
    used = (n - 1) * hop + win

    def back(g):
        full = np.zeros_like(x.data)
        full[..., :used] = _ola_np(g, hop)
        return (full,)
    return _make(out, (x,), back, "frame")


def overlap_add(fr: Tensor, hop: int) -> Tensor:
    """Inverse of ``frame`` up to overlap weighting: (..., F, win) -> (..., (F-1)*hop+win)."""
    win = fr.shape[-1]
    return _make(_ola_np(fr.data, hop), (fr,), lambda g: (_frame_np(g, win, hop),), "overlap_add")
