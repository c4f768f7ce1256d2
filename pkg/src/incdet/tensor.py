"""Dense float64 arrays with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node holding the parents and a closure mapping the output
gradient to parent gradients; :meth:`Tensor.backward` replays those closures
in reverse topological order. Leaf gradients accumulate until the caller
resets them with :meth:`Tensor.zero_grad`.
"""

import contextlib

import numpy as np

from . import _kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input lies where the operation is undefined (e.g. zero-norm vector)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected Tensor method

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward, "div")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    exponent = float(exponent)
    out = a.data ** exponent
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a):
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a):
    s = _sigmoid(a.data)
    out = a.data * s
    return _node(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return _node(np.maximum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
                 "maximum")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _node(np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
                 "minimum")


def clamp_min(a, lo):
    mask = a.data > lo
    return _node(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


# ------------------------------------------------------------------- shaping


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def max_(a, axis):
    """Max along one axis; gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _node(out, (a,), backward, "max")


# --------------------------------------------------------------------- linear


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner axes differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def l2_normalize(a, axis=-1, eps=0.0):
    """Scale vectors along ``axis`` to unit Euclidean norm.

    Raises DegenerateInputError when any vector has zero norm and ``eps`` is 0.
    """
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    if eps == 0.0 and np.any(norm == 0.0):
        raise DegenerateInputError("l2_normalize of a zero-norm vector")
    norm = np.maximum(norm, eps) if eps else norm
    out = a.data / norm

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return _node(out, (a,), backward, "l2_normalize")


def conv2d(x, kernels, stride=1, padding=0):
    """Cross-correlation of ``x`` with ``kernels[C_out, C_in, kh, kw]``.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be 4-D [C_out,C_in,kh,kw], got {kernels.shape}")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    xd = x.data[None] if unbatched else x.data
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise DimensionError(f"channel axis mismatch: input C_in={c_in}, kernels C_in={kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel spatial axes ({kh},{kw}) exceed padded input axes "
            f"({h + 2 * padding},{w + 2 * padding})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xd = np.ascontiguousarray(xd)
    cols = _kernels.im2col(xd, kh, kw, stride, padding)
    wmat = kernels.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo)
    if unbatched:
        out = out[0]

    def backward(g):
        g = g.reshape(n, c_out, ho * wo)
        gx = gk = None
        if kernels.requires_grad:
            gk = np.einsum("nop,nkp->ok", g, cols).reshape(kernels.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)
            gx = _kernels.col2im(gcols, (n, c_in, h, w), kh, kw, stride, padding)
            if unbatched:
                gx = gx[0]
        return gx, gk

    return _node(out, (x, kernels), backward, "conv2d")


# -------------------------------------------------------------------- losses


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (logits,), lambda g: (g * (_sigmoid(x) - t),), "bce")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _node(out, (a,),
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis))


# ---------------------------------------------------------------- utilities


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (a Tensor)."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


def _scalar(v):
    return v.item() if isinstance(v, Tensor) else float(v)
