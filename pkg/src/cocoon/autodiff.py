"""Dense tensors with reverse-mode automatic differentiation.

Every operation computes its forward value eagerly with numpy (float64) and
records a closure that maps the output adjoint to input adjoints.  The graph is
implicit in the ``_parents`` links; :func:`backward` walks it once in reverse
topological order.
"""

import numpy as np

from .exceptions import ContractError, DegenerateInputError, DimensionError, NumericError

PROB_FLOOR = 1e-7
PROB_CEIL = 1.0 - 1e-7
NORM_EPS = 1e-12


class Tensor:
    """An n-dimensional float64 array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t):
    raise ContractError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(op)
    return data


def _make(data, parents, backward, op):
    data = _finite(data, op)
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise binary ----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward, "div")


# elementwise unary -----------------------------------------------------------

def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    """Natural logarithm.  Callers feeding probabilities should :func:`clamp_prob` first."""
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a, lo, hi):
    """Clip values to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def clamp_prob(p):
    return clamp(p, PROB_FLOOR, PROB_CEIL)


# reductions and shape ops ----------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def matmul(a, b):
    """Matrix product ``a @ b`` where ``b`` is 2-D and ``a`` has 1 or more dims."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    k, n = b.shape

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# composite ops with fused adjoints ----------------------------------------------

def softmax_scaled(logits, scale=1.0, axis=-1):
    """``softmax(scale * logits)`` along ``axis``, stabilised by max subtraction."""
    if scale <= 0:
        raise ContractError(f"softmax scale must be positive, got {scale}")
    logits = as_tensor(logits)
    if logits.shape[axis] < 1:
        raise ContractError("softmax over an empty axis")
    z = scale * logits.data
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (scale * out * (g - dot),)

    return _make(out, (logits,), backward, "softmax")


def l2_normalize(v, axis=-1, eps=NORM_EPS):
    """Scale ``v`` to unit Euclidean norm along ``axis``.

    Raises :class:`DegenerateInputError` when any norm falls below ``eps``.
    """
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise DegenerateInputError("cannot normalize a (near) zero vector")
    out = v.data / norm

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return _make(out, (v,), backward, "l2_normalize")


def entropy(p, axis=-1):
    """Shannon entropy in nats along ``axis``, with the log argument clamped."""
    p = as_tensor(p)
    return neg(tsum(mul(p, log(clamp_prob(p))), axis=axis))


# backward pass ---------------------------------------------------------------

def _toposort(root):
    order, seen = [], set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Populate ``.grad`` on every differentiable leaf reachable from ``loss``.

    Gradients are recomputed from scratch on every call.  If ``params`` is
    given, leaves in it that are disconnected from ``loss`` receive zero
    gradients.  Returns a dict keyed by ``id(tensor)``.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_toposort(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        for node in _toposort(loss):
            if node._backward is None:
                node.grad = np.array(grads[id(node)], dtype=np.float64).reshape(node.shape)
    for p in params or ():
        if id(p) not in grads:
            p.grad = np.zeros_like(p.data)
    return grads


def gradients(loss, params):
    """Return the list of gradient arrays for ``params`` (zeros if disconnected)."""
    backward(loss, params)
    return [p.grad for p in params]


# verification oracle ---------------------------------------------------------

def _relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f, point, h=1e-5):
    """Max relative error between autodiff and central differences of ``f`` at ``point``.

    ``f`` maps a Tensor to a scalar Tensor.
    """
    if h <= 0:
        raise ContractError("step size h must be positive")
    x = np.array(point, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    analytic = gradients(f(leaf), [leaf])[0].reshape(-1)
    flat = x.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(x)).item()
        flat[i] = orig - h
        down = f(Tensor(x)).item()
        flat[i] = orig
        numeric[i] = (up - down) / (2 * h)
    return float(_relative_error(analytic, numeric).max(initial=0.0))


def gradient_check(loss_fn, params, h=1e-5):
    """Max relative error over every coordinate of every tensor in ``params``.

    ``loss_fn`` takes no arguments and rebuilds the loss from the current
    parameter values; parameters are perturbed in place and restored.
    """
    if h <= 0:
        raise ContractError("step size h must be positive")
    params = list(params)
    analytic = gradients(loss_fn(), params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        base = p.data
        p.data = base.copy()
        flat = p.data.reshape(-1)  # view: writes go straight into p.data
        ref = base.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            flat[i] = ref[i] + h
            up = loss_fn().item()
            flat[i] = ref[i] - h
            down = loss_fn().item()
            flat[i] = ref[i]
            numeric[i] = (up - down) / (2 * h)
        p.data = base
        worst = max(worst, float(_relative_error(ga.reshape(-1), numeric).max(initial=0.0)))
    return worst
