"""A small reverse-mode differentiation engine on top of numpy.

Only the operations needed by the camera model and the inference network
are provided.  Values are always float64.  The graph is built dynamically
by the forward calls and traversed once by :func:`backward`.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes or a scalar operand.  Adding a bias row to a batch uses the
explicit :func:`add_rowvec`.
"""

import itertools

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_ids = itertools.count()


class Tensor:
    """A float64 array that may participate in a differentiation graph.

    ``grad`` exists for tensors created with ``requires_grad=True`` (zeros
    until a backward pass reaches them) and for intermediate results that
    depend on such tensors.
    """

    __array_priority__ = 100

    def __init__(self, values, requires_grad=False, parents=(), op="leaf", backward_fn=None):
        self.values = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        self.node_id = next(_ids)
        self.grad = np.zeros_like(self.values) if self.requires_grad and not self.parents else None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def is_leaf(self):
        return not self.parents

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def item(self):
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self):
        return self.values

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents, op, backward_fn):
    needs = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs, parents=parents if needs else (), op=op,
                 backward_fn=backward_fn if needs else None)
    return out


def _check_binary(a, b, name):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    # scalar operand broadcast against a tensor
    return np.asarray(grad.sum()).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.values + b.values, (a, b), "add", bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.values, a.shape), _reduce_to(g * a.values, b.shape)

    return _result(a.values * b.values, (a, b), "mul", bw)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result(a.values * c, (a,), "scale", lambda g: (g * c,))


def add_rowvec(x, row):
    """Add a length-n vector to every row of a batch x n matrix."""
    x, row = as_tensor(x), as_tensor(row)
    if x.values.ndim != 2 or row.values.ndim != 1 or x.shape[1] != row.shape[0]:
        raise DimensionError(f"add_rowvec: incompatible shapes {x.shape} and {row.shape}")

    def bw(g):
        return g, g.sum(axis=0)

    return _result(x.values + row.values, (x, row), "add_rowvec", bw)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.values.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(out, (x,), "sum", bw)


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}")
    old = x.shape
    return _result(x.values.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x):
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.values.T, (x,), "transpose", lambda g: (g.T,))


# ------------------------------------------------------------------ nonlinear


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.values)
    return _result(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def leaky_relu(x, slope=0.01):
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    # subgradient at 0 is taken as 1
    d = np.where(x.values >= 0, 1.0, slope)
    return _result(x.values * d, (x,), "leaky_relu", lambda g: (g * d,))


def leaky_clip(x, p_max, alpha):
    """Identity up to ``p_max``, slope ``alpha`` above it."""
    if alpha <= 0:
        raise ConfigError(f"leaky_clip alpha must be positive, got {alpha}")
    x = as_tensor(x)
    over = x.values > p_max
    y = np.where(over, alpha * (x.values - p_max) + p_max, x.values)
    d = np.where(over, alpha, 1.0)
    return _result(y, (x,), "leaky_clip", lambda g: (g * d,))


# ----------------------------------------------------------------- linear ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.values.T if a.requires_grad else None
        gb = a.values.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.values @ b.values, (a, b), "matmul", bw)


def _correlate_same(img, kernel):
    """Zero-padded 'same' correlation over the last two axes."""
    r = kernel.shape[0]
    c = r // 2
    h, w = img.shape[-2:]
    pad = [(0, 0)] * (img.ndim - 2) + [(c, c), (c, c)]
    padded = np.pad(img, pad)
    out = np.zeros_like(img)
    for u in range(r):
        for v in range(r):
            k = kernel[u, v]
            if k != 0.0:
                out += k * padded[..., u:u + h, v:v + w]
    return out


def conv2d_fixed(image, kernel):
    """Same-size correlation of ``image`` (``h x w`` or ``batch x h x w``)
    with a constant odd-sized kernel; zero padding at the borders."""
    image = as_tensor(image)
    kernel = np.asarray(kernel.values if isinstance(kernel, Tensor) else kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ConfigError(f"conv2d kernel must be square, got shape {kernel.shape}")
    if kernel.shape[0] % 2 == 0:
        raise ConfigError(f"conv2d kernel width must be odd, got {kernel.shape[0]}")
    if image.values.ndim not in (2, 3):
        raise DimensionError(f"conv2d expects h x w or batch x h x w, got {image.shape}")
    out = _correlate_same(image.values, kernel)
    flipped = kernel[::-1, ::-1]
    return _result(out, (image,), "conv2d_fixed", lambda g: (_correlate_same(g, flipped),))


# --------------------------------------------------------------------- losses


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.values.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (np.asarray(g).item() / n),)

    return _result(loss, (logits,), "softmax_cross_entropy", bw)


def mse_loss(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.values - target.values
    n = diff.size

    def bw(g):
        gp = np.asarray(g).item() * 2.0 * diff / n
        return gp, -gp

    return _result(np.mean(diff * diff), (pred, target), "mse_loss", bw)


# ------------------------------------------------------------------- backward


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every trainable leaf ``t``
    reachable from the scalar ``loss``."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar tensor, got {shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def numerical_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. the array
    ``x`` (perturbed in place and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-8):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def rel_error(analytic, numeric, floor=1e-12):
    """Normwise ||a - n|| / max(||a||, ||n||, floor).

    Unlike :func:`max_rel_error` this is not dominated by near-zero
    components, whose finite-difference estimates carry O(h^2) truncation
    error regardless of the gradient's size."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
