"""Dense tensors with a reverse-mode tape.

Forward passes record a tape implicitly: every op output keeps references to
its parents plus a closure that maps the output gradient to parent gradients,
and a monotonically increasing creation index. Creation order is a valid
topological order (parents are always created first), so ``backward`` walks
the recorded nodes once, in reverse creation order, then drops the tape.

Pipeline tensors are float32; oracles (finite differences in tests) build
float64 graphs by passing ``dtype``. Scalars mixed into ops must be python
floats so numpy keeps the array dtype.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import ContractError, DataError, DegenerateRowError, DimensionError

_counter = 0
_grad_enabled = True

CHECKPOINT_MAGIC = b"S2TN"
CHECKPOINT_VERSION = 1


def neg_inf(dtype=np.float32):
    """Masking sentinel: most-negative finite value of the element type."""
    return float(np.finfo(np.dtype(dtype)).min)


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense real-valued array, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_order", "_velocity")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        global _counter
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._velocity = None
        _counter += 1
        self._order = _counter

    # -- bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _non_scalar(self)

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _non_scalar(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def _wrap(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, grad_fn):
    """Create an op output, recording it on the tape if anyone needs grads."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops ------------------------------------------------------


def add(a, b):
    a, b = _wrap(a, getattr(b, "dtype", np.float32)), b
    b = _wrap(b, a.dtype)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    data = a.data / b.data
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def texp(a):
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def tlog(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a):
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g / (2.0 * data),))


def tanh(a):
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),))


def _sigmoid_stable(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    data = _sigmoid_stable(a.data)
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a):
    # log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|) for stability
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid_stable(x)
    return _make(data.astype(x.dtype), (a,), lambda g: (g * sig,))


def relu(a):
    keep = a.data > 0
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def huber(a, delta=1.0):
    """Elementwise Huber: 0.5 r^2 for |r| <= delta, else delta (|r| - delta/2)."""
    x = a.data
    small = np.abs(x) <= delta
    data = np.where(small, 0.5 * x * x, delta * (np.abs(x) - 0.5 * delta))
    slope = np.clip(x, -delta, delta)
    return _make(data.astype(x.dtype), (a,), lambda g: (g * slope,))


# -- shape ops ------------------------------------------------------------


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, idx):
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), back)


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make(np.asarray(data, dtype=a.dtype), (a,), back)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# -- matmul ---------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batch broadcasting on leading dims."""
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(data, (a, b), back)


# -- masked softmax -------------------------------------------------------


def softmax(logits, axis=-1):
    """Plain softmax over the last axis (no mask, no validation)."""
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out.astype(logits.dtype), (logits,), back)


def softmax_masked(logits, mask):
    """Softmax over the last axis with an additive {0, -inf sentinel} mask.

    Masked entries come out exactly 0; each row must keep at least one
    unmasked entry.
    """
    logits = _wrap(logits, np.float32)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    sentinel = neg_inf(mask.dtype)
    ok = (mask == 0.0) | (mask == sentinel)
    if not ok.all():
        raise ContractError("mask entries must be exactly 0 or the -inf sentinel")
    blocked = mask == sentinel
    if blocked.all(axis=-1).any():
        raise DegenerateRowError("softmax row with every entry masked")
    shifted = np.where(blocked, sentinel, logits.data + mask)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (_unbroadcast((out * (g - dot)).astype(logits.dtype, copy=False), logits.shape),)

    return _make(out.astype(logits.dtype), (logits,), back)


# -- composites -----------------------------------------------------------


def l2_normalize(a, axis=-1, eps=1e-12):
    """Rows scaled to unit Euclidean norm."""
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    return div(a, tsqrt(add(sq, eps)))


def logsumexp(a, axis=-1, keepdims=True):
    """Stabilized log-sum-exp along one axis (max offset is detached)."""
    m = Tensor(a.data.max(axis=axis, keepdims=True), dtype=a.dtype)
    return add(tlog(tsum(texp(sub(a, m)), axis=axis, keepdims=keepdims)), m if keepdims else Tensor(m.data.squeeze(axis), dtype=a.dtype))


# -- backward pass --------------------------------------------------------


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The tape below ``loss`` is released afterwards; re-running requires a
    fresh forward pass. Grad accumulation across passes is additive until
    ``zero_grads``.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")

    # collect the reachable subgraph; creation order is topological
    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    nodes = sorted(seen.values(), key=lambda t: t._order, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    for node in nodes:
        if node._grad_fn is not None:
            node._parents = ()
            node._grad_fn = None


# -- optimizers -----------------------------------------------------------


def sgd_step(params, lr, momentum=0.0):
    """In-place SGD update with classical momentum.

    v <- momentum * v + grad; p <- p - lr * v. Grads are left intact.
    """
    if not 0.0 <= momentum < 1.0:
        raise ContractError(f"momentum must be in [0, 1), got {momentum}")
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step on a parameter with no gradient")
        if p._velocity is None:
            p._velocity = np.zeros_like(p.data)
        p._velocity *= momentum
        p._velocity += p.grad
        p.data -= lr * p._velocity


class Adam:
    """Adam optimizer over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue  # parameter not touched by this loss
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1**self.t)
            vhat = v / (1.0 - self.b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        zero_grads(self.params)


def zero_grads(params):
    for p in params:
        p.grad = None


# -- checkpoint format ----------------------------------------------------


def save_tensor(path, array):
    """Write one array: magic, version u16, rank u16, extents u64, f32 LE."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HH", CHECKPOINT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        version, rank = struct.unpack("<HH", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fh.read(4 * n), dtype="<f4", count=n)
        return data.reshape(shape).astype(np.float32)


def save_checkpoint(directory, named_params):
    """One S2TN file per parameter, keyed by name."""
    os.makedirs(directory, exist_ok=True)
    for name, p in sorted(named_params.items()):
        arr = p.data if isinstance(p, Tensor) else p
        save_tensor(os.path.join(directory, name + ".s2tn"), arr)


def load_checkpoint(directory):
    out = {}
    for fn in sorted(os.listdir(directory)):
        if fn.endswith(".s2tn"):
            out[fn[: -len(".s2tn")]] = load_tensor(os.path.join(directory, fn))
    if not out:
        raise DataError(f"{directory}: no checkpoint tensors found")
    return out


def load_into(directory, named_params):
    """Load a checkpoint directory into an existing parameter mapping."""
    stored = load_checkpoint(directory)
    for name, p in named_params.items():
        if name not in stored:
            raise DataError(f"checkpoint missing parameter {name}")
        if stored[name].shape != p.data.shape:
            raise DataError(
                f"checkpoint {name}: shape {stored[name].shape} != {p.data.shape}"
            )
        p.data = stored[name].astype(p.data.dtype)
