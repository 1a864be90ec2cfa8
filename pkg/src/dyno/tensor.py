"""Reverse-mode automatic differentiation on dense numpy buffers.

A Tensor wraps a row-major float32/float64 array.  Every primitive that
sees an input with requires_grad=True records itself on the implicit
graph (parents + a vector-Jacobian closure); ``backward`` replays a
``Tape`` of that graph in reverse topological order, visiting each node
exactly once.  Tensors and the graphs hanging off them are single-writer:
a graph must be built and walked by one thread, read-only tensors may be
shared freely.

Training runs in float32; gradient checks run in float64.
"""

from __future__ import annotations

import hashlib
import struct
from contextlib import contextmanager

import numpy as np

DTYPE_CODES = {"float32": 0, "float64": 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

BLOB_MAGIC = b"DYNO"
BLOB_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes incompatible for an op; carries the op name and shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class NumericError(ArithmeticError):
    """NaN or Inf produced by an op; never silently propagated."""

    def __init__(self, op, detail=""):
        self.op = op
        super().__init__(f"{op}: non-finite values in output{(' (' + detail + ')') if detail else ''}")


_grad_enabled = True
finite_checks = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data prep)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def _check_finite(op, data):
    if finite_checks and not np.all(np.isfinite(data)):
        raise NumericError(op)


def derive_seed(run_seed, name, counter=0):
    """Stable 64-bit sub-seed from (run_seed, module name, counter).

    Uses blake2b so streams are reproducible across processes and runs,
    unlike the salted builtin hash().
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", int(run_seed) & 0xFFFFFFFFFFFFFFFF))
    h.update(name.encode("utf-8"))
    h.update(struct.pack("<Q", int(counter) & 0xFFFFFFFFFFFFFFFF))
    return int.from_bytes(h.digest(), "little")


def rng_for(run_seed, name, counter=0):
    return np.random.default_rng(derive_seed(run_seed, name, counter))


class Tensor:
    """Dense n-dimensional array with an optional differentiation record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self.op = "leaf"

    # -- introspection ----------------------------------------------------

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
    def dtype(self):
        return str(self.data.dtype)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._bad_item()

    def _bad_item(self):
        raise ShapeError("item", self.shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad}, op={self.op})"

    def __len__(self):
        return self.data.shape[0]

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _result(data, parents, vjp, op):
        _check_finite(op, data)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
            out.op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
            out.op = op
        return out

    def detach(self):
        return stop_gradient(self)

    # -- operator sugar -----------------------------------------------------

    def _lift(self, other, op):
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise ShapeError(op + "/dtype", self.shape, other.shape)
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._lift(other, "add"))

    def __radd__(self, other):
        return add(self._lift(other, "add"), self)

    def __sub__(self, other):
        return sub(self, self._lift(other, "sub"))

    def __rsub__(self, other):
        return sub(self._lift(other, "sub"), self)

    def __mul__(self, other):
        return mul(self, self._lift(other, "mul"))

    def __rmul__(self, other):
        return mul(self._lift(other, "mul"), self)

    def __truediv__(self, other):
        return div(self, self._lift(other, "div"))

    def __rtruediv__(self, other):
        return div(self._lift(other, "div"), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, self._lift(other, "matmul"))

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# -- broadcasting helper ----------------------------------------------------


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise primitives ---------------------------------------------------


def add(a, b):
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(out, (a, b), vjp, "add")


def sub(a, b):
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._result(out, (a, b), vjp, "sub")


def mul(a, b):
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out, (a, b), vjp, "mul")


def div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(out, (a, b), vjp, "div")


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    with np.errstate(invalid="ignore", over="ignore"):
        out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._result(out, (a,), vjp, "pow")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out = np.where(a.data >= 0, out, 1.0 - out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (a,), vjp, "sigmoid")


def softplus(a):
    # log(1 + e^x), computed as logaddexp(0, x) so large |x| stays finite
    out = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)

    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
        s = np.where(a.data >= 0, s, 1.0 - s)
        return (g * s,)

    return Tensor._result(out, (a,), vjp, "softplus")


def relu(a):
    out = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return Tensor._result(out, (a,), vjp, "relu")


def gelu(a):
    # tanh approximation, fused; the vjp differentiates the approximation
    # itself so grad checks see an exact analytic gradient
    c = 0.7978845608028654  # sqrt(2/pi)
    x = a.data
    inner = np.tanh(c * (x + 0.044715 * x * x * x))
    out = 0.5 * x * (1.0 + inner)

    def vjp(g):
        du = c * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + inner) + 0.5 * x * (1.0 - inner * inner) * du),)

    return Tensor._result(out.astype(x.dtype), (a,), vjp, "gelu")


# -- structural primitives ----------------------------------------------------


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g):
        da = db = None
        if a.requires_grad:
            da = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        if b.requires_grad:
            db = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return da, db

    return Tensor._result(out, (a, b), vjp, "matmul")


def reshape(a, shape):
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return Tensor._result(out, (a,), vjp, "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return Tensor._result(out, (a,), vjp, "transpose")


def _is_basic_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(a, key):
    out = a.data[key]
    basic = _is_basic_index(key)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g  # basic indexing selects disjoint elements
        else:
            np.add.at(full, key, g)
        return (full,)

    return Tensor._result(np.ascontiguousarray(out), (a,), vjp, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    return Tensor._result(out, tuple(tensors), vjp, "concat")


def take(table, indices, axis=0):
    """Gather rows of ``table`` (axis 0 only); backward scatter-adds."""
    if axis != 0:
        raise ShapeError("take", table.shape)
    idx = np.asarray(indices)
    out = table.data[idx]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(out, (table,), vjp, "take")


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=a.data.dtype), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),)

    return Tensor._result(np.asarray(out, dtype=a.data.dtype), (a,), vjp, "mean")


def softmax(a, axis):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._result(out, (a,), vjp, "softmax")


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._result(y, (a,), vjp, "layer_norm")


def masked_fill(a, keep, fill_value=None):
    """Replace entries where ``keep`` is False with the dtype's most negative
    finite value (or ``fill_value``); gradient flows only through kept entries.
    """
    keep = np.asarray(keep, dtype=bool)
    if fill_value is None:
        fill_value = np.finfo(a.data.dtype).min
    out = np.where(keep, a.data, a.data.dtype.type(fill_value))

    def vjp(g):
        return (np.where(keep, g, 0.0),)

    return Tensor._result(out, (a,), vjp, "masked_fill")


def stop_gradient(a):
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._vjp = None
    out.op = "stop_gradient"
    return out


def linear_scan(decay, drive, h0):
    """Run ``h_t = decay_t * h_{t-1} + drive_t`` along axis 0 in one primitive.

    decay/drive have shape (T, *S), h0 has shape (*S); returns (T, *S).
    The backward pass is the reverse-time recurrence, so gradients cost the
    same as the forward sweep instead of T graph nodes.
    """
    if decay.data.shape != drive.data.shape or decay.data.shape[1:] != h0.data.shape:
        raise ShapeError("linear_scan", decay.shape, drive.shape, h0.shape)
    T = decay.data.shape[0]
    hs = np.empty_like(drive.data)
    h = h0.data
    for t in range(T):
        h = decay.data[t] * h + drive.data[t]
        hs[t] = h

    def vjp(g):
        gbar = np.zeros_like(g)
        acc = np.zeros_like(h0.data)
        for t in range(T - 1, -1, -1):
            acc = g[t] + acc
            gbar[t] = acc
            acc = acc * decay.data[t]
        d_decay = np.empty_like(gbar)
        d_decay[0] = gbar[0] * h0.data
        if T > 1:
            d_decay[1:] = gbar[1:] * hs[:-1]
        return d_decay, gbar.copy(), acc

    return Tensor._result(hs, (decay, drive, h0), vjp, "linear_scan")


# -- composites ----------------------------------------------------------------


def cosine_similarity(a, b, axis=-1, eps=1e-8):
    num = tsum(mul(a, b), axis=axis)
    na = sqrt(tsum(mul(a, a), axis=axis) + eps)
    nb = sqrt(tsum(mul(b, b), axis=axis) + eps)
    return div(num, mul(na, nb))


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on raw logits: softplus(x) - x*t."""
    t = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=logits.data.dtype))
    return softplus(logits) - logits * t


def mse(a, b):
    d = sub(a, b)
    return tmean(mul(d, d))


# -- tape and backward -----------------------------------------------------------


class Tape:
    """Reverse-topological record of all ops reachable from a root tensor.

    Built iteratively (graphs from long rollouts overflow Python recursion).
    ``nodes`` lists inputs before the ops consuming them; walking it reversed
    visits every node exactly once with its output gradient complete.
    """

    __slots__ = ("nodes",)

    def __init__(self, root):
        nodes = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def backward(loss, params=None, accumulate=True):
    """Backpropagate from a scalar loss.

    Returns a gradient map {tensor: ndarray}.  Without ``params`` it holds
    every requires_grad leaf reached from the loss; with ``params`` it holds
    exactly those tensors, unreachable ones mapped to exact zeros.  With
    accumulate=True, leaf ``.grad`` buffers are summed into as well
    (optimizer convention).
    """
    if loss.data.size != 1:
        raise ShapeError("backward/nonscalar-loss", loss.shape)
    tape = Tape(loss)
    flowing = {id(loss): np.ones_like(loss.data)}
    gradmap = {}
    for node in reversed(tape.nodes):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg
        elif node.requires_grad:
            gradmap[node] = g.reshape(node.data.shape)
    if accumulate:
        for t, g in gradmap.items():
            t.grad = g.copy() if t.grad is None else t.grad + g
    if params is not None:
        return {p: gradmap.get(p, np.zeros_like(p.data)) for p in params}
    return gradmap


# -- optimizer --------------------------------------------------------------------


class AdamState:
    """Per-parameter moments plus step counter for one Adam instance."""

    __slots__ = ("m", "v", "step", "lr", "beta1", "beta2", "eps")

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(self.params, lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads=None):
        """Apply one update; grads may be an explicit {tensor: ndarray} map,
        otherwise the accumulated ``.grad`` buffers are used (missing = zero).
        """
        st = self.state
        updates = []
        for p in self.params:
            g = grads.get(p) if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            g = np.asarray(g, dtype=p.data.dtype)
            if g.shape != p.data.shape:
                raise ShapeError("adam_step", g.shape, p.data.shape)
            if not np.all(np.isfinite(g)):
                raise NumericError("adam_step", "gradient")
            updates.append(g)
        st.step += 1
        bc1 = 1.0 - st.beta1**st.step
        bc2 = 1.0 - st.beta2**st.step
        for i, (p, g) in enumerate(zip(self.params, updates)):
            st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g
            st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * (g * g)
            mhat = st.m[i] / bc1
            vhat = st.v[i] / bc2
            p.data -= (st.lr * mhat / (np.sqrt(vhat) + st.eps)).astype(p.data.dtype)


# -- gradient checking ----------------------------------------------------------


def grad_check_leaves(build_loss, leaves, eps=1e-5):
    """Central-difference check against existing graph leaves, perturbed in
    place.  ``build_loss()`` must rebuild the scalar loss from the current
    leaf values on every call.  Returns the max relative error
    |analytic - central| / max(1, |central|) over all leaf coordinates.
    """
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 leaves")
    loss = build_loss()
    if loss.data.size != 1:
        raise ShapeError("grad_check/nonscalar", loss.shape)
    _check_finite("grad_check", loss.data)
    analytic = backward(loss, params=leaves, accumulate=False)

    worst = 0.0
    for p in leaves:
        flat = p.data.reshape(-1)
        a = analytic[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = build_loss().item()
            flat[i] = orig - eps
            with no_grad():
                down = build_loss().item()
            flat[i] = orig
            central = (up - down) / (2.0 * eps)
            if not np.isfinite(central):
                raise NumericError("grad_check", "finite differences")
            err = abs(a[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst


def grad_check(fn, points, eps=1e-5):
    """Max relative error between analytic and central-difference gradients
    of a scalar-valued ``fn`` at one tensor (or a sequence of tensors)."""
    if isinstance(points, Tensor):
        points = [points]
    leaves = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in points]
    return grad_check_leaves(lambda: fn(*leaves), leaves, eps=eps)


# -- tensor blob format -----------------------------------------------------------

# little-endian; header = magic "DYNO", version u32, dtype u8 (0=f32, 1=f64),
# rank u8, dims u64 each; then raw row-major data


def blob_bytes(array):
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        raise ValueError(f"blob supports float32/float64 only, got {arr.dtype}")
    header = BLOB_MAGIC + struct.pack("<IBB", BLOB_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    if arr.dtype.byteorder == ">":  # big-endian buffers never arise on our targets
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return header + arr.tobytes()


def write_blob(path, array):
    with open(path, "wb") as fh:
        fh.write(blob_bytes(array))


def read_blob(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != BLOB_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack("<IBB", raw[4:10])
    if version != BLOB_VERSION:
        raise ValueError(f"{path}: unsupported blob version {version}")
    dims = struct.unpack(f"<{rank}Q", raw[10:10 + 8 * rank])
    dtype = np.dtype(CODE_DTYPES[code]).newbyteorder("<")
    data = np.frombuffer(raw[10 + 8 * rank:], dtype=dtype)
    expect = int(np.prod(dims)) if rank else 1
    if data.size != expect:
        raise ValueError(f"{path}: payload has {data.size} values, header says {expect}")
    return data.reshape(dims).astype(CODE_DTYPES[code])
