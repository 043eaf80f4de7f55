"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in row-major numpy arrays. Every op validates that its output is
finite and raises NonFiniteError naming the op, because recurrent nets
otherwise diverge silently. Gradients accumulate into tensors created with
requires_grad=True; calling backward() on a scalar walks the recorded graph
once in reverse topological order.

The module also defines Parameter (a named trainable tensor with a persistent
gradient accumulator and optimizer state) and the binary checkpoint format
used to persist parameter sets.
"""

from __future__ import annotations

import struct

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the op (e.g. log of 0)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite values produced by op '%s'" % op)


class Tensor:
    """A node in the computation graph.

    `data` is a float64 ndarray, `grad` (same shape, lazily allocated) holds
    the accumulated gradient. Non-leaf tensors keep references to their
    parents and a closure that routes the incoming gradient to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, op)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

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
        return float(self.data)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ShapeError(
                "backward seed shape %s does not match tensor shape %s"
                % (grad.shape, self.data.shape)
            )
        order = self._topo_order()
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._parents == ():
                node.accumulate_grad(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    if parent._parents == () and parent._backward is None:
                        parent.accumulate_grad(pg)
                    else:
                        key = id(parent)
                        if key in grads:
                            grads[key] = grads[key] + pg
                        else:
                            grads[key] = pg

    def _topo_order(self):
        # Iterative post-order DFS, reversed: children before parents.
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return list(reversed(order))

    # Operator sugar used pervasively by the layer code.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __repr__(self):
        return "Tensor(op=%s, shape=%s)" % (self.op, self.data.shape)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, op, backward):
    """Build a graph node; drops graph links when no parent needs gradients.

    `backward(g)` must return an iterable of (parent, parent_grad) pairs.
    Custom layers (MDLSTM scans, CTC) use this to register hand-written
    backward passes.
    """
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(g, shape):
    """Sum g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return make_node(out, (a, b), "add", backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return make_node(out, (a, b), "sub", backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return make_node(out, (a, b), "mul", backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul shapes %s and %s do not agree" % (a.shape, b.shape))
    out = a.data @ b.data

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return make_node(out, (a, b), "matmul", backward)


def affine(x, w, b):
    """out[n, o] = sum_i x[n, i] * w[i, o] + b[o]."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("affine input %s and weight %s do not agree" % (x.shape, w.shape))
    if b.shape != (w.shape[1],):
        raise ShapeError("affine bias %s does not match weight %s" % (b.shape, w.shape))
    out = x.data @ w.data + b.data

    def backward(g):
        return ((x, g @ w.data.T), (w, x.data.T @ g), (b, g.sum(axis=0)))

    return make_node(out, (x, w, b), "affine", backward)


def tanh(x):
    x = _wrap(x)
    out = np.tanh(x.data)

    def backward(g):
        return ((x, g * (1.0 - out * out)),)

    return make_node(out, (x,), "tanh", backward)


def sigmoid(x):
    x = _wrap(x)
    # Split by sign to avoid exp overflow at large |x|.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return ((x, g * out * (1.0 - out)),)

    return make_node(out, (x,), "sigmoid", backward)


def exp(x):
    x = _wrap(x)
    out = np.exp(x.data)
    _check_finite(out, "exp")

    def backward(g):
        return ((x, g * out),)

    return make_node(out, (x,), "exp", backward)


def log(x):
    x = _wrap(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    out = np.log(x.data)

    def backward(g):
        return ((x, g / x.data),)

    return make_node(out, (x,), "log", backward)


def add_const(x, c):
    x = _wrap(x)
    out = x.data + float(c)

    def backward(g):
        return ((x, g),)

    return make_node(out, (x,), "add-const", backward)


def mul_const(x, c):
    x = _wrap(x)
    c = float(c)
    out = x.data * c

    def backward(g):
        return ((x, g * c),)

    return make_node(out, (x,), "mul-const", backward)


_ELEMENTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "add-const": add_const,
    "mul-const": mul_const,
}


def elementwise(x, fn, const=None):
    """Apply a named elementwise function; add-const/mul-const take `const`."""
    if fn not in _ELEMENTWISE:
        raise ValueError("unknown elementwise fn %r" % (fn,))
    if fn in ("add-const", "mul-const"):
        if const is None:
            raise ValueError("fn %r requires const" % (fn,))
        return _ELEMENTWISE[fn](x, const)
    return _ELEMENTWISE[fn](x)


def softmax_along_axis(x, axis):
    """Overflow-safe softmax; slices along `axis` sum to 1."""
    x = _wrap(x)
    if not 0 <= axis < x.ndim:
        raise ShapeError("softmax axis %d out of range for shape %s" % (axis, x.shape))
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((x, out * (g - dot)),)

    return make_node(out, (x,), "softmax", backward)


def reduce_sum_along_axis(x, axis):
    x = _wrap(x)
    if not 0 <= axis < x.ndim:
        raise ShapeError("reduce axis %d out of range for shape %s" % (axis, x.shape))
    out = x.data.sum(axis=axis)

    def backward(g):
        return ((x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy()),)

    return make_node(out, (x,), "reduce-sum", backward)


def reshape(x, shape):
    x = _wrap(x)
    out = x.data.reshape(shape)

    def backward(g):
        return ((x, g.reshape(x.data.shape)),)

    return make_node(out, (x,), "reshape", backward)


def transpose(x, axes):
    x = _wrap(x)
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        return ((x, np.ascontiguousarray(g.transpose(inv))),)

    return make_node(out, (x,), "transpose", backward)


def zero_pad(x, pad_after):
    """Zero-pad at the high end of each axis; pad_after[i] >= 0."""
    x = _wrap(x)
    pads = tuple((0, int(p)) for p in pad_after)
    if len(pads) != x.ndim:
        raise ShapeError("pad spec %s does not match rank of %s" % (pad_after, x.shape))
    out = np.pad(x.data, pads)
    sl = tuple(slice(0, n) for n in x.data.shape)

    def backward(g):
        return ((x, g[sl]),)

    return make_node(out, (x,), "zero-pad", backward)


def narrow(x, axis, start, length):
    """Slice `length` entries starting at `start` along `axis`."""
    x = _wrap(x)
    if not 0 <= axis < x.ndim:
        raise ShapeError("narrow axis %d out of range for shape %s" % (axis, x.shape))
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            "narrow [%d, %d) out of bounds for axis %d of %s"
            % (start, start + length, axis, x.shape)
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return ((x, full),)

    return make_node(out, (x,), "narrow", backward)


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pairs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pairs.append((t, g[tuple(idx)]))
        return pairs

    return make_node(out, tuple(tensors), "concat", backward)


class Parameter:
    """Named trainable tensor with persistent grad accumulator and optimizer state."""

    def __init__(self, name, value):
        self.name = name
        self.tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.tensor.zero_grad()
        self.state = {}

    @property
    def value(self):
        return self.tensor.data

    @value.setter
    def value(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.tensor.data.shape:
            raise ShapeError(
                "parameter %s: new value shape %s != %s"
                % (self.name, v.shape, self.tensor.data.shape)
            )
        self.tensor.data = v

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.data.shape

    @property
    def size(self):
        return self.tensor.data.size

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return "Parameter(%s, shape=%s)" % (self.name, self.shape)


# Checkpoint format: magic+version tag, parameter count, then per parameter
# its UTF-8 name, shape, and raw little-endian float64 data. Round-trips are
# bit-exact.
CHECKPOINT_MAGIC = b"PSCKPT01"


def save_checkpoint(params, path):
    """Write a name->array mapping (or iterable of Parameters) to `path`."""
    if not isinstance(params, dict):
        params = {p.name: p.value for p in params}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
            fh.write(arr.tobytes(order="C"))


class CheckpointError(ValueError):
    """Checkpoint file is missing, truncated, or has the wrong tag."""


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint; returns name->ndarray."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("%s: bad checkpoint tag" % (path,))
    off = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError("%s: truncated checkpoint" % (path,))
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = take("<I")
        shape = take("<%dI" % ndim) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        size = 8 * n
        if off + size > len(blob):
            raise CheckpointError("%s: truncated checkpoint" % (path,))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        out[name] = arr.astype(np.float64).copy()
        off += size
    return out
