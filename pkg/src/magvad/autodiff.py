"""Dense-tensor engine with reverse-mode automatic differentiation.

Covers exactly the operator set the anomaly detection model needs:
elementwise arithmetic, matmul, same-length 1-D convolution, relu/sigmoid,
inverted dropout, row L2 norms, top-k means, and the concat/slice/gather
plumbing the losses are built from. Values are float64 numpy arrays. The
graph is implicit: every op output keeps links to its parents, and a
monotonically increasing creation counter doubles as a topological order
(parents are always created before children), so the backward sweep is a
single reverse pass that visits each node exactly once.

Any forward op that produces a non-finite value raises FloatingPointError:
overflow is an error here, never a silent Inf/NaN.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "gather",
    "conv1d",
    "relu",
    "sigmoid",
    "dropout",
    "l2_norm_rows",
    "topk_mean",
    "log",
    "sum_all",
    "mean_all",
    "topological_order",
    "backward",
]

_SEQ = itertools.count()

# Sigmoid outputs are clamped into this open interval so downstream logs are
# always finite; the true gradient in the clamped region is ~1e-18 anyway.
_SIGMOID_EPS = 1e-12


class Tensor:
    """A dense float64 array plus its position in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn", "_seq")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._seq = next(_SEQ)

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

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named learnable tensor; the name is the stable checkpoint key."""

    __slots__ = ("name", "value")

    def __init__(self, name, data):
        self.name = name
        self.value = Tensor(data, requires_grad=True, op=f"param:{name}")

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op) -> Tensor:
    """Build an op output; prune the graph when no parent needs gradients."""
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced a non-finite value")
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules, e.g. matrix + bias row)

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _result(out_data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _result(out_data, (a, b), backward_fn, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            a.grad -= g

    return _result(-a.data, (a,), backward_fn, "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _result(out_data, (a, b), backward_fn, "mul")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _result(out_data, (a, b), backward_fn, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D operand, got shape {a.shape}")

    def backward_fn(g):
        if a.requires_grad:
            a.grad += g.T

    return _result(a.data.T, (a,), backward_fn, "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        if a.requires_grad:
            a.grad += g.reshape(a.shape)

    return _result(out_data, (a,), backward_fn, "reshape")


def concat(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat needs at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward_fn(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + n)
                p.grad += g[tuple(index)]
            offset += n

    return _result(out_data, tuple(parts), backward_fn, "concat")


def narrow(a, start, stop) -> Tensor:
    """Contiguous slice along axis 0."""
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.shape[0]):
        raise ValueError(f"narrow range [{start}, {stop}) out of bounds for length {a.shape[0]}")

    def backward_fn(g):
        if a.requires_grad:
            a.grad[start:stop] += g

    return _result(a.data[start:stop], (a,), backward_fn, "narrow")


def gather(v, indices) -> Tensor:
    """Pick entries of a 1-D tensor at the given integer indices."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ValueError(f"gather expects a 1-D tensor, got shape {v.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def backward_fn(g):
        if v.requires_grad:
            np.add.at(v.grad, idx, g)

    return _result(v.data[idx], (v,), backward_fn, "gather")


# ---------------------------------------------------------------------------
# temporal convolution

def conv1d(x, weight, bias, dilation=1) -> Tensor:
    """Same-length 1-D convolution over the time axis.

    x is (T, C_in), weight is (C_out, C_in, W) with W odd, bias is (C_out,).
    The input is zero-padded by (W-1)*dilation/2 on each side so the output
    is (T, C_out); out-of-range taps read zero.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 3 or bias.ndim != 1:
        raise ValueError(
            f"conv1d expects x (T, C_in), weight (C_out, C_in, W), bias (C_out,); "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    c_out, c_in, width = weight.shape
    if width % 2 == 0:
        raise ValueError(f"conv1d kernel width must be odd, got {width}")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"conv1d dilation must be a positive integer, got {dilation!r}")
    if x.shape[1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input has {x.shape[1]}, kernel expects {c_in}")
    if bias.shape[0] != c_out:
        raise ValueError(f"conv1d bias length {bias.shape[0]} != output channels {c_out}")

    t_len = x.shape[0]
    pad = (width - 1) * dilation // 2
    padded = np.zeros((t_len + 2 * pad, c_in))
    padded[pad:pad + t_len] = x.data
    out_data = np.broadcast_to(bias.data, (t_len, c_out)).copy()
    for w in range(width):
        # padded index for tap w at output t is t + w*dilation
        out_data += padded[w * dilation:w * dilation + t_len] @ weight.data[:, :, w].T

    def backward_fn(g):
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)
        if weight.requires_grad:
            for w in range(width):
                weight.grad[:, :, w] += g.T @ padded[w * dilation:w * dilation + t_len]
        if x.requires_grad:
            gp = np.zeros_like(padded)
            for w in range(width):
                gp[w * dilation:w * dilation + t_len] += g @ weight.data[:, :, w]
            x.grad += gp[pad:pad + t_len]

    return _result(out_data, (x, weight, bias), backward_fn, "conv1d")


# ---------------------------------------------------------------------------
# nonlinearities and regularization

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient at 0 is 0

    def backward_fn(g):
        if x.requires_grad:
            x.grad += g * mask

    return _result(np.where(mask, x.data, 0.0), (x,), backward_fn, "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.empty_like(x.data)
    pos = x.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out_data = np.clip(out_data, _SIGMOID_EPS, 1.0 - _SIGMOID_EPS)

    def backward_fn(g):
        if x.requires_grad:
            x.grad += g * out_data * (1.0 - out_data)

    return _result(out_data, (x,), backward_fn, "sigmoid")


def dropout(x, rate, training, rng=None) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).

    In inference mode this is the identity and consumes no randomness.
    """
    x = as_tensor(x)
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward_fn(g):
        if x.requires_grad:
            x.grad += g * scale

    return _result(x.data * scale, (x,), backward_fn, "dropout")


# ---------------------------------------------------------------------------
# magnitude / ranking primitives

def l2_norm_rows(x) -> Tensor:
    """Per-row Euclidean norm of a (T, D) matrix; gradient at a zero row is 0."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"l2_norm_rows expects a 2-D tensor, got shape {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    inv = np.zeros_like(norms)
    nz = norms > 0
    inv[nz] = 1.0 / norms[nz]

    def backward_fn(g):
        if x.requires_grad:
            x.grad += (g * inv)[:, None] * x.data

    return _result(norms, (x,), backward_fn, "l2_norm_rows")


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken toward lower indices."""
    if not (1 <= k <= values.size):
        raise ValueError(f"k must be in [1, {values.size}], got {k}")
    return np.argsort(-values, kind="stable")[:k]


def topk_mean(v, k) -> Tensor:
    """Mean of the k largest entries of a 1-D tensor."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ValueError(f"topk_mean expects a 1-D tensor, got shape {v.shape}")
    idx = topk_indices(v.data, k)
    out_data = v.data[idx].mean()

    def backward_fn(g):
        if v.requires_grad:
            v.grad[idx] += g / k

    return _result(out_data, (v,), backward_fn, "topk_mean")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive input")
    out_data = np.log(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x.grad += g / x.data

    return _result(out_data, (x,), backward_fn, "log")


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        if x.requires_grad:
            x.grad += g

    return _result(x.data.sum(), (x,), backward_fn, "sum")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def backward_fn(g):
        if x.requires_grad:
            x.grad += g / n

    return _result(x.data.mean(), (x,), backward_fn, "mean")


# ---------------------------------------------------------------------------
# backward sweep

def topological_order(root: Tensor) -> list:
    """All gradient-requiring tensors reachable from `root`, parents first.

    Creation order is already topological (an op's parents exist before it),
    so the reachable set is simply sorted by creation counter.
    """
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._seq)


def backward(root: Tensor) -> None:
    """Populate `.grad` on every gradient-requiring tensor feeding `root`.

    `root` must be a scalar. Gradient buffers are reset at the start of the
    call, so running backward twice on the same graph gives identical results.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
    order = topological_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
