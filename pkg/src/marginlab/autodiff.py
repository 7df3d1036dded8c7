"""Reverse-mode automatic differentiation on float64 numpy arrays.

Tensors record the operation that produced them (define-by-run); the
recorded graph is replayed once, in reverse topological order, to
accumulate gradients. Everything is 64-bit: margin denominators divide
by gradient-difference norms that can be small, and the finite-difference
oracles in the test suite need the headroom.

relu uses subgradient 0 at exactly 0.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum out axes that broadcasting introduced or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-d float64 array plus the graph edge that produced it.

    grad is populated by backward(); it accumulates additively across
    backward calls until reset to None.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[Array], tuple[Array | None, ...]] | None = None
        self._op = "leaf"

    @classmethod
    def _make(cls, data: Array, parents: tuple["Tensor", ...], grad_fn, op: str) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._grad_fn = grad_fn
            out._op = op
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph management ----------------------------------------------

    def detach(self) -> "Tensor":
        """Value copy that never accumulates or propagates gradient."""
        return Tensor(np.array(self.data))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        backward(self, seed)

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return powc(self, exponent)

    # -- method sugar ----------------------------------------------------

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absval(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------
# elementwise ops (with broadcasting)
# ---------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return Tensor._make(data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b_data, a.shape)
        gb = _unbroadcast(-g * a_data / (b_data * b_data), b.shape)
        return ga, gb

    return Tensor._make(data, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = _lift(a)

    def grad_fn(g):
        return (-g,)

    return Tensor._make(-a.data, (a,), grad_fn, "neg")


def powc(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _lift(a)
    e = float(exponent)
    a_data = a.data

    def grad_fn(g):
        return (g * e * a_data ** (e - 1.0),)

    return Tensor._make(a_data ** e, (a,), grad_fn, "pow")


def relu(a) -> Tensor:
    a = _lift(a)
    mask = (a.data > 0).astype(np.float64)

    def grad_fn(g):
        return (g * mask,)

    return Tensor._make(a.data * mask, (a,), grad_fn, "relu")


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def grad_fn(g):
        return (g * out_data,)

    return Tensor._make(out_data, (a,), grad_fn, "exp")


def log(a) -> Tensor:
    a = _lift(a)
    a_data = a.data

    def grad_fn(g):
        return (g / a_data,)

    return Tensor._make(np.log(a_data), (a,), grad_fn, "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def grad_fn(g):
        return (g * 0.5 / out_data,)

    return Tensor._make(out_data, (a,), grad_fn, "sqrt")


def absval(a) -> Tensor:
    a = _lift(a)
    sign = np.sign(a.data)  # sign(0) == 0: subgradient 0 at the kink

    def grad_fn(g):
        return (g * sign,)

    return Tensor._make(np.abs(a.data), (a,), grad_fn, "abs")


# ---------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(
            f"matmul: expected rank-2 operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions do not compose, got {a.shape} @ {b.shape}"
        )
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        return g @ b_data.T, a_data.T @ g

    return Tensor._make(a_data @ b_data, (a, b), grad_fn, "matmul")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old_shape = a.shape

    def grad_fn(g):
        return (g.reshape(old_shape),)

    return Tensor._make(a.data.reshape(shape), (a,), grad_fn, "reshape")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    in_shape = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(np.float64),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, in_shape).astype(np.float64),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def tmean(a) -> Tensor:
    a = _lift(a)
    n = a.size
    in_shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g / n, in_shape).astype(np.float64),)

    return Tensor._make(a.data.mean(), (a,), grad_fn, "mean")


def pick(a, index) -> Tensor:
    """Row-wise selection: out[i] = a[i, index[i]] for a 2-d tensor."""
    a = _lift(a)
    if a.ndim != 2:
        raise ValueError(f"pick: expected a rank-2 tensor, got shape {a.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ValueError(
            f"pick: index shape {idx.shape} does not match row count {a.shape[0]}"
        )
    rows = np.arange(a.shape[0])
    in_shape = a.shape

    def grad_fn(g):
        ga = np.zeros(in_shape)
        ga[rows, idx] = g
        return (ga,)

    return Tensor._make(a.data[rows, idx], (a,), grad_fn, "pick")


def conv2d(x, kernel) -> Tensor:
    """Valid 2-d convolution (stride 1): x (N,C,H,W), kernel (F,C,kh,kw)."""
    x, kernel = _lift(x), _lift(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d: expected x rank 4 and kernel rank 4, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if c != ck:
        raise ValueError(f"conv2d: channel mismatch, input has {c} and kernel expects {ck}")
    if h < kh or w < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than spatial input {h}x{w}"
        )
    x_data, k_data = x.data, kernel.data
    windows = np.lib.stride_tricks.sliding_window_view(x_data, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,fcij->nfhw", windows, k_data, optimize=True)

    def grad_fn(g):
        gk = np.einsum("nchwij,nfhw->fcij", windows, g, optimize=True)
        g_pad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = np.lib.stride_tricks.sliding_window_view(g_pad, (kh, kw), axis=(2, 3))
        k_flip = k_data[:, :, ::-1, ::-1]
        gx = np.einsum("nfhwij,fcij->nchw", gwin, k_flip, optimize=True)
        return gx, gk

    return Tensor._make(out, (x, kernel), grad_fn, "conv2d")


def stop_gradient(t) -> Tensor:
    """Identical values; backward propagates zero through it."""
    return _lift(t).detach()


# ---------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Deterministic iterative DFS post-order over the recorded graph."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _walk(output: Tensor, seed) -> dict[int, Array]:
    if seed is None:
        if output.size != 1:
            raise ValueError(
                "backward: output is not scalar; pass a seed with the output's shape"
            )
        seed_arr = np.ones(output.shape)
    else:
        seed_arr = _as_array(seed.data if isinstance(seed, Tensor) else seed)
        if seed_arr.shape != output.shape:
            raise ValueError(
                f"backward: seed shape {seed_arr.shape} does not match output shape {output.shape}"
            )
    grads: dict[int, Array] = {id(output): seed_arr}
    for node in reversed(_topo_order(output)):
        g = grads.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def backward(output: Tensor, seed=None) -> None:
    """Populate .grad on every gradient-requiring tensor reachable from output.

    Gradients accumulate additively across calls; reset with zero_grad().
    """
    if not output.requires_grad:
        raise ValueError("backward: output does not require gradients (nothing recorded)")
    grads = _walk(output, seed)
    for node in _topo_order(output):
        g = grads.get(id(node))
        if g is None or not node.requires_grad:
            continue
        if node.grad is None:
            node.grad = np.array(g)
        else:
            node.grad = node.grad + g


def gradients(output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[Array]:
    """Gradients of output w.r.t. each tensor in wrt, without touching .grad."""
    if output.requires_grad:
        grads = _walk(output, seed)
    else:
        grads = {}
    return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]


# ---------------------------------------------------------------------
# jacobians and the finite-difference oracle
# ---------------------------------------------------------------------


def input_jacobian(net, x) -> Array:
    """Jacobian of the net's logits at a single sample: row k is grad_x z_k.

    Computed by K backward passes with one-hot seeds. `net` is any callable
    mapping a batch tensor to a (batch, K) logit tensor.
    """
    x_arr = _as_array(x.data if isinstance(x, Tensor) else x)
    expected = getattr(net, "input_shape", None)
    if expected is not None:
        if x_arr.shape != tuple(expected):
            raise ValueError(
                f"input_jacobian: expected a single sample of shape {tuple(expected)}, "
                f"got {x_arr.shape}; run batches one sample at a time"
            )
    elif x_arr.ndim != 1:
        raise ValueError(
            f"input_jacobian: expected a single rank-1 sample, got shape {x_arr.shape}; "
            "run batches one sample at a time"
        )
    jac = batch_input_jacobians(net, x_arr[np.newaxis])
    return jac[0]


def batch_input_jacobians(net, batch) -> Array:
    """Per-sample input jacobians for a whole batch: (N, K, *input_shape).

    Each row of the batch reaches only its own logit row, so one backward
    pass per class (seeded with that class's one-hot column) recovers every
    sample's gradient at once.
    """
    x_t = Tensor(batch, requires_grad=True)
    logits = net(x_t)
    n, k = logits.shape
    jac = np.empty((n, k) + x_t.shape[1:])
    for cls in range(k):
        seed = np.zeros((n, k))
        seed[:, cls] = 1.0
        jac[:, cls] = gradients(logits, [x_t], seed=seed)[0]
    return jac


def finite_diff_gradient(f, point, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function at a point."""
    if h <= 0:
        raise ValueError("finite_diff_gradient: h must be positive")
    p = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(p)
        flat[i] = orig - h
        fm = f(p)
        flat[i] = orig
        for v in (fp, fm):
            if np.size(v) != 1:
                raise ValueError("finite_diff_gradient: f must return a scalar")
        gflat[i] = (float(fp) - float(fm)) / (2.0 * h)
    return grad
