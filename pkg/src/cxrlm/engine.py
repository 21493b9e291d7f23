"""Dense float64 tensors with reverse-mode autodiff on a dynamic tape.

Every operation records a closure that accumulates gradients into its
parents; backward() runs them in reverse topological order. Broadcasting
is restricted to scalars and trailing-suffix shapes (a bias of shape (d,)
against activations of shape (..., d)), which keeps the gradient
book-keeping small and auditable. All values are float64 and results are
bit-identical across runs in single-threaded use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation precondition other than shape was violated."""


class GradCheckError(RuntimeError):
    """finite_diff_check hit a non-finite function value."""


_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        return arr  # ascontiguousarray would promote 0-d to shape (1,)
    return np.ascontiguousarray(arr)


class Tensor:
    """A float64 array plus optional participation in the gradient tape.

    Values are treated as immutable after construction; only .grad mutates
    (during backward). tracked=True marks a leaf whose gradient is wanted.
    """

    __slots__ = ("data", "grad", "tracked", "_parents", "_backward")

    def __init__(self, data, tracked: bool = False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.tracked = bool(tracked)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"expected a scalar tensor, got shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, outside the tape (the stop-gradient primitive)."""
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray):
        """Add an upstream gradient the caller may still reference."""
        if not (self.tracked or self._backward is not None):
            return  # plain constant, not on the tape
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray):
        """Add a freshly-allocated gradient; ownership transfers here."""
        if not (self.tracked or self._backward is not None):
            return
        if self.grad is None:
            self.grad = g.reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ContractError("tensor/tensor division is not part of the engine; multiply by a reciprocal")
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tracked_any(*tensors: Tensor) -> bool:
    return any(t.tracked or t._backward is not None for t in tensors)


def _node(data, parents, backward_fn) -> Tensor:
    """Wrap an op result; untracked subgraphs record nothing."""
    live = tuple(p for p in parents if p.tracked or p._backward is not None)
    if not live:
        return Tensor(data)
    return Tensor(data, _parents=live, _backward=backward_fn)


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into tracked leaves.

    Repeated calls without zero_grad accumulate, by design.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not (loss.tracked or loss._backward is not None):
        raise ContractError("backward needs a tracked loss (no tape attached)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # interior gradients are scratch; free them so leaves keep accumulating cleanly
    for node in topo:
        if node._backward is not None and node is not loss:
            node.grad = None


# -- broadcasting helpers ---------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    """Allow equal shapes, scalar operands, or b a trailing suffix of a."""
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not align "
                     "(only scalar or trailing-suffix broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    ones = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if ones:
        g = g.sum(axis=ones, keepdims=True)
    return g


# -- elementwise and structural ops ----------------------------------------

def add(a: Tensor, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def back(g):
        ga = _unbroadcast(g, a.shape)
        (a._accumulate if ga is g else a._accumulate_owned)(ga)
        gb = _unbroadcast(g, b.shape)
        (b._accumulate if gb is g else b._accumulate_owned)(gb)

    return _node(out_data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def back(g):
        a._accumulate_owned(_unbroadcast(g * b.data, a.shape))
        b._accumulate_owned(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    if exponent == 2.0:  # the overwhelmingly common case; np.power is slow
        out_data = a.data * a.data

        def back_sq(g):
            a._accumulate_owned(g * (2.0 * a.data))

        return _node(out_data, (a,), back_sq)
    out_data = a.data**exponent

    def back(g):
        a._accumulate_owned(g * exponent * a.data ** (exponent - 1.0))

    return _node(out_data, (a,), back)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        a._accumulate_owned(g * out_data)

    return _node(out_data, (a,), back)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def back(g):
        a._accumulate_owned(g / a.data)

    return _node(out_data, (a,), back)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def back(g):
        a._accumulate_owned(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def back(g):
        a._accumulate_owned(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), back)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU (smooth, so finite differences behave)."""
    out_data, t = kernels.gelu_fwd(a.data)

    def back(g):
        a._accumulate_owned(kernels.gelu_bwd(g, a.data, t))

    return _node(out_data, (a,), back)


def absolute(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def back(g):
        a._accumulate_owned(g * np.sign(a.data))

    return _node(out_data, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def back(g):
        a._accumulate(g.reshape(a.shape))

    return _node(out_data, (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def back(g):
        a._accumulate(g.transpose(inverse))

    return _node(out_data, (a,), back)


def tsum(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            a._accumulate_owned(np.broadcast_to(g, a.shape).copy())
        else:
            a._accumulate_owned(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node(out_data, (a,), back)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """table[ids] with scatter-add backward (the embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"ids outside [0, {table.shape[0]})")
    out_data = table.data[ids]

    def back(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate_owned(acc)

    return _node(out_data, (table,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, stacked x 2-D, or stacked x stacked with
    identical leading dims. Gradient flows to both inputs when tracked."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects two tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def back(g):
        if b.ndim == 2:
            a._accumulate_owned(g @ b.data.T)
            k = a.shape[-1]
            b._accumulate_owned(a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[-1]))
        else:
            # contiguous operands keep batched GEMM on the fast path
            a._accumulate_owned(g @ np.ascontiguousarray(np.swapaxes(b.data, -1, -2)))
            b._accumulate_owned(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)) @ g)

    return _node(out_data, (a, b), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if axis in (-1, a.ndim - 1):
        rows = a.data.reshape(-1, a.shape[-1])
        out_data = kernels.softmax_rows(rows).reshape(a.shape)

        def back_rows(g):
            d = kernels.softmax_rows_grad(g.reshape(rows.shape),
                                          out_data.reshape(rows.shape))
            a._accumulate_owned(d.reshape(a.shape))

        return _node(out_data, (a,), back_rows)

    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate_owned((g - inner) * out_data)

    return _node(out_data, (a,), back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned gain and bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    rows = a.data.reshape(-1, d)
    y, xhat, inv = kernels.layer_norm_fwd(rows, gain.data, bias.data, eps)
    out_data = y.reshape(a.shape)

    def back(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(g.reshape(rows.shape), xhat, inv, gain.data)
        gain._accumulate_owned(dgain)
        bias._accumulate_owned(dbias)
        a._accumulate_owned(dx.reshape(a.shape))

    return _node(out_data, (a, gain, bias), back)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy against constant 0/1 targets."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} vs logits {logits.shape}")
    x = logits.data
    out_data = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        logits._accumulate_owned(g * (sig - t))

    return _node(out_data, (logits,), back)


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row -log softmax(logits)[target] for 2-D logits (the hot path)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_rows needs 2-D logits, got {logits.shape}")
    ids = np.asarray(targets, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != logits.shape[0]:
        raise ShapeError(f"targets {ids.shape} vs logits {logits.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= logits.shape[1]):
        raise IndexError(f"targets outside [0, {logits.shape[1]})")
    losses, probs = kernels.softmax_xent(logits.data, ids)

    def back(g):
        logits._accumulate_owned(kernels.softmax_xent_grad(probs, ids, g))

    return _node(losses, (logits,), back)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logits vector."""
    if logits.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy needs 1-D logits, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise ContractError("softmax_cross_entropy: logits contain non-finite values")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} outside [0, {logits.shape[0]})")
    row = reshape(logits, (1, logits.shape[0]))
    return reshape(cross_entropy_rows(row, np.array([target])), ())


def image_gradient(img: Tensor):
    """Forward differences along the last two axes.

    Returns (gx over columns with shape (..., H, W-1), gy over rows with
    shape (..., H-1, W)); both differentiable.
    """
    if img.ndim < 2:
        raise ShapeError(f"image_gradient needs >= 2-D input, got {img.shape}")
    h, w = img.shape[-2], img.shape[-1]
    if h < 2 or w < 2:
        raise ShapeError(f"image_gradient needs extents >= 2, got {h}x{w}")

    gx_data = img.data[..., :, 1:] - img.data[..., :, :-1]
    gy_data = img.data[..., 1:, :] - img.data[..., :-1, :]

    def back_gx(g):
        acc = np.zeros_like(img.data)
        acc[..., :, 1:] += g
        acc[..., :, :-1] -= g
        img._accumulate_owned(acc)

    def back_gy(g):
        acc = np.zeros_like(img.data)
        acc[..., 1:, :] += g
        acc[..., :-1, :] -= g
        img._accumulate_owned(acc)

    return _node(gx_data, (img,), back_gx), _node(gy_data, (img,), back_gy)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step count."""

    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0


def adam_step(params, grads, state: AdamState, lr: float = 3e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8):
    """One bias-corrected Adam update.

    params is a sequence of Tensors, grads the matching gradient arrays.
    Returns (new param Tensors, state); the old Tensors stay untouched.
    """
    if lr <= 0:
        raise ContractError(f"lr must be > 0, got {lr}")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ContractError(f"betas must lie in [0, 1), got {beta1}/{beta2}")
    params = list(params)
    grads = list(grads)
    if len(grads) != len(params):
        raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
             for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    out = []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        new_data = p.data.copy()
        kernels.adam_update(new_data, g, m, v, state.step_count, lr, beta1, beta2, eps_hat)
        out.append(Tensor(new_data, tracked=True))
    return out, state


# -- verification -------------------------------------------------------------

def finite_diff_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Compare autodiff against central differences, coordinate by coordinate.

    Returns max over coordinates of |a - n| / max(1, |a|, |n|).
    """
    if eps <= 0:
        raise ContractError(f"eps must be > 0, got {eps}")
    base = x.data.copy()

    leaf = Tensor(base.copy(), tracked=True)
    loss = f(leaf)
    if loss.data.size != 1:
        raise ContractError(f"f must return a scalar, got shape {loss.shape}")
    backward(loss)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad.copy()

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        vals = []
        points = (saved + eps, saved - eps)
        for point in points:
            flat[i] = point
            y = f(Tensor(base.copy())).data
            if not np.all(np.isfinite(y)):
                flat[i] = saved
                idx = tuple(int(j) for j in np.unravel_index(i, base.shape))
                raise GradCheckError(f"f is non-finite at coordinate {idx} (x={point:g})")
            vals.append(float(np.asarray(y).reshape(())))
        flat[i] = saved
        # the realized step, not 2*eps: keeps exactly-linear functions exact
        num_flat[i] = (vals[0] - vals[1]) / (points[0] - points[1])

    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if base.size else 0.0
