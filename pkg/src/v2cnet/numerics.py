"""Differentiable array primitives, reverse-mode gradients and the Adam optimizer.

Every op takes and returns :class:`Tensor` objects holding float64 numpy
arrays. Ops accept leading batch axes; the feature axis is always last and,
for the temporal ops, time is the second to last axis. When gradient
recording is enabled and an input requires a gradient, the op stores its
parents and a closure mapping the output gradient to the input gradients.
:func:`backward` walks that graph and accumulates into :class:`Parameter`.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("value", "op", "_parents", "_backward")

    def __init__(self, value, op: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return bool(self._parents)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

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

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf. ``grad`` always has the shape of ``value``."""

    __slots__ = ("grad", "name")

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=DTYPE, copy=True))
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return True

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.op = op
    out._parents = ()
    out._backward = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(av * bv, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def total(x: Tensor, axis=None) -> Tensor:
    """Sum over ``axis`` (all axes by default)."""
    shape = x.shape
    if axis is None:
        return _record(np.asarray(x.value.sum()), "sum", (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % len(shape)
    return _record(x.value.sum(axis=ax), "sum", (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Tensor) -> Tensor:
    return mul(total(x), 1.0 / x.value.size)


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = expit(x.value)
    return _record(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def tanh_act(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _record(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    on = x.value > 0
    return _record(np.where(on, x.value, 0.0), "relu", (x,), lambda g: (g * on,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row max."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax needs at least one entry")
    e = np.exp(x.value - x.value.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, "softmax", (x,), back)


def log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# linear maps and shape ops


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``W @ x + b`` applied to the last axis of ``x``; ``W`` is (d_out, d_in)."""
    x = as_tensor(x)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"affine: input x{list(x.shape)} does not match weight W{list(W.shape)}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(
            f"affine: bias b{list(b.shape)} does not match weight W{list(W.shape)}")
    xv, Wv = x.value, W.value
    y = xv @ Wv.T
    if b is not None:
        y = y + b.value
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        grads = [g @ Wv, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _record(y, "affine", parents, back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    return _record(value, "concat", tensors, lambda g: np.split(g, splits, axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.stack([t.value for t in tensors], axis=axis)
    n = len(tensors)
    return _record(value, "stack", tensors,
                   lambda g: [np.take(g, i, axis=axis) for i in range(n)])


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (drops the axis)."""
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _record(np.take(x.value, index, axis=axis), "take", (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.value.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# temporal ops over (..., T, d)


def temporal_conv(X: Tensor, K: Tensor, b: Tensor) -> Tensor:
    """Same-length convolution along time with zero padding of ``w // 2`` frames.

    ``K`` has shape (w, d_in, d_out) with odd ``w``;
    ``out[t, o] = b[o] + sum_{j,i} X[t + j - w//2, i] * K[j, i, o]``.
    """
    X = as_tensor(X)
    if K.value.ndim != 3:
        raise DimensionError(f"temporal_conv: kernel must be (w, d_in, d_out), got {list(K.shape)}")
    w, d_in, d_out = K.shape
    if w % 2 != 1:
        raise DimensionError(f"temporal_conv: kernel width must be odd, got {w}")
    if X.value.ndim < 2 or X.shape[-1] != d_in:
        raise DimensionError(
            f"temporal_conv: input X{list(X.shape)} does not match kernel K{list(K.shape)}")
    if b.shape != (d_out,):
        raise DimensionError(f"temporal_conv: bias {list(b.shape)} does not match d_out={d_out}")
    T = X.shape[-2]
    if T < 1:
        raise DimensionError("temporal_conv: empty sequence")
    half = w // 2
    lead = X.shape[:-2]
    xv = X.value.reshape((-1, T, d_in))
    padded = np.zeros((xv.shape[0], T + 2 * half, d_in))
    padded[:, half:half + T] = xv
    # cols[n, t, j*d_in + i] = padded[n, t + j, i]
    cols = np.concatenate([padded[:, j:j + T] for j in range(w)], axis=-1)
    Kf = K.value.reshape(w * d_in, d_out)
    y = cols @ Kf + b.value

    def back(g):
        g3 = g.reshape(-1, T, d_out)
        dK = (cols.reshape(-1, w * d_in).T @ g3.reshape(-1, d_out)).reshape(w, d_in, d_out)
        db = g3.sum(axis=(0, 1))
        dcols = g3 @ Kf.T
        dpad = np.zeros_like(padded)
        for j in range(w):
            dpad[:, j:j + T] += dcols[..., j * d_in:(j + 1) * d_in]
        dX = dpad[:, half:half + T].reshape(lead + (T, d_in))
        return dX, dK, db

    return _record(y.reshape(lead + (T, d_out)), "temporal_conv", (X, K, b), back)


def temporal_maxpool(X: Tensor, width: int, stride: int) -> Tensor:
    """Max over windows ``[t*stride, t*stride + width)`` clipped to the sequence.

    Produces ``ceil(T / stride)`` steps. Gradient goes to the first maximum
    in each window.
    """
    X = as_tensor(X)
    if width < 1 or stride < 1:
        raise ValueError("temporal_maxpool: width and stride must be >= 1")
    T = X.shape[-2]
    if T == 0:
        raise DimensionError("temporal_maxpool: empty sequence")
    n_out = -(-T // stride)
    xv = X.value
    outs, args = [], []
    for t in range(n_out):
        lo = t * stride
        win = xv[..., lo:min(lo + width, T), :]
        a = win.argmax(axis=-2)
        args.append(a + lo)
        outs.append(np.take_along_axis(win, a[..., None, :], axis=-2)[..., 0, :])
    y = np.stack(outs, axis=-2)
    idx = np.stack(args, axis=-2)

    def back(g):
        dX = np.zeros_like(xv)
        # windows can overlap when width > stride, so scatter one output step at a time
        for t in range(n_out):
            np.put_along_axis(
                dX, idx[..., t:t + 1, :],
                np.take_along_axis(dX, idx[..., t:t + 1, :], axis=-2) + g[..., t:t + 1, :],
                axis=-2)
        return (dX,)

    return _record(y, "temporal_maxpool", (X,), back)


# ---------------------------------------------------------------------------
# losses


def _check_one_hot(target: np.ndarray) -> None:
    if not (np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=-1) == 1)):
        raise ValueError("sigmoid_cross_entropy: target must be one-hot")


def sigmoid_cross_entropy(logits: Tensor, target) -> Tensor:
    """Sum over the last axis of per-class binary cross-entropies.

    Uses ``max(l, 0) - l*y + log(1 + exp(-|l|))``. Leading axes are kept.
    """
    logits = as_tensor(logits)
    y = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=DTYPE)
    if y.shape != logits.shape:
        raise DimensionError(
            f"sigmoid_cross_entropy: logits{list(logits.shape)} vs target{list(y.shape)}")
    _check_one_hot(y)
    lv = logits.value
    loss = (np.maximum(lv, 0.0) - lv * y + np.log1p(np.exp(-np.abs(lv)))).sum(axis=-1)
    s = expit(lv)
    return _record(loss, "sigmoid_xent", (logits,),
                   lambda g: (np.expand_dims(g, -1) * (s - y),))


def softmax_cross_entropy(logits: Tensor, target_index) -> Tensor:
    """``-log softmax(logits)[target]`` over the last axis.

    ``target_index`` is an int (for 1-d logits) or an int array matching the
    leading axes of ``logits``; the result has the target's shape.
    """
    logits = as_tensor(logits)
    k = logits.shape[-1]
    idx = np.asarray(target_index)
    if idx.shape != logits.shape[:-1]:
        raise DimensionError(
            f"softmax_cross_entropy: targets {list(idx.shape)} vs logits {list(logits.shape)}")
    if not np.issubdtype(idx.dtype, np.integer) or np.any(idx < 0) or np.any(idx >= k):
        raise ValueError(f"softmax_cross_entropy: target index out of range [0, {k})")
    logp = log_softmax(logits.value)
    loss = -np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]

    def back(g):
        d = np.exp(logp)
        np.put_along_axis(d, idx[..., None],
                          np.take_along_axis(d, idx[..., None], axis=-1) - 1.0, axis=-1)
        return (np.expand_dims(g, -1) * d,)

    return _record(loss, "softmax_xent", (logits,), back)


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> None:
    """Accumulate ``d root / d p`` into ``p.grad`` for every reachable Parameter.

    ``root`` must be a scalar produced by an op. Gradients add to whatever
    the parameters already hold; call ``zero_grad`` between batches.
    """
    if root.op is None or isinstance(root, Parameter):
        raise StateError("backward() needs the output of a forward computation")
    if root.value.size != 1:
        raise DimensionError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      epsilon: float = 1e-6) -> float:
    """Max relative error between backward() and central differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    The relative error of one coordinate is
    ``|g_an - g_fd| / max(1e-8, |g_an| + |g_fd|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    zero_grads(params)
    loss = loss_fn()
    if not np.isfinite(loss.value).all():
        raise NumericError("loss is not finite")
    backward(loss)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad.copy()
            flat = p.value.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + epsilon
                up = float(loss_fn().value)
                flat[k] = orig - epsilon
                down = float(loss_fn().value)
                flat[k] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"loss is not finite while perturbing {p.name}[{k}]")
                fd = (up - down) / (2.0 * epsilon)
                an = analytic.reshape(-1)[k]
                err = abs(an - fd) / max(1e-8, abs(an) + abs(fd))
                worst = max(worst, err)
    zero_grads(params)
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def like(cls, param: Parameter) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), 0)


def adam_step(param: Parameter, state: AdamState, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    if state.first_moment.shape != param.value.shape:
        raise DimensionError(f"adam state shape does not match parameter {param.name}")
    g = param.grad
    state.step_count += 1
    t = state.step_count
    state.first_moment = beta1 * state.first_moment + (1.0 - beta1) * g
    state.second_moment = beta2 * state.second_moment + (1.0 - beta2) * g * g
    m_hat = state.first_moment / (1.0 - beta1 ** t)
    v_hat = state.second_moment / (1.0 - beta2 ** t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Adam:
    """Adam over a named parameter dict; states are keyed by parameter name."""

    params: dict[str, Parameter]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states.setdefault(name, AdamState.like(p))

    def zero_grad(self) -> None:
        zero_grads(self.params.values())

    def step(self) -> None:
        for name, p in self.params.items():
            adam_step(p, self.states[name], self.lr, self.beta1, self.beta2, self.eps)
