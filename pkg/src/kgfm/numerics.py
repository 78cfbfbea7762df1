"""
Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every forward pass executed inside ``with Tape():`` records
its ops; ``backward`` walks that record once in reverse. Outside a tape the
same ops just compute values, which is how inference runs.

Every op refuses NaN/Inf in its result and names itself when it does.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import KGFMError, NonFiniteError, ShapeError

log = logging.getLogger("kgfm.numerics")

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
Params = Dict[str, "Tensor"]


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None, copy: bool = True):
        self.data = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __getitem__(self, key: Any) -> "Tensor":
        return slice_(self, key)


# -------------------------
# Tape
# -------------------------

@dataclass
class _Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class _TapeStack(threading.local):
    def __init__(self) -> None:
        self.stack: List["Tape"] = []


_ACTIVE = _TapeStack()


class Tape:
    """Ordered record of the ops of one forward pass."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.stack.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _ACTIVE.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _ACTIVE.stack[-1] if _ACTIVE.stack else None


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


as_tensor = _as_tensor


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op)
    return arr


def _emit(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray,
          backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    _check_finite(op, out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result = Tensor(out, requires_grad=True, copy=False)
        tape.nodes.append(_Node(op, inputs, result, backward))
        return result
    return Tensor(out, copy=False)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -------------------------
# Ops
# -------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],))
    if b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ")

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), a.data @ b.data, backward)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError("concat", *(x.shape for x in ts), detail=f"axis={axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit("concat", ts, np.concatenate([t.data for t in ts], axis=ax),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts or any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack", *(t.shape for t in ts))
    ax = axis % (ts[0].ndim + 1)
    return _emit("stack", ts, np.stack([t.data for t in ts], axis=ax),
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))))


def sigmoid(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    s = expit(a.data)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _emit("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def relu(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _emit("relu", (a,), np.where(on, a.data, 0.0), lambda g: (g * on,))


def softmax_rows(a: ArrayLike) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", (a,), s, backward)


def slice_(a: ArrayLike, key: Any) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as e:
        raise ShapeError("slice", a.shape, detail=str(e)) from None

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return _emit("slice", (a,), np.array(out, dtype=np.float64), backward)


def gather_rows(table: ArrayLike, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; the embedding-table op."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise ShapeError("gather_rows", table.shape, ids.shape, detail="id out of range")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        return (full,)

    return _emit("gather_rows", (table,), table.data[ids], backward)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: ArrayLike, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def sum_(a: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), np.asarray(out, dtype=np.float64), backward)


def mean(a: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean", a.shape, detail="empty tensor")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _emit("mean", (a,), np.asarray(out, dtype=np.float64), backward)


_OPS: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softmax_rows": softmax_rows,
    "slice": slice_,
    "gather_rows": gather_rows,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum_,
    "mean": mean,
}


def forward_op(op_kind: str, *inputs: Any, **kwargs: Any) -> Tensor:
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise KGFMError(f"unknown op '{op_kind}'") from None
    return fn(*inputs, **kwargs)


# -------------------------
# Backward
# -------------------------

def backward(loss: Tensor, params: Mapping[str, Tensor], tape: Optional[Tape] = None) -> Dict[str, np.ndarray]:
    """
    Total derivative of a scalar ``loss`` w.r.t. each tensor in ``params``.
    Parameters the loss does not depend on get zeros.
    """
    tape = tape or active_tape()
    if tape is None:
        raise KGFMError("backward: no active tape")
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        local = node.backward(g)
        for inp, gi in zip(node.inputs, local):
            if gi is None or not inp.requires_grad:
                continue
            _check_finite(f"{node.op} (backward)", gi)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)

    return {name: grads.get(id(p), np.zeros(p.shape)).reshape(p.shape) for name, p in params.items()}


# -------------------------
# Loss, init, optimizer
# -------------------------

def mse(pred: Tensor, target: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error over the entries where ``mask`` is 1."""
    target_arr = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if target_arr.shape != pred.shape:
        raise ShapeError("mse", pred.shape, target_arr.shape)
    if mask is None:
        diff = sub(pred, target_arr)
        return mean(mul(diff, diff))
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != pred.shape:
        raise ShapeError("mse", pred.shape, m.shape, detail="mask")
    count = float(m.sum())
    if count == 0:
        raise KGFMError("mse: every entry is masked, mean is undefined")
    # masked targets may be NaN (missing), keep them out of the graph
    diff = sub(pred, np.where(m > 0, target_arr, 0.0))
    return mul(sum_(mul(mul(diff, diff), m)), 1.0 / count)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent seeded stream; ``stream`` keys sub-streams (site, component, ...)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def init_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def init_linear(rng: np.random.Generator, params: Params, prefix: str, fan_in: int, fan_out: int) -> None:
    params[f"{prefix}.W"] = init_uniform(rng, (fan_in, fan_out), fan_in, f"{prefix}.W")
    params[f"{prefix}.b"] = init_uniform(rng, (fan_out,), fan_in, f"{prefix}.b")


def linear(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return add(matmul(x, params[f"{prefix}.W"]), params[f"{prefix}.b"])


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update, in place on ``params``."""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise KGFMError(f"adam_step: gradient keys do not match parameters: {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, detail=name)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = _check_finite(f"adam_step[{name}]", p.data - update)
    return params


class Adam:
    def __init__(self, params: Mapping[str, Tensor], learning_rate: float = 1e-3, **kwargs: float):
        self.params = params
        self.state = AdamState(learning_rate=learning_rate, **kwargs)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        adam_step(self.state, self.params, grads)


def fit_step(loss_fn: Callable[[], Tensor], optimizer: Adam) -> float:
    """Forward on a fresh tape, backward, one optimizer step. Returns the loss."""
    with Tape() as tape:
        loss = loss_fn()
        grads = backward(loss, optimizer.params, tape)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError("loss")
    optimizer.step(grads)
    return value


# -------------------------
# Gradient checking
# -------------------------

def gradcheck(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
              atol: float = 1e-8, entries: Optional[Iterable[Tuple[str, int]]] = None) -> float:
    """
    Max relative error between analytic gradients and central differences.

    Entries whose absolute difference is within ``atol`` count as exact.
    ``entries`` restricts the check to (param name, flat index) pairs.
    """
    with Tape() as tape:
        loss = loss_fn()
        analytic = backward(loss, params, tape)

    if entries is None:
        entries = [(name, i) for name, p in params.items() for i in range(p.size)]

    worst = 0.0
    for name, i in entries:
        p = params[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        a = analytic[name].reshape(-1)[i]
        diff = abs(a - numeric)
        if diff <= atol:
            continue
        worst = max(worst, diff / max(abs(a), abs(numeric)))
    return worst


# -------------------------
# Feature scaling
# -------------------------

@dataclass
class Standardizer:
    """Per-column z-score; NaNs are ignored when fitting and pass through."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise ShapeError("Standardizer.fit", rows.shape, detail="need (n, k) rows")
        finite = np.isfinite(rows)
        if not finite.any(axis=0).all():
            raise KGFMError("Standardizer.fit: a column has no finite value")
        filled = np.where(finite, rows, 0.0)
        count = finite.sum(axis=0)
        mu = filled.sum(axis=0) / count
        var = (np.where(finite, rows - mu, 0.0) ** 2).sum(axis=0) / count
        sd = np.sqrt(var)
        return cls(mu, np.where(sd > 1e-12, sd, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.mean": self.mean, f"{prefix}.std": self.std}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str) -> "Standardizer":
        return cls(np.asarray(arrays[f"{prefix}.mean"]), np.asarray(arrays[f"{prefix}.std"]))
