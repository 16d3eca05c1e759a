"""Dense tensors with reverse-mode gradients, the LSTM cell, Adam and a
finite-difference gradient checker.

Every differentiable function here takes and returns :class:`Tensor`.  A
tensor built from inputs that require gradients remembers its parents and a
closure that pushes the incoming gradient back to them; ``Tensor.backward``
walks that graph in reverse topological order.

Broadcasting is deliberately absent.  The only shape-mixing operation is
:func:`add_bias`, which adds a vector to every row of a matrix.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

DEFAULT_DTYPE = np.float64

ParamSet = "OrderedDict[str, np.ndarray]"


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default 1 for a scalar) to every ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Rows of ``x`` mapped through ``weight`` (out x in) plus ``bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: a._accumulate(g * c))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n vector to each row of an (m x n) matrix."""
    a, bias = as_tensor(a), as_tensor(bias)
    if a.data.ndim != 2 or bias.shape != (a.shape[1],):
        raise ShapeError(f"add_bias: {bias.shape} cannot be added over rows of {a.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(a.data + bias.data, (a, bias), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (a,), lambda g: a._accumulate(g * s * (1.0 - s)))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: a._accumulate(g * (1.0 - t * t)))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "add": add, "mul": mul}


def elementwise(op: str, *args: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Reshaping and indexing


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(out, tuple(tensors), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)

    return _result(a.data[:, start:stop], (a,), backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a matrix (embedding lookup); repeated ids accumulate."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _result(table.data[ids], (table,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def total(tensors: Iterable[Tensor]) -> Tensor:
    """Sum of scalar tensors."""
    tensors = [as_tensor(t) for t in tensors]
    value = np.zeros((), dtype=tensors[0].data.dtype) if tensors else np.zeros(())
    for t in tensors:
        value = value + t.data.reshape(())

    def backward(g):
        for t in tensors:
            if t.requires_grad:
                t._accumulate(np.broadcast_to(g, t.shape))

    return _result(np.asarray(value), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Pooling and losses


def _argmax_lowest(x: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first occurrence of the maximum
    return np.argmax(x, axis=0)


def max_pool_set(vectors) -> Tensor:
    """Coordinatewise maximum over a set of vectors.

    ``vectors`` is an (M x P) tensor or a list of M length-P tensors.  The
    gradient of each output coordinate goes entirely to the row that
    attained the maximum, ties going to the lowest index.
    """
    if isinstance(vectors, (list, tuple)):
        if not vectors:
            raise ValueError("max_pool_set needs at least one vector")
        vectors = concat([reshape(as_tensor(v), (1, -1)) for v in vectors], axis=0)
    x = as_tensor(vectors)
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ValueError("max_pool_set needs a nonempty (M x P) set")
    arg = _argmax_lowest(x.data)
    cols = np.arange(x.shape[1])

    def backward(g):
        full = np.zeros_like(x.data)
        full[arg, cols] = g
        x._accumulate(full)

    return _result(x.data[arg, cols], (x,), backward)


def segment_max(x: Tensor, offsets) -> Tensor:
    """Row-block max pooling: block b is rows offsets[b]:offsets[b+1]."""
    x = as_tensor(x)
    offsets = np.asarray(offsets)
    if np.any(np.diff(offsets) < 1):
        raise ValueError("segment_max: every set must have at least one row")
    cols = np.arange(x.shape[1])
    args = [lo + _argmax_lowest(x.data[lo:hi]) for lo, hi in zip(offsets[:-1], offsets[1:])]
    rows = np.stack(args)
    out = x.data[rows, cols]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, np.broadcast_to(cols, rows.shape)), g)
        x._accumulate(full)

    return _result(out, (x,), backward)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Summed -log softmax(logits)[target], optionally weighted per row.

    ``logits`` may be a single length-V vector with an integer target.
    """
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    if single:
        z = z[None, :]
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: {t.shape[0]} targets for {z.shape[0]} rows")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise IndexError("softmax_cross_entropy: target id out of range")
    w = np.ones(z.shape[0], dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    rows = np.arange(z.shape[0])
    logp = log_softmax(z)
    loss = -(w * logp[rows, t]).sum()

    def backward(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= (w * g)[:, None]
        logits._accumulate(d[0] if single else d)

    return _result(np.asarray(loss), (logits,), backward)


def sigmoid_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Summed binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    logits = as_tensor(logits)
    z = logits.data.reshape(-1)
    y = np.asarray(targets, dtype=z.dtype).reshape(-1)
    if y.shape != z.shape:
        raise ShapeError("sigmoid_cross_entropy: one target per logit required")
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=z.dtype).reshape(-1)
    # -[y log s + (1-y) log(1-s)] written without overflow
    loss = (w * (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))).sum()
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        logits._accumulate(((s - y) * w * g).reshape(logits.shape))

    return _result(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# LSTM


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step over a batch of rows.

    ``weight`` is (4H x (E_in + H)) with gate blocks stacked in the order
    input, forget, output, candidate; ``bias`` has length 4H.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hidden = h.shape[1]
    if weight.shape != (4 * hidden, x.shape[1] + hidden) or c.shape != h.shape:
        raise ShapeError(
            f"lstm_cell: weight {weight.shape} does not fit input {x.shape}, state {h.shape}/{c.shape}"
        )
    gates = linear(concat([x, h], axis=1), weight, bias)
    ifo = sigmoid(slice_cols(gates, 0, 3 * hidden))
    g = tanh(slice_cols(gates, 3 * hidden, 4 * hidden))
    i = slice_cols(ifo, 0, hidden)
    f = slice_cols(ifo, hidden, 2 * hidden)
    o = slice_cols(ifo, 2 * hidden, 3 * hidden)
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_params(rng: np.random.Generator, n_in: int, hidden: int, dtype=DEFAULT_DTYPE):
    """Uniform(+-1/sqrt(fan_in)) fused weights, forget bias 1, other biases 0."""
    weight = uniform_init(rng, (4 * hidden, n_in + hidden), n_in + hidden, dtype)
    bias = np.zeros(4 * hidden, dtype=dtype)
    bias[hidden : 2 * hidden] = 1.0
    return weight, bias


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    # per parameter: (worst relative error, flat index, analytic, numeric)
    worst: dict[str, tuple[float, int, float, float]]
    checked: int
    skipped: int

    def format(self) -> str:
        lines = [f"{'parameter':<16} {'rel.err':>10} {'index':>6} {'analytic':>14} {'numeric':>14}"]
        for name, (err, idx, a, n) in self.worst.items():
            lines.append(f"{name:<16} {err:>10.3e} {idx:>6d} {a:>14.6e} {n:>14.6e}")
        lines.append(f"max rel. error {self.max_rel_error:.3e} over {self.checked} coordinates ({self.skipped} skipped)")
        return "\n".join(lines)


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    skip: Callable[[str, int], bool] | None = None,
    numeric_fn: Callable[[Mapping[str, np.ndarray]], object] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` returns ``(loss, grads)``.  Parameters larger than
    ``max_coords`` are checked on a seeded random subsample.  ``skip(name,
    flat_index)`` excludes coordinates at known nondifferentiable points.
    ``numeric_fn(params)``, if given, evaluates the loss for the difference
    quotient instead of ``loss_fn``; pass a higher-precision implementation
    when gradients are small enough for float64 roundoff to dominate.
    Parameters are restored afterwards.
    """
    if numeric_fn is None:
        def numeric_fn(p):
            return loss_fn(p)[0]

    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise NonFiniteError("loss is not finite at the check point")
    rng = np.random.default_rng(seed)
    worst: dict[str, tuple[float, int, float, float]] = {}
    checked = skipped = 0
    for name, p in params.items():
        flat = p.reshape(-1)
        analytic = np.asarray(grads[name]).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        best = (0.0, -1, 0.0, 0.0)
        for k in idx:
            if skip is not None and skip(name, int(k)):
                skipped += 1
                continue
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = numeric_fn(params)
            flat[k] = orig - eps
            f_minus = numeric_fn(params)
            flat[k] = orig
            numeric = float((f_plus - f_minus) / (2 * eps))
            if not np.isfinite(numeric):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{k}]")
            err = rel_error(float(analytic[k]), numeric)
            checked += 1
            if err >= best[0] or best[1] < 0:
                best = (err, int(k), float(analytic[k]), float(numeric))
        worst[name] = best
    max_err = max((w[0] for w in worst.values()), default=0.0)
    return GradCheckReport(max_err, worst, checked, skipped)


def new_paramset(items: Iterable[tuple[str, np.ndarray]]) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, arr in items:
        if name in out:
            raise ValueError(f"duplicate parameter name {name!r}")
        out[name] = arr
    return out


def check_finite(params: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"parameter {name!r} contains non-finite values")
