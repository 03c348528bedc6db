"""Dense float64 arithmetic with a minimal reverse-mode tape.

Values are plain numpy arrays wrapped in :class:`Tensor`. Every array may carry
leading batch dimensions; the last two axes are the matrix axes. Operations on
tensors that belong to a :class:`Tape` are recorded in creation order and
:meth:`Tape.backward` replays them once in reverse.

Tensors without a tape are constants: operations on them only compute values,
which is what inference uses.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping, Sequence

import numpy as np

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("_backward", "_parents", "grad", "name", "tape", "value")

    def __init__(self, value, tape: Tape | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Ordered record of primitive operations.

    ``nodes`` holds every recorded tensor in creation order, so creation order
    is already a topological order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def variable(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), tape=self, name=name)
        self.nodes.append(t)
        return t

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.variable(v, name=k) for k, v in params.items()}

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or parent.tape is None:
                    continue
                g = _unbroadcast(g, parent.shape)
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _result(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite entries in result of shape {value.shape}")
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    out = Tensor(value, tape=tape)
    if tape is not None:
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    with np.errstate(over="ignore", invalid="ignore"):
        out = av @ bv
    return _result(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _result(av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.value > 0
    return _result(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.value > 0, 1.0, slope)
    return _result(x.value * factor, (x,), lambda g: (g * factor,))


def elu(x) -> Tensor:
    x = as_tensor(x)
    neg = np.expm1(np.minimum(x.value, 0.0))
    pos = x.value > 0
    out = np.where(pos, x.value, neg)
    return _result(out, (x,), lambda g: (g * np.where(pos, 1.0, neg + 1.0),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)
    return _result(out, (x,), lambda g: (g / xv,))


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    z = x.value
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def row_softmax(m) -> Tensor:
    return softmax(m, axis=-1)


def sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), (x,), backward)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, splits, axis=axis)

    return _result(np.concatenate([x.value for x in xs], axis=axis), xs, backward)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):])
                for x in xs]
    return concat(expanded, axis=axis)


def take(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.value[index]), (x,), backward)


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    names: Iterable[str] | None = None,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``fn`` maps a dict of tensors to a scalar tensor. The gap for each scalar
    parameter is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-8, 1e-4], got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    watched = tape.watch(base)
    loss = fn(watched)
    tape.backward(loss)

    def evaluate(name, flat_index, delta):
        probe = dict(base)
        arr = base[name].copy()
        arr.reshape(-1)[flat_index] += delta
        probe[name] = arr
        try:
            value = float(fn({k: Tensor(v) for k, v in probe.items()}).value)
        except NonFiniteError:
            value = float("nan")
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite objective when probing {name}[{flat_index}]")
        return value

    worst = 0.0
    for name in names if names is not None else base:
        grad = watched[name].grad
        analytic = np.zeros(base[name].size) if grad is None else grad.reshape(-1)
        for i in range(base[name].size):
            numeric = (evaluate(name, i, eps) - evaluate(name, i, -eps)) / (2 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
