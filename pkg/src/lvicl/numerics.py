"""Dense float64 tensors and a tape-based reverse-mode gradient.

A :class:`Tensor` is an immutable wrapper over a C-contiguous ``float64``
numpy array. Operations are plain functions (with operator sugar on
``Tensor``); while a :class:`GradientTape` is active, any operation that
consumes a watched tensor, or a tensor derived from one, is appended to the
tape together with its vector-Jacobian product. :func:`backward` replays the
tape in reverse.

Only tensors explicitly passed to :meth:`GradientTape.watch` receive
gradients, so frozen tensors can sit anywhere on the path between a trainable
parameter and the loss without being optimized.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

# tanh approximation of GELU
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_CUBIC = 0.044715

_ACTIVE_TAPE: contextvars.ContextVar["GradientTape | None"] = contextvars.ContextVar(
    "lvicl_active_tape", default=None
)


class Tensor:
    """Immutable n-dimensional float64 array."""

    __slots__ = ("_data",)
    __array_priority__ = 1000  # ndarray <op> Tensor dispatches to Tensor

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t = object.__new__(cls)
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else _not_scalar(self)

    def __len__(self) -> int:
        return self._data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self._data, threshold=8)})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape))


def eye(n: int) -> Tensor:
    return Tensor._wrap(np.eye(n))


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    needs: tuple[bool, ...]
    output: Tensor
    vjp: Callable


class GradientTape:
    """Records operations on watched tensors for one backward pass.

    Usage::

        with GradientTape() as tape:
            tape.watch({"w": w})
            loss = mse(w @ x, y)
        grads = backward(tape, loss)

    A tape is single-writer: build it in one thread, consume it once.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._watched: dict[str, Tensor] = {}
        self._live: set[int] = set()
        self._token = None

    def watch(self, params: Mapping[str, Tensor] | str, tensor: Tensor | None = None) -> None:
        if isinstance(params, str):
            params = {params: tensor}
        for name, t in params.items():
            if not isinstance(t, Tensor):
                raise ContractError(f"watch({name!r}): expected Tensor, got {type(t).__name__}")
            self._watched[name] = t
            self._live.add(id(t))

    @property
    def parameters(self) -> dict[str, Tensor]:
        return dict(self._watched)

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._live

    def _push(self, op, inputs, needs, output, vjp):
        self.records.append(_Record(op, inputs, needs, output, vjp))
        self._live.add(id(output))

    def __enter__(self) -> "GradientTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None


def active_tape() -> GradientTape | None:
    return _ACTIVE_TAPE.get()


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    result = Tensor._wrap(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        needs = tuple(tape.tracks(x) for x in inputs)
        if any(needs):
            tape._push(op, inputs, needs, result, vjp)
    return result


def backward(tape: GradientTape, loss: Tensor) -> dict[str, Tensor]:
    """Gradient of a scalar ``loss`` with respect to every watched tensor.

    Watched tensors that the loss does not depend on get a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    watched_ids = {id(t) for t in tape._watched.values()}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for rec in reversed(tape.records):
        key = id(rec.output)
        g = grads.get(key) if key in watched_ids else grads.pop(key, None)
        if g is None:
            continue
        contribs = rec.vjp(g, rec.needs)
        for x, need, c in zip(rec.inputs, rec.needs, contribs):
            if not need or c is None:
                continue
            k = id(x)
            grads[k] = grads[k] + c if k in grads else c
    return {
        name: Tensor._wrap(grads[id(t)] if id(t) in grads else np.zeros(t.shape))
        for name, t in tape._watched.items()
    }


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _emit("add", a._data + b._data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _emit("sub", a._data - b._data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g, needs):
        return (
            _unbroadcast(g * b._data, a.shape) if needs[0] else None,
            _unbroadcast(g * a._data, b.shape) if needs[1] else None,
        )

    return _emit("mul", a._data * b._data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a._data / b._data

    def vjp(g, needs):
        return (
            _unbroadcast(g / b._data, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b._data, b.shape) if needs[1] else None,
        )

    return _emit("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a._data, (a,), lambda g, needs: (-g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x._data > 0
    return _emit("relu", np.where(mask, x._data, 0.0), (x,), lambda g, needs: (g * mask,))


def gelu(x) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = as_tensor(x)
    v = x._data
    sq = v * v
    inner = GELU_SQRT_2_OVER_PI * v * (1.0 + GELU_CUBIC * sq)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g, needs):
        dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _emit("gelu", out, (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """``c[..., i, j] = sum_t a[..., i, t] * b[..., t, j]`` with batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    k = a.shape[-1]
    if b.ndim == 2:
        # one GEMM over all leading rows instead of a per-batch loop
        n = b.shape[1]
        out = (a._data.reshape(-1, k) @ b._data).reshape(a.shape[:-1] + (n,))
    else:
        try:
            out = np.matmul(a._data, b._data)
        except ValueError:
            raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g, needs):
        ga = gb = None
        if b.ndim == 2:
            g2 = g.reshape(-1, n)
            if needs[0]:
                ga = (g2 @ b._data.T).reshape(a.shape)
            if needs[1]:
                gb = a._data.reshape(-1, k).T @ g2
        else:
            if needs[0]:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b._data, -1, -2)), a.shape)
            if needs[1]:
                gb = _unbroadcast(np.matmul(np.swapaxes(a._data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x._data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g, needs: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x._data, axes), (x,), lambda g, needs: (np.transpose(g, inverse),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x._data[idx]

    def vjp(g, needs):
        full = np.zeros(x.shape)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _emit("getitem", np.array(out, dtype=np.float64), (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat of an empty sequence")
    try:
        out = np.concatenate([t._data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("stack of an empty sequence")
    try:
        out = np.stack([t._data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in ts]}") from None

    def vjp(g, needs):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _emit("stack", out, ts, vjp)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x._data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _emit("broadcast_to", out, (x,), lambda g, needs: (_unbroadcast(g, x.shape),))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x._data, axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[i] for i in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# fused blocks


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each length-d slice: ``gamma * (x - mean) / sqrt(var + eps) + beta``.

    Uses the population variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d} of {x.shape}"
        )
    if eps < 0:
        raise ContractError(f"layer_norm: eps must be non-negative, got {eps}")
    v = x._data
    centered = v - v.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma._data + beta._data

    def vjp(g, needs):
        gx = gg = gb = None
        if needs[0]:
            dxhat = g * gamma._data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if needs[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", out, (x, gamma, beta), vjp)


_MASKS: dict[int, np.ndarray] = {}


def _future_mask(T: int) -> np.ndarray:
    mask = _MASKS.get(T)
    if mask is None:
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        mask.setflags(write=False)
        _MASKS[T] = mask
    return mask


def causal_softmax(scores) -> Tensor:
    """Row-wise softmax of a ``[..., T, T]`` score matrix over columns ``0..t``.

    Entries above the diagonal are exactly zero.
    """
    scores = as_tensor(scores)
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"causal_softmax needs square trailing dims, got {scores.shape}")
    mask = _future_mask(scores.shape[-1])
    if scores.size == 0:
        p = np.zeros(scores.shape)
    else:
        s = np.where(mask, -np.inf, scores._data)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("causal_softmax", p, (scores,), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x._data - x._data.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, needs):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", p, (x,), vjp)


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding on the last axis (half-split pairing).

    ``x`` is ``[..., T, dh]``; ``cos``/``sin`` are constant ``[T, dh]`` tables.
    """
    x = as_tensor(x)
    half = x.shape[-1] // 2
    v = x._data
    rotated = np.concatenate([-v[..., half:], v[..., :half]], axis=-1)
    out = v * cos + rotated * sin

    def vjp(g, needs):
        gs = g * sin
        return (g * cos + np.concatenate([gs[..., half:], -gs[..., :half]], axis=-1),)

    return _emit("rotary", out, (x,), vjp)


# ---------------------------------------------------------------------------
# verification


def _scalar_value(value) -> float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(v):
        raise NumericalError(f"objective returned a non-finite value ({v})")
    return v


def finite_difference_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` maps a dict of named tensors to a scalar tensor. Returns the maximum
    over all coordinates of ``|analytic - numeric| / max(1, |numeric|)``.
    ``names`` restricts the comparison to a subset of ``params``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"finite difference step must lie in (0, 1e-2], got {eps}")
    params = dict(params)
    with GradientTape() as tape:
        tape.watch(params)
        loss = f(params)
    _scalar_value(loss)
    analytic = backward(tape, loss)

    worst = 0.0
    for name in names if names is not None else params:
        base = params[name].numpy()
        grad = analytic[name].numpy().reshape(-1)
        for i in range(base.size):
            shifted = []
            for step in (eps, -eps):
                coords = base.copy().reshape(-1)
                coords[i] += step
                shifted.append(_scalar_value(f({**params, name: Tensor(coords.reshape(base.shape))})))
            numeric = (shifted[0] - shifted[1]) / (2.0 * eps)
            worst = max(worst, abs(grad[i] - numeric) / max(1.0, abs(numeric)))
    return worst
