"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions over :class:`Tensor`. When a :class:`Tape` is
active (``with Tape() as tape:``) and an operand is tracked by it, the op is
recorded together with its vector-Jacobian product; ``tape.backward(loss)``
replays the records in reverse. Without an active tape ops are pure numpy.

No implicit broadcasting: binary ops require equal shapes. ``expand`` and
``affine`` are the only ops that replicate data, and they do so explicitly.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Function evaluated to a non-finite value during a gradient check."""


class Tensor:
    __slots__ = ("data", "name", "grad")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, order="C", copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


def _wrap(arr: np.ndarray) -> Tensor:
    # Internal constructor that skips the defensive copy.
    t = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(arr, dtype=DTYPE)
    arr.flags.writeable = False
    t.data = arr
    t.name = None
    t.grad = None
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass(frozen=True)
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


_local = threading.local()


def _active() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops plus a registry of parameters."""

    def __init__(self):
        self.records: list[_Record] = []
        self.params: dict[str, Tensor] = {}
        self._tracked: set[int] = set()

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def watch(self, t: Tensor, name: str | None = None) -> Tensor:
        key = name or t.name
        if key is None:
            raise ValueError("watched tensors need a name")
        if key in self.params and self.params[key] is not t:
            raise ValueError(f"parameter {key!r} registered twice")
        self.params[key] = t
        self._tracked.add(id(t))
        return t

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp, op: str) -> None:
        self.records.append(_Record(out, inputs, vjp, op))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Propagate d(loss) back through the tape.

        Returns gradients keyed by parameter name and also stores them on each
        parameter's ``grad``. The tape is left intact, so calling this again
        replays the same adjoints.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = adj.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or id(inp) not in self._tracked:
                    continue
                k = id(inp)
                if k in adj:
                    adj[k] = adj[k] + gi
                else:
                    adj[k] = gi
        grads = {}
        for name, p in self.params.items():
            g = adj.get(id(p))
            grads[name] = np.zeros_like(p.data) if g is None else np.array(g, dtype=DTYPE)
            p.grad = grads[name]
        return grads


def _emit(out: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    t = _wrap(out)
    tape = _active()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        tape._record(t, inputs, vjp, op)
    return t


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    """``sqrt(a + eps)``; eps keeps the derivative finite at zero."""
    y = np.sqrt(a.data + eps)
    return _emit(y, (a,), lambda g: (0.5 * g / y,), "sqrt")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b``. ``cond`` is a constant."""
    _same_shape("where", a, b)
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != a.shape:
        raise ShapeError(f"where: condition shape {cond.shape} vs operands {a.shape}")
    out = np.where(cond, a.data, b.data)
    return _emit(out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)), "where")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose without axes needs rank 2, got shape {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {parts[0].shape} and {p.shape} disagree off axis {ax}")
    cuts = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _emit(out, parts, lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[start:stop]`` along the first axis."""
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for leading extent {n}")

    def vjp(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _emit(a.data[start:stop], (a,), vjp, "slice_rows")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Replicate ``a`` over new leading axes so that it has ``shape``.

    ``a.shape`` must equal the trailing extents of ``shape``; the adjoint sums
    over the added axes.
    """
    shape = tuple(shape)
    k = len(shape) - a.ndim
    if k < 0 or shape[k:] != a.shape:
        raise ShapeError(f"expand: {a.shape} is not a suffix of {shape}")
    out = np.broadcast_to(a.data, shape)
    lead = tuple(range(k))
    return _emit(out, (a,), lambda g: (g.sum(axis=lead),), "expand")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _emit(ad @ bd, (a, b), vjp, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` applied over the last axis of ``x`` (any leading shape)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} does not fit weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    wd = w.data
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, vjp, "affine")


# ---------------------------------------------------------------------------
# softmax, normalisation, reductions


def softmax_rows(x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with row-max subtraction.

    With ``key_mask`` (boolean, same shape as ``x``) entries where the mask is
    false get weight exactly zero, as if ``-inf`` had been added before the
    softmax; a row with no valid entry is all zeros.
    """
    xd = x.data
    if key_mask is None:
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != x.shape:
            raise ShapeError(f"softmax_rows: key mask {km.shape} vs input {x.shape}")
        m = np.where(km, xd, -np.inf).max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(km, np.exp(np.where(km, xd - m, 0.0)), 0.0)
        s = e.sum(axis=-1, keepdims=True)
        y = e / np.where(s > 0, s, 1.0)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), vjp, "softmax_rows")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Parameter-free normalisation over the last axis."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv
    n = xd.shape[-1]

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).sum(axis=-1, keepdims=True) / n
        return (inv * (g - gm - y * gy),)

    return _emit(y, (x,), vjp, "layer_norm")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g.reshape(()))),), "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis."""
    shape = a.shape
    return _emit(
        a.data.sum(axis=-1), (a,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),), "sum_last"
    )


def norm_last(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the adjoint at a zero vector is zero."""
    ad = a.data
    y = np.sqrt((ad * ad).sum(axis=-1))

    def vjp(g):
        safe = np.where(y > 0, y, 1.0)
        return (ad * (np.where(y > 0, g / safe, 0.0))[..., None],)

    return _emit(y, (a,), vjp, "norm_last")


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(weights * a)`` with constant weights of the same shape."""
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs input {a.shape}")
    return _emit(np.array((w * a.data).sum()), (a,), lambda g: (w * float(g.reshape(())),), "weighted_sum")


def mse(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mse", a, b)
    return mean_all(square(sub(a, b)))


# ---------------------------------------------------------------------------
# gradient checking


ScalarFn = Callable[[Mapping[str, Tensor]], Tensor]


def analytic_grads(f: ScalarFn, params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        ts = {k: tape.watch(Tensor(v, name=k)) for k, v in params.items()}
        loss = f(ts)
    return loss.item(), tape.backward(loss)


def central_differences(f: ScalarFn, params: Mapping[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Componentwise ``(f(p + h) - f(p - h)) / 2h`` for every parameter entry."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}

    def evaluate() -> float:
        v = f({k: Tensor(a, name=k) for k, a in base.items()}).item()
        if not np.isfinite(v):
            raise GradCheckError(f"non-finite function value {v}")
        return v

    out = {}
    for name, arr in base.items():
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * step)
        out[name] = num.reshape(arr.shape)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def grad_errors(f: ScalarFn, params: Mapping[str, np.ndarray], step: float = 1e-5) -> dict[str, float]:
    """Per-parameter max relative error between tape and central differences."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    _, grads = analytic_grads(f, {k: np.array(v, dtype=DTYPE) for k, v in params.items()})
    fd = central_differences(f, params, step)
    return {k: float(relative_errors(grads[k], fd[k]).max()) if fd[k].size else 0.0 for k in fd}


def grad_check(f: ScalarFn, params: Mapping[str, np.ndarray], step: float = 1e-5) -> float:
    """Max over all components of |analytic - central| / max(|analytic|, |central|, 1e-8)."""
    errs = grad_errors(f, params, step)
    return max(errs.values()) if errs else 0.0
