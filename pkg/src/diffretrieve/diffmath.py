"""Differentiable numeric kernels on float64 numpy arrays.

Every kernel returns a :class:`Tensor`.  When a :class:`GradTape` is active
and one of the inputs is being watched, the kernel records a closure that
maps the output cotangent to input cotangents; ``GradTape.gradient`` replays
those closures in reverse creation order, which is a reverse topological
order of the recorded graph.

    >>> with GradTape() as tape:
    ...     x = tape.watch(Tensor([3.0, 4.0]))
    ...     y = l2_dist(x, Tensor([0.0, 0.0]))
    >>> tape.gradient(y, [x])[0]
    array([0.6, 0.8])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Stand-in for -inf inside logits; softmax maps anything at or below half of it to 0.
SENTINEL = -1e30
GUMBEL_EPS = 1e-12

PRIMITIVES: dict[str, Callable] = {}


class InvalidArgument(ValueError):
    pass


class DegenerateDistribution(ValueError):
    pass


class GradCheckError(ArithmeticError):
    pass


def _register(fn):
    PRIMITIVES[fn.__name__.rstrip("_")] = fn
    return fn


_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "diffretrieve_tape", default=None
)


class Tensor:
    """A float64 array that kernels can record on a tape."""

    __slots__ = ("value",)
    __array_priority__ = 1000

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def item(self) -> float:
        return float(self.value.item())

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor({self.value!r})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class GradTape:
    """Records kernel applications on watched tensors for one backward pass.

    The active tape is held in a context variable, so independent tapes in
    separate threads or contexts do not interfere.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor):
        for t in tensors:
            if not isinstance(t, Tensor):
                raise InvalidArgument("only Tensor instances can be watched")
            self._tracked.add(id(t))
            self._watched.append(t)
        return tensors[0] if len(tensors) == 1 else tensors

    def _maybe_record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        if any(id(x) in self._tracked for x in inputs):
            self._records.append((out, inputs, vjp))
            self._tracked.add(id(out))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if target.value.size != 1:
            raise InvalidArgument("gradient target must be a scalar")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for x, gx in zip(inputs, vjp(g)):
                if gx is None or id(x) not in self._tracked:
                    continue
                key = id(x)
                grads[key] = grads[key] + gx if key in grads else gx
        return [grads.get(id(s), np.zeros_like(s.value)) for s in sources]


def _emit(value, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active_tape.get()
    if tape is not None:
        tape._maybe_record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions


@_register
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


@_register
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


@_register
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


@_register
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


@_register
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.value, (a,), lambda g: (-g,))


@_register
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _emit(out, (a,), lambda g: (g * out,))


@_register
def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _emit(out, (a,), lambda g: (g / a.value,))


@_register
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


@_register
def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.value > 0
    return _emit(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


@_register
def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


@_register
def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` for a constant floor; no gradient where clamped."""
    a = as_tensor(a)
    keep = a.value > floor
    return _emit(np.where(keep, a.value, floor), (a,), lambda g: (g * keep,))


@_register
def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(a.value.sum(axis=axis), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis) / float(count)


# ---------------------------------------------------------------------------
# shape manipulation


@_register
def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return (out,)

    return _emit(a.value[key], (a,), vjp)


@_register
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


@_register
def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.value.T, (a,), lambda g: (g.T,))


@_register
def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise InvalidArgument("concat of an empty list")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([t.value for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


@_register
def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise InvalidArgument("stack of an empty list")
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise InvalidArgument("stack requires equal shapes")
    return _emit(
        np.stack([t.value for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# ---------------------------------------------------------------------------
# linear algebra and the retrieval kernels


@_register
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 or b.ndim > 2 or a.ndim == 0 or b.ndim == 0:
        raise InvalidArgument("matmul supports 1-d and 2-d operands only")
    if a.shape[-1] != b.shape[0]:
        raise InvalidArgument(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, (a, b), vjp)


@_register
def softmax_tau(logits, tau: float) -> Tensor:
    """Temperature softmax over the last axis.

    Entries at or below ``SENTINEL / 2`` (including ``-inf``) get exactly zero
    mass.  Computed as ``exp(l/tau - max)`` normalized, so scaling the logits by
    ``1/tau`` and using ``tau = 1`` gives bitwise the same result.
    """
    if not tau > 0:
        raise InvalidArgument(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    x = logits.value
    if np.isnan(x).any() or np.isposinf(x).any():
        raise InvalidArgument("logits must be finite or the -inf sentinel")
    dead = x <= SENTINEL / 2
    if dead.all(axis=-1).any():
        raise DegenerateDistribution("every logit is -inf")
    z = np.where(dead, -np.inf, x / tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / tau,)

    return _emit(s, (logits,), vjp)


@_register
def l2_dist(a, b) -> Tensor:
    """Euclidean distance over the last axis; leading axes broadcast.

    The gradient at zero distance is taken to be zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise InvalidArgument(f"dimension mismatch {a.shape} vs {b.shape}")
    diff = a.value - b.value
    d = np.sqrt(np.sum(diff * diff, axis=-1))

    def vjp(g):
        safe = np.where(d > 0, d, 1.0)
        unit = np.where((d > 0)[..., None], diff / safe[..., None], 0.0)
        ga = np.asarray(g)[..., None] * unit
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga, b.shape)

    return _emit(d, (a, b), vjp)


@_register
def group_max(a, group_of: np.ndarray, n_groups: int) -> Tensor:
    """Max over the members of each group of a 1-d tensor (max pooling)."""
    a = as_tensor(a)
    x = a.value
    group_of = np.asarray(group_of)
    out = np.full(n_groups, -np.inf)
    np.maximum.at(out, group_of, x)
    if np.isneginf(out).any():
        raise InvalidArgument("group_max: empty group")
    winner = np.full(n_groups, -1)
    for i in range(len(x) - 1, -1, -1):
        if x[i] == out[group_of[i]]:
            winner[group_of[i]] = i

    def vjp(g):
        grad = np.zeros_like(x)
        np.add.at(grad, winner, g)
        return (grad,)

    return _emit(out, (a,), vjp)


def gumbel_noise(rng: np.random.Generator, count) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log u)`` with u clamped away from 0 and 1."""
    u = rng.random(count)
    u = np.clip(u, GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


# ---------------------------------------------------------------------------
# layers


@dataclass
class AffineParams:
    weight: np.ndarray | Tensor  # (out_dim, in_dim)
    bias: np.ndarray | Tensor  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return value_of(self.weight).shape[1]

    @property
    def out_dim(self) -> int:
        return value_of(self.weight).shape[0]


def init_affine(rng: np.random.Generator, in_dim: int, out_dim: int) -> AffineParams:
    w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))
    return AffineParams(w, np.zeros(out_dim))


def init_mlp(rng: np.random.Generator, dims: Sequence[int]) -> list[AffineParams]:
    return [init_affine(rng, i, o) for i, o in zip(dims[:-1], dims[1:])]


def affine_forward(params: AffineParams, x) -> Tensor:
    """``W x + b`` for a vector, or row-wise for a batch of shape (B, in_dim)."""
    x = as_tensor(x)
    if x.shape[-1] != params.in_dim:
        raise InvalidArgument(
            f"affine input has dimension {x.shape[-1]}, expected {params.in_dim}"
        )
    return matmul(x, transpose(params.weight)) + params.bias


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, None: None}


def mlp_forward(layers: Sequence[AffineParams], x, activation: str | None = "relu") -> Tensor:
    act = _ACTIVATIONS[activation]
    h = as_tensor(x)
    for i, layer in enumerate(layers):
        h = affine_forward(layer, h)
        if act is not None and i < len(layers) - 1:
            h = act(h)
    return h


def avg_pool(vectors: Sequence, weights=None) -> Tensor:
    """Elementwise mean of equal-length vectors, or a weighted combination."""
    if len(vectors) == 0:
        raise InvalidArgument("avg_pool of an empty list")
    try:
        stacked = stack(vectors)
    except InvalidArgument:
        raise InvalidArgument("avg_pool requires vectors of equal dimension") from None
    if weights is None:
        return mean(stacked, axis=0)
    weights = as_tensor(weights)
    if weights.shape != (len(vectors),):
        raise InvalidArgument("one weight per vector required")
    return matmul(weights, stacked)


# ---------------------------------------------------------------------------
# gradient verification


def _scalar(y) -> float:
    v = value_of(y)
    if v.size != 1:
        raise InvalidArgument("grad_check function must return a scalar")
    return float(v.reshape(()))


def grad_check(
    function: Callable,
    point,
    step: float = 1e-5,
    grad: Callable | None = None,
) -> float:
    """Largest coordinate-wise relative error between analytic and numeric gradients.

    The analytic gradient comes from the tape unless ``grad`` is given.  The
    error per coordinate is ``|analytic - central| / max(1, |analytic|)``.
    """
    if not step > 0:
        raise InvalidArgument("step must be positive")
    x0 = np.array(point, dtype=np.float64)
    if grad is None:
        with GradTape() as tape:
            x = tape.watch(Tensor(x0))
            y = function(x)
        f0 = _scalar(y)
        analytic = tape.gradient(as_tensor(y), [x])[0] if isinstance(y, Tensor) else np.zeros_like(x0)
    else:
        f0 = _scalar(function(Tensor(x0)))
        analytic = np.asarray(grad(x0), dtype=np.float64).reshape(x0.shape)
    if not np.isfinite(f0):
        raise GradCheckError(f"function value is not finite: {f0}")

    numeric = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        fp = _scalar(function(Tensor(xp)))
        fm = _scalar(function(Tensor(xm)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"function value is not finite near coordinate {i}")
        numeric.flat[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def check_gradient(function: Callable, point, tol: float, step: float = 1e-5, grad=None) -> float:
    """Like :func:`grad_check` but raises :class:`GradCheckError` above ``tol``."""
    err = grad_check(function, point, step=step, grad=grad)
    if err > tol:
        raise GradCheckError(f"gradient check failed: relative error {err:.3g} > {tol:g}")
    return err
