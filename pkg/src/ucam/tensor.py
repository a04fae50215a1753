"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Everything in this package runs on `Tensor`, a thin wrapper around a numpy
array that records how it was produced. Calling :func:`backward` on a scalar
walks the recorded graph once, in reverse topological order, and deposits
gradients on every leaf created with ``requires_grad=True``.

Ground rules (they keep masking bugs visible):

* float32 is the training dtype; float64 is used for gradient checking.
  Operands of mixed dtype are an error, never silently promoted.
* the only implicit broadcast is adding a 1-D bias along the last axis;
  every other shape mismatch raises :class:`~ucam.errors.ShapeError`.
* calling :func:`backward` twice without resetting grads is an error,
  because silent accumulation is the classic source of wrong optimizer
  steps.
* dropout is inverted dropout: scaled by 1/(1-p) at train time so the
  eval-time forward needs no rescaling.

New differentiable primitives can be defined outside this module with
:func:`from_op`; the normalization and attention ops do exactly that.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, GraphError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True
_CHECK_FINITE = False


class Tensor:
    """An n-dimensional float array with an optional gradient slot.

    ``data`` is always a float32 or float64 ndarray. ``grad`` stays ``None``
    until a backward pass reaches this tensor; it then has the same shape
    and dtype as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_op", "_done")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] | None = None
        self._backward_fn: Callable | None = None
        self._op: str | None = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # Convenience operators; the module-level functions are the real API.
    def __neg__(self):
        return neg(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Wrap array-like data in a constant (or leaf) tensor."""
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    arr = np.ascontiguousarray(arr, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that collects gradients."""
    return tensor(data, requires_grad=True, dtype=dtype)


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks():
    """Raise NumericError, naming the op, whenever any op emits a non-finite value."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = True
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def from_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
            op: str) -> Tensor:
    """Build a graph node for a custom differentiable op.

    ``backward`` receives the output gradient and must return one gradient
    (or None) per parent, each matching the parent's shape. When no parent
    needs a gradient the node collapses to a constant, so eval-mode code
    pays nothing for graph bookkeeping.
    """
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by op '{op}'")
    track = _GRAD_ENABLED and any(p.requires_grad or p._parents is not None
                                  for p in parents)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward
        out._op = op
    return out


def _check_same_dtype(op: str, *ts: Tensor):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ShapeError(f"{op}: mixed dtypes {d0} and {t.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b for identical shapes, or a + bias where bias is 1-D over the last axis."""
    _check_same_dtype("add", a, b)
    if a.shape == b.shape:
        return from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        def bwd(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        return from_op(a.data + b.data, (a, b), bwd, "add_bias")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return from_op(a.data * b.data, (a, b),
                   lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul_const(a: Tensor, arr: np.ndarray, op: str = "mul_const") -> Tensor:
    """Elementwise product with a fixed array (no gradient into ``arr``).

    ``arr`` may broadcast up to ``a``'s shape but must never enlarge it.
    """
    try:
        bshape = np.broadcast_shapes(a.shape, arr.shape)
    except ValueError:
        bshape = None
    if bshape != a.shape:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {arr.shape}")
    if np.asarray(arr).dtype != a.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} and "
                         f"{np.asarray(arr).dtype}")
    return from_op(a.data * arr, (a,), lambda g: (g * arr,), op)


def add_const(a: Tensor, arr: np.ndarray, op: str = "add_const") -> Tensor:
    """Elementwise sum with a fixed array (no gradient into ``arr``).

    Same broadcast rule as ``mul_const``: ``arr`` must not enlarge ``a``.
    """
    try:
        bshape = np.broadcast_shapes(a.shape, arr.shape)
    except ValueError:
        bshape = None
    if bshape != a.shape:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {arr.shape}")
    if np.asarray(arr).dtype != a.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} and "
                         f"{np.asarray(arr).dtype}")
    return from_op(a.data + arr, (a,), lambda g: (g,), op)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: 2-D @ 2-D, N-D @ 2-D (a linear map on the last axis),
    and N-D @ N-D with identical leading dimensions (stacked matmul).
    """
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, "
                         f"got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes "
                         f"{a.shape} and {b.shape}")

    if b.ndim == 2:
        k, n = b.shape

        def bwd(g):
            da = g @ b.data.swapaxes(-1, -2)
            db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return da, db
        return from_op(a.data @ b.data, (a, b), bwd, "matmul")

    if a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        def bwd(g):
            da = g @ b.data.swapaxes(-1, -2)
            db = a.data.swapaxes(-1, -2) @ g
            return da, db
        return from_op(a.data @ b.data, (a, b), bwd, "matmul")

    raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape} "
                     "(leading dimensions must match exactly)")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return from_op(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    return from_op(np.reshape(a.data, shape), (a,),
                   lambda g: (np.reshape(g, orig),), "reshape")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        return (np.full(a.shape, float(g), dtype=a.data.dtype),)
    return from_op(out, (a,), bwd, "sum_all")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis."""
    _check_same_dtype("stack", *tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return from_op(data, tuple(tensors), bwd, "stack")


def pad_last(a: Tensor, target: int) -> Tensor:
    """Zero-pad the last axis up to ``target`` elements."""
    t = a.shape[-1]
    if target < t:
        raise ShapeError(f"pad_last: target {target} shorter than input {t}")
    if target == t:
        return a
    width = [(0, 0)] * (a.ndim - 1) + [(0, target - t)]
    return from_op(np.pad(a.data, width), (a,),
                   lambda g: (g[..., :t],), "pad_last")


# ---------------------------------------------------------------------------
# activations


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_raw(a.data)
    return from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid_raw(a.data)
    out = a.data * s

    def bwd(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)
    return from_op(out, (a,), bwd, "swish")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return from_op(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def elu(a: Tensor) -> Tensor:
    """ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise."""
    pos = a.data > 0
    out = np.where(pos, a.data, np.expm1(np.minimum(a.data, 0.0)))
    out = out.astype(a.data.dtype, copy=False)

    def bwd(g):
        # exp(x) == out + 1 on the negative branch
        return (g * np.where(pos, 1.0, out + 1.0).astype(a.data.dtype),)
    return from_op(out, (a,), bwd, "elu")


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half of ``axis`` gated by sigmoid of the second."""
    c = a.shape[axis]
    if c % 2 != 0:
        raise ShapeError(f"glu: axis {axis} has odd extent {c} in shape {a.shape}")
    half = c // 2
    v = np.take(a.data, range(half), axis=axis)
    u = np.take(a.data, range(half, c), axis=axis)
    s = _sigmoid_raw(u)
    out = v * s

    def bwd(g):
        dv = g * s
        du = g * v * s * (1.0 - s)
        return (np.concatenate([dv, du], axis=axis),)
    return from_op(out, (a,), bwd, "glu")


ACTIVATIONS = {"swish": swish, "sigmoid": sigmoid, "relu": relu,
               "elu": elu, "glu": glu}


def activation(kind: str, a: Tensor) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation '{kind}'") from None
    return fn(a)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ConfigError("dropout with p > 0 needs an explicit rng")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul_const(a, keep, op="dropout")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)
    return from_op(y, (a,), bwd, "log_softmax")


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position.

    ``idx`` has shape ``a.shape[:-1]``; out-of-range entries raise DataError
    with the offending position.
    """
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_along_last: index shape {idx.shape} does not "
                         f"match leading shape {a.shape[:-1]}")
    k = a.shape[-1]
    bad = (idx < 0) | (idx >= k)
    if bad.any():
        pos = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(f"label {int(idx[pos])} out of range [0, {k}) at {pos}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        da = np.zeros_like(a.data)
        np.put_along_axis(da, idx[..., None], g[..., None], axis=-1)
        return (da,)
    return from_op(out, (a,), bwd, "take_along_last")


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._parents is not None:
            for p in node._parents:
                if id(p) not in visited and (p._parents is not None
                                             or p.requires_grad):
                    stack.append((p, False))
    return topo


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad leaf.

    ``loss`` must be scalar. Gradients of a node used on several paths are
    summed. Re-running backward on the same loss, or running it while some
    leaf still holds a gradient, raises GraphError.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward already ran for this loss; build a fresh graph")
    if loss._parents is None and not loss.requires_grad:
        raise GraphError("loss is a constant: nothing requires a gradient")

    topo = _toposort(loss)
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if _CHECK_FINITE and not np.isfinite(g).all():
            raise NumericError(
                f"non-finite gradient flowing into op '{node._op or 'leaf'}'")
        if node._parents is None:
            if node.requires_grad:
                if node.grad is not None:
                    raise GraphError(
                        "leaf already holds a gradient; call zero_grad before "
                        "running backward again")
                node.grad = g
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if not (p.requires_grad or p._parents is not None):
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    loss._done = True
    # Release interior references so large intermediates can be collected.
    for node in topo:
        if node is not loss and node._parents is not None:
            node._parents = None
            node._backward_fn = None


def zero_grad(params: Iterable) -> None:
    """Clear gradients; accepts tensors or (name, tensor) pairs."""
    for p in params:
        t = p[1] if isinstance(p, tuple) else p
        t.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable, params, eps: float = 1e-4,
               samples_per_tensor: int = 25,
               rng: np.random.Generator | None = None,
               floor: float = 0.0) -> float:
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must be deterministic (dropout off) and return a scalar Tensor
    rebuilt from the same parameter tensors on every call. All parameters
    must be float64: float32 tolerance hides real bugs at the 1e-5 level.

    Returns the max over sampled coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.

    ``floor`` skips coordinates where analytic and numeric are BOTH below
    it in magnitude. Deep compositions of normalizing modules have
    directions with true gradients around 1e-7 while the objective sits
    near 1e2; there the difference quotient is pure roundoff and certifies
    nothing. A missing gradient path still fails: its numeric side is
    large while the analytic side is zero.
    """
    named = list(params.items()) if isinstance(params, dict) else [
        p if isinstance(p, tuple) else (f"p{i}", p)
        for i, p in enumerate(params)]
    for name, t in named:
        if t.data.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 parameters; "
                              f"'{name}' is {t.data.dtype}")
    if rng is None:
        rng = np.random.default_rng(np.random.Philox(key=[0x6ADC, 0]))

    def run() -> Tensor:
        with finite_checks():
            out = f(dict(named) if isinstance(params, dict) else params)
        if out.data.size != 1:
            raise GraphError("grad_check objective must be scalar")
        return out

    zero_grad(named)
    loss = run()
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None
                       else np.zeros_like(t.data))
                for name, t in named}
    zero_grad(named)

    max_rel = 0.0
    for name, t in named:
        n = t.data.size
        coords = (np.arange(n) if n <= samples_per_tensor
                  else rng.choice(n, size=samples_per_tensor, replace=False))
        flat = t.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            lp = run().item()
            flat[c] = orig - eps
            lm = run().item()
            flat[c] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[c]
            if max(abs(a), abs(numeric)) < floor:
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            max_rel = max(max_rel, rel)
    return max_rel
