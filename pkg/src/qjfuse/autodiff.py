"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity is a :class:`Tensor`.  Operations executed while a
:class:`Tape` is active (``with Tape() as tape: ...``) and touching at least one
tensor with ``requires_grad`` are recorded; ``tape.backward(loss)`` then walks
the recording once in reverse.  Complex values are carried as
:class:`ComplexTensor` pairs of real tensors, so every backward rule below is a
real-valued vector-Jacobian product.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ComplexTensor", "Tape", "NonFiniteError", "ShapeError", "TapeError",
    "tensor", "parameter", "constant", "current_tape",
    "add", "sub", "mul", "div", "neg", "matmul", "matvec", "sum", "mean", "max_with_argmax",
    "exp", "log", "clip", "softplus", "relu", "tanh", "sqrt", "square", "l2_norm", "layer_norm",
    "softmax", "log_softmax", "concat", "stack", "reshape", "transpose", "take", "scatter",
    "getitem", "cadd", "csub", "cmul", "cscale", "cmatmul", "cmatvec", "dagger", "inner",
    "abs2", "kron", "cnorm", "grad_check", "GradCheckReport",
]

_ids = itertools.count()
_tapes: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def current_tape() -> "Tape | None":
    return _tapes[-1] if _tapes else None


class Tensor:
    """Real float64 array node.

    Leaves are created with :func:`parameter` (trainable) or :func:`constant`.
    Interior nodes carry their parents and a backward closure mapping the
    output cotangent to one cotangent per parent (``None`` where no gradient
    flows).
    """

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_backward", "_tape", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations in forward order for a single backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False
        self._grads: dict[int, np.ndarray] | None = None

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def _record(self, out: Tensor, parents: Sequence[Tensor]) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        for p in parents:
            if not p.requires_grad:
                continue
            if p.is_leaf:
                if p._tape is not None and p._tape is not self and any(t is p._tape for t in _tapes):
                    raise TapeError("leaf is already recorded on another live tape")
                p._tape = self
                self.leaves.setdefault(p.node_id, p)
            elif p._tape is not self:
                raise TapeError("tensor belongs to a different tape")
        out._tape = self
        self.nodes.append(out)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Return ``{node_id: gradient}`` for every trainable leaf on this tape."""
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        if not loss.requires_grad:
            self._grads = {}
            return {}
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else prev + pg
        out = {}
        for nid, leaf in self.leaves.items():
            g = grads.get(nid)
            out[nid] = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
        self.nodes = []
        self._grads = out
        return out

    def grad(self, t: Tensor) -> np.ndarray:
        if self._grads is None:
            raise TapeError("backward() has not run")
        g = self._grads.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from {op}")


def _make(data, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape._record(out, parents)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------- real ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def matvec(A, x) -> Tensor:
    """``A @ x`` with ``x`` a (batched) vector on its last axis."""
    A, x = _as_tensor(A), _as_tensor(x)
    if A.ndim < 2 or A.shape[-1] != x.shape[-1]:
        raise ShapeError(f"matvec: incompatible shapes {A.shape} and {x.shape}")
    return reshape(matmul(A, reshape(x, x.shape + (1,))), np.broadcast_shapes(A.shape[:-2], x.shape[:-1]) + (A.shape[-2],))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max_with_argmax(a, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis``; ties resolve to the lowest index.  Gradient goes to the argmax only."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), backward, "max"), idx


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    # d/dx log(1 + e^x) = sigmoid(x)
    return _make(out, (a,), lambda g: (g * np.exp(a.data - out),), "softplus")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside the range."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return _make(out, (a,), lambda g: (g * inside,), "clip")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sqrt(sum(square(a), axis=axis, keepdims=keepdims))


def layer_norm(x, gain=None, bias=None, axis: int = -1, eps: float = 1e-5) -> Tensor:
    x = _as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _make(xhat, (x,), backward, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(xs), backward, "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):]) for x in xs]
    return concat(expanded, axis=axis)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    out = a.data[index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(out, (a,), backward, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)
    unique = indices.ndim == 1 and len(np.unique(indices)) == len(indices)

    def backward(g):
        ga = np.zeros_like(a.data)
        ax = axis % a.ndim
        moved = np.moveaxis(ga, ax, 0)
        if unique:
            moved[indices] = np.moveaxis(g, ax, 0)
        else:
            np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return (ga,)

    return _make(out, (a,), backward, "take")


def scatter(values, indices, size: int) -> Tensor:
    """Zeros of leading size ``size`` with rows ``indices`` set to ``values`` (indices unique)."""
    values = _as_tensor(values)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.zeros((size,) + values.shape[1:])
    out[indices] = values.data
    return _make(out, (values,), lambda g: (g[indices],), "scatter")


# ------------------------------------------------------------------ complex ops


class ComplexTensor:
    """A complex array held as two real :class:`Tensor` objects of equal shape."""

    __slots__ = ("re", "im")

    def __init__(self, re, im=None):
        re = _as_tensor(re)
        im = Tensor(np.zeros(re.shape)) if im is None else _as_tensor(im)
        if re.shape != im.shape:
            raise ShapeError(f"re/im shapes differ: {re.shape} vs {im.shape}")
        self.re = re
        self.im = im

    @classmethod
    def from_numpy(cls, z, requires_grad: bool = False, name: str | None = None) -> "ComplexTensor":
        z = np.asarray(z, dtype=np.complex128)
        re_name = im_name = None
        if name is not None:
            re_name, im_name = name + ".re", name + ".im"
        return cls(Tensor(z.real.copy(), requires_grad, re_name), Tensor(z.imag.copy(), requires_grad, im_name))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def ndim(self) -> int:
        return self.re.ndim

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    def detach(self) -> "ComplexTensor":
        return ComplexTensor(self.re.data, self.im.data)

    def conj(self) -> "ComplexTensor":
        return ComplexTensor(self.re, neg(self.im))

    def reshape(self, *shape) -> "ComplexTensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ComplexTensor(reshape(self.re, shape), reshape(self.im, shape))

    def transpose(self, axes=None) -> "ComplexTensor":
        return ComplexTensor(transpose(self.re, axes), transpose(self.im, axes))

    def take(self, indices, axis: int = 0) -> "ComplexTensor":
        return ComplexTensor(take(self.re, indices, axis), take(self.im, indices, axis))

    def __getitem__(self, index) -> "ComplexTensor":
        return ComplexTensor(getitem(self.re, index), getitem(self.im, index))

    def sum(self, axis=None, keepdims=False) -> "ComplexTensor":
        return ComplexTensor(sum(self.re, axis, keepdims), sum(self.im, axis, keepdims))

    def __add__(self, other):
        return cadd(self, other)

    def __sub__(self, other):
        return csub(self, other)

    def __mul__(self, other):
        if isinstance(other, ComplexTensor):
            return cmul(self, other)
        return cscale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return cmatmul(self, other)

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape})"


def _as_complex(z) -> ComplexTensor:
    if isinstance(z, ComplexTensor):
        return z
    if isinstance(z, Tensor):
        return ComplexTensor(z)
    return ComplexTensor.from_numpy(z)


def cadd(a, b) -> ComplexTensor:
    a, b = _as_complex(a), _as_complex(b)
    return ComplexTensor(add(a.re, b.re), add(a.im, b.im))


def csub(a, b) -> ComplexTensor:
    a, b = _as_complex(a), _as_complex(b)
    return ComplexTensor(sub(a.re, b.re), sub(a.im, b.im))


def cscale(a: ComplexTensor, s) -> ComplexTensor:
    """Multiply by a real scalar/array, or by a python/numpy complex constant."""
    if isinstance(s, (complex, np.complexfloating)) or (isinstance(s, np.ndarray) and np.iscomplexobj(s)):
        return cmul(a, ComplexTensor.from_numpy(s))
    return ComplexTensor(mul(a.re, s), mul(a.im, s))


def cmul(a, b) -> ComplexTensor:
    """Elementwise complex product with broadcasting."""
    a, b = _as_complex(a), _as_complex(b)
    re = sub(mul(a.re, b.re), mul(a.im, b.im))
    im = add(mul(a.re, b.im), mul(a.im, b.re))
    return ComplexTensor(re, im)


def cmatmul(a, b) -> ComplexTensor:
    a, b = _as_complex(a), _as_complex(b)
    re = sub(matmul(a.re, b.re), matmul(a.im, b.im))
    im = add(matmul(a.re, b.im), matmul(a.im, b.re))
    return ComplexTensor(re, im)


def cmatvec(A, x) -> ComplexTensor:
    A, x = _as_complex(A), _as_complex(x)
    re = sub(matvec(A.re, x.re), matvec(A.im, x.im))
    im = add(matvec(A.re, x.im), matvec(A.im, x.re))
    return ComplexTensor(re, im)


def dagger(a: ComplexTensor) -> ComplexTensor:
    """Conjugate transpose over the last two axes."""
    return ComplexTensor(transpose(a.re), neg(transpose(a.im)))


def inner(a, b, axis: int = -1) -> ComplexTensor:
    """``<a|b> = sum(conj(a) * b)`` along ``axis``."""
    a, b = _as_complex(a), _as_complex(b)
    re = sum(add(mul(a.re, b.re), mul(a.im, b.im)), axis=axis)
    im = sum(sub(mul(a.re, b.im), mul(a.im, b.re)), axis=axis)
    return ComplexTensor(re, im)


def abs2(z: ComplexTensor) -> Tensor:
    return add(square(z.re), square(z.im))


def cnorm(z: ComplexTensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sqrt(sum(abs2(z), axis=axis, keepdims=keepdims))


def kron(a, b) -> ComplexTensor:
    """Kronecker product of (batched) vectors: ``out[..., i*Db + j] = a[..., i] * b[..., j]``."""
    a, b = _as_complex(a), _as_complex(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"kron: batch shapes differ {a.shape} vs {b.shape}")
    lead = a.shape[:-1]
    da, db = a.shape[-1], b.shape[-1]
    outer = cmul(a.reshape(lead + (da, 1)), b.reshape(lead + (1, db)))
    return outer.reshape(lead + (da * db,))


# -------------------------------------------------------------- gradient check


class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric gradients."""

    def __init__(self, errors: dict[str, float], tolerance: float):
        self.errors = errors
        self.tolerance = tolerance

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def lines(self) -> list[str]:
        return [f"{'PASS' if e < self.tolerance else 'FAIL'} {name}: max rel err {e:.3e}"
                for name, e in self.errors.items()]

    def __repr__(self):
        return f"GradCheckReport(passed={self.passed}, max_error={self.max_error:.3e})"


def grad_check(build: Callable[[], Tensor], params: dict[str, Tensor], tolerance: float = 1e-4,
               h: float = 1e-4, max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients with central finite differences.

    ``build`` must be deterministic: it is called once under a tape and then
    twice per probed entry without one.  ``max_entries`` caps how many entries
    per parameter are probed (chosen at random with ``seed``).
    """
    with Tape() as tape:
        loss = build()
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, p in params.items():
        analytic = grads.get(p.node_id, np.zeros_like(p.data))
        if not np.isfinite(analytic).all():
            raise NonFiniteError(f"non-finite analytic gradient for {name}")
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            fp = build().item()
            flat[i] = orig - h
            fm = build().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            if not np.isfinite(num):
                raise NonFiniteError(f"non-finite numeric gradient for {name}[{i}]")
            ga = analytic.reshape(-1)[i]
            err = abs(ga - num) / max(abs(ga), abs(num), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, tolerance)


def parameters_of(*items: Iterable) -> list[Tensor]:
    out = []
    for it in items:
        if isinstance(it, ComplexTensor):
            out.extend([it.re, it.im])
        elif isinstance(it, Tensor):
            out.append(it)
    return out
