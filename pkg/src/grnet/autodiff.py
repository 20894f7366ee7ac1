"""Dense tensors with reverse-mode differentiation.

A deliberately small engine: every op checks shapes exactly (no implicit
broadcasting), records its parents and a backward closure, and
:meth:`Tensor.backward` replays the recorded graph in reverse topological
order.  Double precision is the reference mode; float32 is accepted for
training runs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError, LogicError, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An immutable array value plus the bookkeeping needed for the reverse pass."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        if self.ndim == 3:
            return bmm(self, other)
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed shape {grad.shape} != tensor shape {self.shape}")

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(_topo_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


class Parameter(Tensor):
    """A trainable leaf tensor with a persistent gradient buffer."""

    __slots__ = ("name", "decay")

    def __init__(self, data, name: str, decay: bool = True, dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)
        self.name = name
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def elementwise_sq_diff(a: Tensor, b: Tensor) -> Tensor:
    """``(a - b) ** 2`` elementwise."""
    _check_same(a, b, "elementwise_sq_diff")
    d = a.data - b.data

    def backward(g):
        gd = 2.0 * d * g
        return gd, -gd

    return _result(d * d, (a, b), "sq_diff", backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), "relu", lambda g: (g * pos,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of ``x`` (trailing dims must equal ``b.shape``)."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")

    def backward(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _result(x.data + b.data, (x, b), "add_bias", backward)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over an explicit, equal leading batch dim."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _result(a.data @ b.data, (a, b), "bmm", backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs >= 2 dims, got {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), "transpose",
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if shape.count(-1) > 1 or known == 0 or a.size % known:
            raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def gather(x: Tensor, index: np.ndarray, axis: int = -2) -> Tensor:
    """Select entries along ``axis`` (repeats allowed; gradients are summed)."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), index, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result(np.take(x.data, index, axis=axis), (x,), "gather", backward)


def total(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), "sum",
                   lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _result(np.asarray(x.data.mean()), (x,), "mean",
                   lambda g: (np.full_like(x.data, g / n),))


# ---------------------------------------------------------------------------
# normalization, pooling, losses


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize along the last axis: ``v / max(||v||, eps)``."""
    norm = np.sqrt(np.sum(v.data * v.data, axis=-1, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, eps)
    out = v.data / denom

    def backward(g):
        proj = np.sum(g * out, axis=-1, keepdims=True)
        return (np.where(big, (g - out * proj) / denom, g / denom),)

    return _result(out, (v,), "l2_normalize", backward)


def softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, shaped like the trailing dims of ``logits``) excludes
    entries from the normalization; excluded outputs are exactly zero.
    """
    x = logits.data
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[x.ndim - mask.ndim:]:
            raise DimensionError(f"softmax: mask {mask.shape} does not fit logits {x.shape}")
        if not mask.any(axis=-1).all():
            raise LogicError("softmax: a row has no enabled entries")
        m = np.broadcast_to(mask, x.shape)
        shifted = np.where(m, x, -np.inf)
        z = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(np.where(m, z, 0.0)), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _result(s, (logits,), "softmax", backward)


def window_max(x: Tensor, index_sets: Sequence[np.ndarray]) -> Tensor:
    """Max of ``x[..., idx]`` over each index set along the last axis.

    The subgradient goes to the first maximal index in the order given,
    which for row-major index sets is the first maximum in row-major order.
    """
    if not index_sets:
        raise LogicError("window_max: no index sets")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = np.empty((flat.shape[0], len(index_sets)), dtype=x.dtype)
    chosen = np.empty((flat.shape[0], len(index_sets)), dtype=np.intp)
    for m, idx in enumerate(index_sets):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0:
            raise LogicError(f"window_max: index set {m} is empty")
        sub = flat[:, idx]
        am = np.argmax(sub, axis=1)
        out[:, m] = sub[np.arange(flat.shape[0]), am]
        chosen[:, m] = idx[am]

    def backward(g):
        gx = np.zeros_like(flat)
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(gx, (rows, chosen), g.reshape(flat.shape[0], -1))
        return (gx.reshape(x.shape),)

    return _result(out.reshape(lead + (len(index_sets),)), (x,), "window_max", backward)


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Per-sample ``-log softmax(logits)[label]`` over the last axis."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]
                        or not np.issubdtype(labels.dtype, np.integer)):
        raise InputError(f"cross_entropy: labels must be integers in [0, {logits.shape[-1]})")
    x = logits.data
    mx = x.max(axis=-1, keepdims=True)
    lse = mx[..., 0] + np.log(np.exp(x - mx).sum(axis=-1))
    picked = np.take_along_axis(x, labels[..., None], axis=-1)[..., 0]
    probs = np.exp(x - lse[..., None])

    def backward(g):
        onehot = np.zeros_like(x)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return ((probs - onehot) * g[..., None],)

    return _result(lse - picked, (logits,), "cross_entropy", backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    coords: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` to central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_coords`` set, parameters larger than that are checked on a
    random subset of at least 64 coordinates.
    """
    if step <= 0:
        raise InputError("grad_check: step must be positive")
    with no_grad():
        first, second = f().item(), f().item()
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise NumericError(f"grad_check: f is not deterministic ({first!r} != {second!r})")

    zero_grad(params)
    f().backward()
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grad(params)

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for p in params:
        n = p.size
        if max_coords is not None and n > max(64, max_coords):
            coords = np.sort(rng.choice(n, size=max(64, max_coords), replace=False))
        else:
            coords = np.arange(n)
        flat = p.data.reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + step
                fp = f().item()
                flat[c] = orig - step
                fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2.0 * step)
            ana = analytic[p.name].reshape(-1)[c]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        report.errors[p.name] = worst
        report.coords[p.name] = len(coords)
    return report
