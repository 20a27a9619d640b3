"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation the tracker needs is a hand-written primitive with an
explicit backward rule; the graph is recorded define-by-run and replayed
in reverse topological order. Training runs in float32, gradient
verification in float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN/Inf while finite checks are on."""


_GRAD_ENABLED = True
_FINITE_CHECKS = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation / decoding fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks():
    """Verify every primitive output is finite; names the offending op."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = True
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


class Tensor:
    """Dense n-d array node in the computation graph.

    `grad` is allocated by `zero_grad` / `backward` and has the same shape
    as `data`. Leaf tensors with requires_grad=True are trainable.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output of op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = parents
        out.backward_fn = backward_fn
        out.op = op
    else:
        out.parents = ()
        out.backward_fn = None
        out.op = op
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Topologically ordered record of the graph below `root` (parents first)."""
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into `t.grad` for every tensor requiring grad.

    Leaves touched by an earlier `zero_grad` but absent from the graph keep
    their zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {loss.data.shape}")
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        dout = grads.pop(id(node), None)
        if dout is None:
            continue
        if node.requires_grad and not node.parents:
            # trainable leaf
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += dout
            continue
        if node.backward_fn is None:
            continue
        contribs = node.backward_fn(dout)
        for parent, contrib in zip(node.parents, contribs):
            if contrib is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
        if node.grad is not None:
            node.grad += dout  # non-leaf whose grad was explicitly requested


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may broadcast from (k,1), (1,k) or a scalar."""
    if a.data.shape != b.data.shape:
        try:
            out_shape = np.broadcast_shapes(a.data.shape, b.data.shape)
        except ValueError:
            raise ShapeError(f"add: cannot broadcast {a.data.shape} with {b.data.shape}")
        if out_shape != a.data.shape:
            raise ShapeError(f"add: second operand {b.data.shape} must broadcast into first {a.data.shape}")
    data = a.data + b.data

    def bwd(dout):
        da = dout
        db = dout
        if b.data.shape != dout.shape:
            db = _reduce_to_shape(dout, b.data.shape)
        return da, db

    return _result(data, (a, b), bwd, "add")


def _reduce_to_shape(arr: np.ndarray, shape) -> np.ndarray:
    """Sum out broadcast axes so `arr` collapses back to `shape`."""
    if arr.shape == tuple(shape):
        return arr
    ndim = arr.ndim - len(shape)
    for _ in range(ndim):
        arr = arr.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and arr.shape[ax] != 1:
            arr = arr.sum(axis=ax, keepdims=True)
    return arr


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors in one node."""
    if not tensors:
        raise ShapeError("add_n of empty list")
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        if t.data.shape != data.shape:
            raise ShapeError(f"add_n: shape {t.data.shape} != {data.shape}")
        data += t.data

    def bwd(dout):
        return tuple(dout for _ in tensors)

    return _result(data, tuple(tensors), bwd, "add_n")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda dout: (-dout,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda dout: (dout * c,), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    data = a.data * b.data

    def bwd(dout):
        return dout * b.data, dout * a.data

    return _result(data, (a, b), bwd, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(dout):
        return dout @ b.data.T, a.data.T @ dout

    return _result(data, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, (a,), lambda dout: (dout.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda dout: (dout.reshape(orig),), "reshape")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(dout):
        return (dout * (1.0 - data * data),)

    return _result(data, (a,), bwd, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # stable piecewise form
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def bwd(dout):
        return (dout * data * (1.0 - data),)

    return _result(data, (a,), bwd, "sigmoid")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bwd(dout):
        return (dout * (a.data > 0),)

    return _result(data, (a,), bwd, "relu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0 or a.data.shape[axis] == 0:
        raise ShapeError("softmax over empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(dout):
        inner = (dout * data).sum(axis=axis, keepdims=True)
        return (data * (dout - inner),)

    return _result(data, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0 or a.data.shape[axis] == 0:
        raise ShapeError("log_softmax over empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def bwd(dout):
        return (dout - sm * dout.sum(axis=axis, keepdims=True),)

    return _result(data, (a,), bwd, "log_softmax")


def tsum(a: Tensor) -> Tensor:
    data = a.data.sum()

    def bwd(dout):
        return (np.full_like(a.data, dout),)

    return _result(np.asarray(data), (a,), bwd, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    data = a.data.sum() / n

    def bwd(dout):
        return (np.full_like(a.data, dout / n),)

    return _result(np.asarray(data), (a,), bwd, "mean")


def pick(a: Tensor, index: tuple[int, ...]) -> Tensor:
    """Scalar view of a single coordinate."""
    data = np.asarray(a.data[index])

    def bwd(dout):
        g = np.zeros_like(a.data)
        g[index] = dout
        return (g,)

    return _result(data, (a,), bwd, "pick")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(dout):
        return tuple(
            np.take(dout, np.arange(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(data, tuple(tensors), bwd, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def bwd(dout):
        g = np.zeros_like(a.data)
        g[idx] = dout
        return (g,)

    return _result(data, (a,), bwd, "narrow")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` (V, h) by ids; returns (h, len(ids))."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding ids must be 1-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.data.shape[0]})")
    data = table.data[ids].T.copy()

    def bwd(dout):
        g = np.zeros_like(table.data)
        np.add.at(g, ids, dout.T)
        return (g,)

    return _result(data, (table,), bwd, "embedding")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column of (h, N) over the feature axis, then scale+shift."""
    if gain.data.shape != (x.data.shape[0], 1) or bias.data.shape != (x.data.shape[0], 1):
        raise ShapeError("layer_norm gain/bias must be (h, 1)")
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def bwd(dout):
        dgain = (dout * xhat).sum(axis=1, keepdims=True)
        dbias = dout.sum(axis=1, keepdims=True)
        dxhat = dout * gain.data
        m1 = dxhat.mean(axis=0, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=0, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _result(data, (x, gain, bias), bwd, "layer_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    factor = x.data.dtype.type(1.0 / (1.0 - p))
    data = x.data * keep * factor

    def bwd(dout):
        return (dout * keep * factor,)

    return _result(data, (x,), bwd, "dropout")


def additive_scores(r: Tensor, p: Tensor, q: Tensor) -> Tensor:
    """Score matrix S[i, j] = r . tanh(p[:, i] + q[:, j]).

    `p` is (k, N), `q` is (k, M), `r` is (k,) or (k, 1); result is (N, M).
    This is the shared bilinear-tanh form used by the utterance-schema
    similarity, the decoder context attention, and the pointer scorer.
    """
    rvec = r.data.reshape(-1)
    if p.data.ndim != 2 or q.data.ndim != 2 or p.data.shape[0] != q.data.shape[0] or rvec.shape[0] != p.data.shape[0]:
        raise ShapeError(
            f"additive_scores: widths differ r={r.data.shape} p={p.data.shape} q={q.data.shape}"
        )
    h = np.tanh(p.data[:, :, None] + q.data[:, None, :])  # (k, N, M)
    data = np.einsum("knm,k->nm", h, rvec)

    def bwd(dout):
        dr = np.einsum("knm,nm->k", h, dout).reshape(r.data.shape)
        dpre = (rvec[:, None, None] * dout[None, :, :]) * (1.0 - h * h)
        return dr, dpre.sum(axis=2), dpre.sum(axis=1)

    return _result(data, (r, p, q), bwd, "additive_scores")


# ---------------------------------------------------------------------------
# parameters


def glorot_limit(shape) -> float:
    fan_in = shape[-1] if len(shape) > 1 else shape[0]
    fan_out = shape[0]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ParamSet:
    """Ordered, named collection of trainable tensors.

    `version` increments on every optimizer step; caches key on it.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._tensors: dict[str, Tensor] = {}
        self.version = 0

    def param(self, name: str, shape, init: str = "glorot") -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "glorot":
            lim = glorot_limit(shape)
            data = self.rng.uniform(-lim, lim, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        """Overwrite parameter values; set mismatch raises with the tensor names."""
        missing = [k for k in self._tensors if k not in arrays]
        extra = [k for k in arrays if k not in self._tensors]
        if missing or extra:
            raise IncompatibleParamsError(missing=missing, extra=extra)
        for k, t in self._tensors.items():
            arr = arrays[k]
            if tuple(arr.shape) != tuple(t.data.shape):
                raise IncompatibleParamsError(missing=[f"{k} (shape {tuple(t.data.shape)} != {tuple(arr.shape)})"], extra=[])
            t.data = arr.astype(self.dtype)
        self.version += 1


class IncompatibleParamsError(ValueError):
    def __init__(self, missing: list[str], extra: list[str]):
        self.missing = missing
        self.extra = extra
        parts = []
        if missing:
            parts.append("missing tensors: " + ", ".join(sorted(missing)))
        if extra:
            parts.append("unexpected tensors: " + ", ".join(sorted(extra)))
        super().__init__("; ".join(parts) or "incompatible parameter sets")


# ---------------------------------------------------------------------------
# verification


def grad_check(
    loss_fn: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    eps: float = 1e-5,
    max_coords: int = 120,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` must be a deterministic closure over `tensors`, re-evaluable
    per coordinate. Coordinates are sampled (up to `max_coords` total,
    spread over tensors). The relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    rng = rng or np.random.default_rng(0)
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    with finite_checks():
        loss = loss_fn()
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    per_tensor = max(1, max_coords // max(1, len(tensors)))
    worst = 0.0
    for ti, t in enumerate(tensors):
        n = t.data.size
        count = min(per_tensor, n)
        coords = rng.choice(n, size=count, replace=False)
        flat = t.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad(), finite_checks():
                f_plus = loss_fn().item()
            flat[c] = orig - eps
            with no_grad(), finite_checks():
                f_minus = loss_fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[ti].reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
