"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive takes :class:`Tensor` inputs, computes its result with numpy
and, when any input requires a gradient, appends a :class:`TapeNode` to the
active :class:`Tape`. :func:`backward` replays the tape in reverse
construction order, which is a valid reverse topological order because a
node can only consume tensors that already exist.

Broadcasting is restricted to leading batch dimensions: ``add(a, b)`` accepts
``b.shape == a.shape[-k:]`` (or the mirror case) and nothing else.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "zeros",
    "get_tape",
    "use_tape",
    "no_grad",
    "grad_enabled",
    "set_nonfinite_guard",
    "backward",
    "grad_check",
    "GradCheckReport",
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "embedding_lookup",
    "softmax",
    "rms_norm",
    "gelu",
    "concat",
    "slice_axis",
    "mean_pool",
    "cross_entropy",
    "tensor_sum",
    "scale_rows",
    "rope",
    "take_rows",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's contraction/broadcast rule."""


class NonFiniteError(FloatingPointError):
    """A guarded op saw NaN or Inf in its inputs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; all routes go through the primitives below
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def tensor(data, requires_grad: bool = False, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeNode:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    # maps output gradient -> one gradient (or None) per parent
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.enabled = True
        self.guard = False


_state = _State()


def get_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return _state.enabled


def set_nonfinite_guard(enabled: bool) -> None:
    _state.guard = bool(enabled)


def _check_finite(op: str, tensors: Sequence[Tensor]) -> None:
    if not _state.guard:
        return
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = _state.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _state.tape.record(TapeNode(op, out, parents, backward_fn))
    return out


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a leading-broadcast gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead > 0 else grad


def _check_leading(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dimensions")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b``. Either operand may be 2-D and broadcast over the other's batch."""
    _check_finite("matmul", (a, b))
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: contraction mismatch {a.shape[-1]} (lhs {a.shape}) vs {b.shape[-2]} (rhs {b.shape})")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la != lb and la and lb:
        raise ShapeError(f"matmul: batch dims {la} and {lb} differ")
    av, bv = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if bv.ndim == 2 and g.ndim > 2:
                ga = (g.reshape(-1, g.shape[-1]) @ bv.T).reshape(g.shape[:-1] + (bv.shape[0],))
            else:
                ga = g @ np.swapaxes(bv, -1, -2)
            if not la:
                ga = ga.reshape(-1, *a.shape).sum(axis=0) if ga.ndim > 2 else ga
        if b.requires_grad:
            if not lb and la:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    if bv.ndim == 2 and av.ndim > 2:
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))
    else:
        out = av @ bv
    return _result("matmul", out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("add", (a, b))
    _check_leading("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("mul", (a, b))
    _check_leading("mul", a, b)
    av, bv = a.data, b.data
    return _result("mul", av * bv, (a, b), lambda g: (_sum_to(g * bv, av.shape), _sum_to(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    _check_finite("scale", (a,))
    c = a.data.dtype.type(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.data.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    src = a.shape
    return _result("reshape", out, (a,), lambda g: (g.reshape(src),))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"embedding_lookup: token id out of range [0, {vocab})")
    _check_finite("embedding_lookup", (table,))

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result("embedding_lookup", table.data[ids], (table,), bw)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _check_finite("softmax", (a,))
    y = _softmax_np(a.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (a,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    _check_finite("rms_norm", (x, gain))
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: gain shape {gain.shape} != feature dim {x.shape[-1:]}")
    xv, gv = x.data, gain.data
    d = xv.shape[-1]
    r = np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + xv.dtype.type(eps))
    xhat = xv / r
    y = xhat * gv

    def bw(g):
        gx = ggain = None
        if x.requires_grad:
            gg = g * gv
            gx = gg / r - xhat * ((gg * xhat).sum(axis=-1, keepdims=True) / (d * r))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _result("rms_norm", y, (x, gain), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    _check_finite("gelu", (a,))
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (x + k * x * x * x))
    y = 0.5 * x * (1 + t)

    def bw(g):
        dy = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * dy,)

    return _result("gelu", y, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    _check_finite("concat", tensors)
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        index = [slice(None)] * nd
        out = []
        for i in range(len(tensors)):
            index[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(g[tuple(index)])
        return out

    return _result("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.data.ndim
    n = a.shape[ax]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) outside dimension {ax} of size {n}")
    index = [slice(None)] * a.data.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _result("slice", a.data[index], (a,), bw)


def mean_pool(x: Tensor, valid_lengths) -> Tensor:
    """Mean over the first ``valid_lengths[b]`` positions of each ``(T, d)`` row block."""
    _check_finite("mean_pool", (x,))
    if x.data.ndim != 3:
        raise ShapeError(f"mean_pool: expected (batch, seq, dim), got {x.shape}")
    lengths = np.asarray(valid_lengths, dtype=np.int64)
    bsz, seq, _ = x.shape
    if lengths.shape != (bsz,):
        raise ShapeError(f"mean_pool: {lengths.shape[0] if lengths.ndim else 0} lengths for batch of {bsz}")
    if lengths.max(initial=0) > seq or lengths.min(initial=1) < 1:
        raise ShapeError(f"mean_pool: valid lengths must lie in [1, {seq}]")
    w = (np.arange(seq)[None, :] < lengths[:, None]).astype(x.dtype) / lengths[:, None].astype(x.dtype)
    out = np.einsum("bt,btd->bd", w, x.data)
    return _result("mean_pool", out, (x,), lambda g: (w[:, :, None] * g[:, None, :],))


def cross_entropy(logits: Tensor, targets, weights=None, denom: float | None = None) -> Tensor:
    """Weighted mean negative log-likelihood over the last axis.

    Returns ``sum(w * nll) / denom`` where ``denom`` defaults to ``sum(w)``.
    Passing an explicit ``denom`` lets several micro-batches share one
    normalizer.
    """
    _check_finite("cross_entropy", (logits,))
    targets = np.asarray(targets, dtype=np.int64)
    lv = logits.data
    if targets.shape != lv.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {lv.shape}")
    V = lv.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ShapeError(f"cross_entropy: target outside [0, {V})")
    w = np.ones(targets.shape, dtype=lv.dtype) if weights is None else np.asarray(weights, dtype=lv.dtype)
    if w.shape != targets.shape:
        raise ShapeError(f"cross_entropy: weights {w.shape} vs targets {targets.shape}")
    total = float(w.sum()) if denom is None else float(denom)
    if total <= 0:
        raise ShapeError("cross_entropy: empty loss mask")
    z = lv - lv.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray((w * nll).sum() / total, dtype=lv.dtype)

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1, axis=-1)
        return (p * (w / total)[..., None] * g,)

    return _result("cross_entropy", loss, (logits,), bw)


def tensor_sum(a: Tensor) -> Tensor:
    _check_finite("sum", (a,))
    shape = a.shape
    return _result("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply every last-axis row of ``x`` by the matching scalar in ``w`` (shape ``x.shape[:-1]``)."""
    _check_finite("scale_rows", (x, w))
    if w.shape != x.shape[:-1]:
        raise ShapeError(f"scale_rows: weights {w.shape} vs rows {x.shape[:-1]}")
    xv, wv = x.data, w.data
    return _result(
        "scale_rows",
        xv * wv[..., None],
        (x, w),
        lambda g: (g * wv[..., None], (g * xv).sum(axis=-1)),
    )


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather along axis 0; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[0]
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= n)):
        raise ShapeError(f"take_rows: indices must be 1-D within [0, {n})")
    _check_finite("take_rows", (a,))

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result("take_rows", a.data[idx], (a,), bw)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(g: np.ndarray) -> np.ndarray:
    h = g.shape[-1] // 2
    return np.concatenate([g[..., h:], -g[..., :h]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding on ``(..., T, head_dim)`` with ``(T, head_dim)`` tables."""
    _check_finite("rope", (x,))
    if x.shape[-2:] != cos.shape or cos.shape != sin.shape or x.shape[-1] % 2:
        raise ShapeError(f"rope: input {x.shape} vs tables {cos.shape}")
    xv = x.data
    cos = cos.astype(xv.dtype, copy=False)
    sin = sin.astype(xv.dtype, copy=False)
    return _result("rope", xv * cos + _rotate_half(xv) * sin, (x,), lambda g: (g * cos + _rotate_half_t(g * sin),))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf, then clear the tape."""
    tape = _state.tape if tape is None else tape
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise RuntimeError("backward: tape is empty")
    if not loss.requires_grad:
        tape.clear()
        raise RuntimeError("backward: loss does not depend on any trainable tensor")
    produced = {id(n.out) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in produced:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
            else:
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    tape.clear()


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*tensors)`` with central differences in float64.

    Relative error per element is ``|a - n| / max(|a| + |n|, floor)``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    with use_tape(tape):
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = f(*ts)
        backward(out, tape)
    errors = []
    for i, arr in enumerate(arrays):
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = numeric.reshape(-1)
        for j in range(arr.size):
            vals = []
            for sgn in (1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[i].reshape(-1)[j] += sgn * eps
                with no_grad():
                    vals.append(float(f(*[Tensor(p) for p in probe]).data))
            flat[j] = (vals[0] - vals[1]) / (2 * eps)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
        errors.append(float((np.abs(analytic - numeric) / denom).max(initial=0.0)))
    return GradCheckReport(errors, tol)
