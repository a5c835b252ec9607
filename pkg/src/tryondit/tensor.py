"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs in double precision on row-major numpy arrays. Gradients
are recorded on an explicit :class:`Tape` owned by the caller (one tape
per training step, no global state). An operation is recorded when any
of its inputs is attached to a live tape; running the same code with no
watched tensors is plain forward evaluation.

Broadcasting is restricted to scalar-vs-tensor. Any other shape mismatch
raises :class:`ShapeError` instead of being silently broadcast.
"""

from __future__ import annotations

import heapq
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, OracleError, ShapeError

Array = np.ndarray

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_array(value) -> Array:
    return np.ascontiguousarray(np.asarray(value, dtype=np.float64))


class Tensor:
    """A real-valued n-dimensional array, optionally tracked for gradients.

    ``data`` exposes the flat row-major view of the underlying storage;
    ``tape_id`` is set while the tensor is attached to a live tape.
    """

    def __init__(self, value, requires_grad: bool = False):
        self.array = _as_array(value)
        self.requires_grad = bool(requires_grad)
        self.tape_id: tuple["Tape", int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> Array:
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.array.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.array.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Op:
    __slots__ = ("kind", "out_id", "in_ids", "bwd")

    def __init__(self, kind: str, out_id: int, in_ids: list[int], bwd: Callable):
        self.kind = kind
        self.out_id = out_id
        self.in_ids = in_ids
        self.bwd = bwd


class Tape:
    """Recording of primitive applications for one reverse pass.

    A tape is owned by a single thread and consumed by :func:`backward`.
    Leaves must be registered with :meth:`watch` before the forward pass
    for their gradients to be collected.
    """

    def __init__(self):
        self._next_id = 0
        self._ops: list[_Op] = []
        self._leaves: dict[int, Tensor] = {}
        self._alive = True

    @property
    def alive(self) -> bool:
        return self._alive

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._attach(t)

    def _id_on(self, t: Tensor) -> int | None:
        ref = t.tape_id
        if ref is not None and ref[0] is self:
            return ref[1]
        return None

    def _attach(self, t: Tensor) -> int:
        if not self._alive:
            raise ContractError("tape already consumed by backward()")
        tid = self._id_on(t)
        if tid is None:
            tid = self._next_id
            self._next_id += 1
            t.tape_id = (self, tid)
            if t.requires_grad:
                self._leaves[tid] = t
        return tid


def _find_tape(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        ref = t.tape_id
        if ref is None or not ref[0].alive:
            continue
        if tape is None:
            tape = ref[0]
        elif tape is not ref[0]:
            raise ContractError("inputs are attached to two different live tapes")
    return tape


class GradientMap:
    """Gradient per watched leaf, keyed by tensor identity.

    Leaves unreachable from the loss map to zero tensors of the leaf shape.
    """

    def __init__(self, entries: Iterable[tuple[Tensor, Array]]):
        self._by_id: dict[int, tuple[Tensor, Array]] = {
            id(t): (t, g) for t, g in entries
        }

    def grad(self, t: Tensor) -> Tensor:
        hit = self._by_id.get(id(t))
        if hit is None:
            return Tensor(np.zeros(t.shape))
        return Tensor(hit[1])

    def items(self):
        return ((t, Tensor(g)) for t, g in self._by_id.values())

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)


def _schedule(tape: Tape, schedule: str) -> list[_Op]:
    if schedule == "reverse":
        return list(reversed(tape._ops))
    if schedule == "priority":
        # Kahn's algorithm on the consumer relation, smallest op index first.
        # Any valid order processes an op only after all consumers of its
        # output; this one differs from plain reversal whenever the graph
        # has parallel branches, which the order-independence tests exploit.
        ops = tape._ops
        producer_of = {op.out_id: i for i, op in enumerate(ops)}
        pending = [0] * len(ops)
        consumers_of: dict[int, list[int]] = {}
        for j, op in enumerate(ops):
            for in_id in op.in_ids:
                i = producer_of.get(in_id)
                if i is not None:
                    pending[i] += 1
                    consumers_of.setdefault(i, []).append(j)
        done = [False] * len(ops)
        ready = [i for i, n in enumerate(pending) if n == 0]
        heapq.heapify(ready)
        order: list[_Op] = []
        while ready:
            j = heapq.heappop(ready)
            done[j] = True
            order.append(ops[j])
            for in_id in ops[j].in_ids:
                i = producer_of.get(in_id)
                if i is None:
                    continue
                pending[i] -= 1
                if pending[i] == 0 and not done[i]:
                    heapq.heappush(ready, i)
        return order
    raise ContractError(f"unknown backward schedule '{schedule}'")


def backward(loss: Tensor, schedule: str = "reverse") -> GradientMap:
    """Accumulate d(loss)/d(leaf) for every watched leaf of the loss tape.

    Gradients sum over all paths. The tape is consumed; reusing it raises.
    """
    ref = loss.tape_id
    if ref is None or not ref[0].alive:
        raise ContractError("loss is not attached to a live tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    tape, loss_id = ref[0], ref[1]
    adjoint: dict[int, Array] = {loss_id: np.ones(loss.shape)}
    for op in _schedule(tape, schedule):
        g = adjoint.pop(op.out_id, None)
        if g is None:
            continue
        for in_id, gin in zip(op.in_ids, op.bwd(g)):
            if gin is None:
                continue
            cur = adjoint.get(in_id)
            adjoint[in_id] = gin if cur is None else cur + gin
    entries = []
    for tid, leaf in tape._leaves.items():
        g = adjoint.get(tid)
        entries.append((leaf, g if g is not None else np.zeros(leaf.shape)))
    tape._alive = False
    tape._ops = []
    return GradientMap(entries)


# --- primitive definitions ---------------------------------------------------
#
# Each primitive maps (tensors, attrs) to (out_array, bwd) where bwd maps the
# output adjoint to one adjoint (or None) per input, in order.

def _expect(n: int, ts: Sequence[Tensor], kind: str) -> Sequence[Tensor]:
    if len(ts) != n:
        raise ShapeError(f"{kind}: expected {n} inputs, got {len(ts)}")
    return ts


def _check_elementwise(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ "
                     "(only scalar-vs-tensor broadcast is supported)")


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _prim_add(ts, attrs):
    a, b = _expect(2, ts, "add")
    _check_elementwise(a, b, "add")
    out = a.array + b.array

    def bwd(g):
        return (_reduce_to(g, a.shape), _reduce_to(g, b.shape))

    return out, bwd


def _prim_sub(ts, attrs):
    a, b = _expect(2, ts, "sub")
    _check_elementwise(a, b, "sub")
    out = a.array - b.array

    def bwd(g):
        return (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))

    return out, bwd


def _prim_mul(ts, attrs):
    a, b = _expect(2, ts, "mul")
    _check_elementwise(a, b, "mul")
    av, bv = a.array, b.array
    out = av * bv

    def bwd(g):
        return (_reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape))

    return out, bwd


def _prim_scale(ts, attrs):
    (x,) = _expect(1, ts, "scale")
    factor = float(attrs["factor"])
    out = factor * x.array

    def bwd(g):
        return (factor * g,)

    return out, bwd


def _prim_matmul(ts, attrs):
    a, b = _expect(2, ts, "matmul")
    ta = bool(attrs.get("transpose_a", False))
    tb = bool(attrs.get("transpose_b", False))
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: rank-2 operands required, got {a.shape} @ {b.shape}")
    A = a.array.T if ta else a.array
    B = b.array.T if tb else b.array
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {A.shape} @ {B.shape}")
    out = A @ B

    def bwd(g):
        dA = g @ B.T
        dB = A.T @ g
        return (dA.T if ta else dA, dB.T if tb else dB)

    return out, bwd


def _prim_mean(ts, attrs):
    (x,) = _expect(1, ts, "mean")
    out = np.asarray(x.array.mean()).reshape(())
    n = x.size

    def bwd(g):
        return (np.full(x.shape, float(g) / n),)

    return out, bwd


def _prim_mse(ts, attrs):
    a, b = _expect(2, ts, "mse")
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.array - b.array
    out = np.asarray((d * d).mean()).reshape(())
    n = d.size

    def bwd(g):
        k = 2.0 * float(g) / n
        return (k * d, -k * d)

    return out, bwd


def _prim_concat_axis(ts, attrs):
    if not ts:
        raise ShapeError("concat_axis: at least one input required")
    axis = int(attrs["axis"])
    rank = ts[0].ndim
    if not 0 <= axis < rank:
        raise ShapeError(f"concat_axis: axis {axis} out of range for rank {rank}")
    ref = list(ts[0].shape)
    for t in ts[1:]:
        if t.ndim != rank:
            raise ShapeError("concat_axis: ranks differ")
        other = list(t.shape)
        if [e for i, e in enumerate(other) if i != axis] != \
           [e for i, e in enumerate(ref) if i != axis]:
            raise ShapeError(f"concat_axis: off-axis extents differ, {ts[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.array for t in ts], axis=axis)
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return out, bwd


def _prim_slice_axis(ts, attrs):
    (x,) = _expect(1, ts, "slice_axis")
    axis = int(attrs["axis"])
    start = int(attrs["start"])
    stop = int(attrs["stop"])
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"slice_axis: axis {axis} out of range for rank {x.ndim}")
    extent = x.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"slice_axis: [{start}:{stop}) invalid for extent {extent}")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.ndim))
    out = np.ascontiguousarray(x.array[idx])

    def bwd(g):
        dx = np.zeros(x.shape)
        dx[idx] = g
        return (dx,)

    return out, bwd


def _prim_softmax_lastdim(ts, attrs):
    (x,) = _expect(1, ts, "softmax_lastdim")
    if x.ndim < 1:
        raise ShapeError("softmax_lastdim: rank >= 1 required")
    # max subtraction for stability
    shifted = x.array - x.array.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return s, bwd


def _prim_layer_norm(ts, attrs):
    x, gain, bias = _expect(3, ts, "layer_norm")
    eps = float(attrs["eps"])
    if eps <= 0.0:
        raise ContractError("layer_norm: eps must be > 0")
    d = x.shape[-1] if x.ndim >= 1 else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    mu = x.array.mean(axis=-1, keepdims=True)
    xc = x.array - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.array + bias.array

    def bwd(g):
        lead = tuple(range(x.ndim - 1))
        dgain = (g * y).sum(axis=lead) if lead else (g * y)
        dbias = g.sum(axis=lead) if lead else g.copy()
        dy = g * gain.array
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                    - y * (dy * y).mean(axis=-1, keepdims=True))
        return (dx, dgain, dbias)

    return out, bwd


def _prim_gelu(ts, attrs):
    (x,) = _expect(1, ts, "gelu")
    xv = x.array
    phi = 0.5 * (1.0 + erf(xv / _SQRT2))
    out = xv * phi

    def bwd(g):
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
        return (g * (phi + xv * pdf),)

    return out, bwd


def _prim_silu(ts, attrs):
    (x,) = _expect(1, ts, "silu")
    xv = x.array
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-xv))
    out = xv * sig

    def bwd(g):
        return (g * sig * (1.0 + xv * (1.0 - sig)),)

    return out, bwd


PRIMITIVES: dict[str, Callable] = {
    "add": _prim_add,
    "sub": _prim_sub,
    "mul": _prim_mul,
    "matmul": _prim_matmul,
    "mean": _prim_mean,
    "mse": _prim_mse,
    "concat_axis": _prim_concat_axis,
    "slice_axis": _prim_slice_axis,
    "softmax_lastdim": _prim_softmax_lastdim,
    "layer_norm": _prim_layer_norm,
    "gelu": _prim_gelu,
    "silu": _prim_silu,
    "scale": _prim_scale,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor | float | Array],
                    attrs: dict | None = None) -> Tensor:
    """Apply one named primitive, recording it when a live tape is in play.

    The result is deterministic and checked to be finite; a NaN/Inf output
    raises :class:`NumericError` naming the primitive.
    """
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise ContractError(f"unknown primitive kind '{kind}'")
    tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    out_arr, bwd = prim(tensors, dict(attrs or {}))
    if not np.all(np.isfinite(out_arr)):
        raise NumericError(f"non-finite output from primitive '{kind}'")
    out = Tensor(out_arr)
    tape = _find_tape(tensors)
    if tape is not None:
        in_ids = [tape._attach(t) for t in tensors]
        out_id = tape._attach(out)
        tape._ops.append(_Op(kind, out_id, in_ids, bwd))
    out.requires_grad = any(t.requires_grad for t in tensors)
    return out


# --- thin call wrappers used throughout the model code -----------------------

def add(a, b) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a, b) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a, b) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(x, factor: float) -> Tensor:
    return apply_primitive("scale", [x], {"factor": factor})


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    return apply_primitive("matmul", [a, b],
                           {"transpose_a": transpose_a, "transpose_b": transpose_b})


def mean(x) -> Tensor:
    return apply_primitive("mean", [x])


def mse(a, b) -> Tensor:
    return apply_primitive("mse", [a, b])


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    return apply_primitive("concat_axis", tensors, {"axis": axis})


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    return apply_primitive("slice_axis", [x], {"axis": axis, "start": start, "stop": stop})


def softmax(x) -> Tensor:
    return apply_primitive("softmax_lastdim", [x])


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer_norm", [x, gain, bias], {"eps": eps})


def gelu(x) -> Tensor:
    return apply_primitive("gelu", [x])


def silu(x) -> Tensor:
    return apply_primitive("silu", [x])


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic gradient of f at x and central
    finite differences: max_i |analytic_i - fd_i| / max(1, |analytic_i|).

    f must map a Tensor to a scalar Tensor deterministically.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ContractError(f"grad_check: h={h} outside [1e-6, 1e-3]")
    probe_a = f(Tensor(x.array.copy())).item()
    probe_b = f(Tensor(x.array.copy())).item()
    if probe_a != probe_b:
        raise OracleError("grad_check: f is not deterministic across identical calls")

    tape = Tape()
    xw = Tensor(x.array.copy(), requires_grad=True)
    tape.watch(xw)
    loss = f(xw)
    if loss.size != 1:
        raise ContractError("grad_check: f must return a scalar")
    analytic = backward(loss).grad(xw).array.reshape(-1)

    flat = x.array.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        up = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - h
        down = f(Tensor(bumped.reshape(x.shape))).item()
        fd[i] = (up - down) / (2.0 * h)

    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
