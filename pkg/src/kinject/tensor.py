"""Dense tensors with reverse-mode autodiff, plus the kernels the models use.

Every kernel records forward FLOPs and allocation bytes into the active
:class:`OpCounters`, attributed to the current :func:`scope` tag.
"""
from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32

# per-element FLOP charges for non-matmul kernels
SOFTMAX_FLOPS = 5
RMSNORM_FLOPS = 4
SILU_FLOPS = 4
ROTARY_FLOPS = 3
MSE_FLOPS = 3
CE_FLOPS = 5


class ShapeError(ValueError):
    pass


class EmptyLossSupport(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@dataclass
class OpCounters:
    flops_accumulated: int = 0
    flops_backward: int = 0
    allocations: int = 0
    grad_allocations: int = 0
    live_bytes: int = 0
    peak_live_bytes: int = 0
    flops_by_scope: dict = field(default_factory=lambda: defaultdict(int))
    flops_by_op: dict = field(default_factory=lambda: defaultdict(int))
    flops_by_scope_op: dict = field(default_factory=lambda: defaultdict(int))
    grad_bytes_by_scope: dict = field(default_factory=lambda: defaultdict(int))
    graph_nodes_by_scope: dict = field(default_factory=lambda: defaultdict(int))
    attention_shapes: list = field(default_factory=list)

    def alloc(self, nbytes: int) -> None:
        self.allocations += 1
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_live_bytes:
            self.peak_live_bytes = self.live_bytes

    def release(self, nbytes: int) -> None:
        self.live_bytes -= nbytes

    def add_flops(self, op: str, n: int) -> None:
        self.flops_accumulated += n
        self.flops_by_op[op] += n
        self.flops_by_scope[_state.scope] += n
        self.flops_by_scope_op[(_state.scope, op)] += n

    def reset(self) -> None:
        fresh = OpCounters()
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(fresh, name))

    def summary(self) -> dict:
        return {
            "flops_accumulated": self.flops_accumulated,
            "flops_backward": self.flops_backward,
            "allocations": self.allocations,
            "grad_allocations": self.grad_allocations,
            "peak_live_bytes": self.peak_live_bytes,
            "flops_by_scope": dict(self.flops_by_scope),
            "grad_bytes_by_scope": dict(self.grad_bytes_by_scope),
        }


class _State:
    def __init__(self) -> None:
        self.counters = OpCounters()
        self.scope = "default"
        self.grad_enabled = True
        self.trace_attention = False


_state = _State()


def counters() -> OpCounters:
    return _state.counters


@contextlib.contextmanager
def measure() -> Iterator[OpCounters]:
    """Route all counting inside the block to a fresh counter set."""
    prev = _state.counters
    fresh = OpCounters()
    _state.counters = fresh
    try:
        yield fresh
    finally:
        _state.counters = prev


@contextlib.contextmanager
def scope(tag: str) -> Iterator[None]:
    prev = _state.scope
    _state.scope = tag
    try:
        yield
    finally:
        _state.scope = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def trace_attention() -> Iterator[list]:
    prev = _state.trace_attention
    _state.trace_attention = True
    _state.counters.attention_shapes = []
    try:
        yield _state.counters.attention_shapes
    finally:
        _state.trace_attention = prev


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_precision(dtype) -> Iterator[None]:
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class _Saved:
    """Holds kernel-private buffers kept for backward so they show up in the byte ledger."""

    __slots__ = ("arrays", "_ledger", "_nbytes")

    def __init__(self, *arrays: np.ndarray) -> None:
        self.arrays = arrays
        self._ledger = _state.counters
        self._nbytes = sum(a.nbytes for a in arrays)
        self._ledger.alloc(self._nbytes)

    def __del__(self) -> None:
        self._ledger.release(self._nbytes)


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_freed",
                 "tag", "name", "_ledger", "_nbytes", "_grad_ledger")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._freed = False
        self.tag = _state.scope
        self.name = name
        self._ledger = _state.counters
        self._nbytes = arr.nbytes
        self._ledger.alloc(self._nbytes)
        self._grad_ledger = None

    def __del__(self) -> None:
        self._ledger.release(self._nbytes)
        if self._grad is not None and self._grad_ledger is not None:
            self._grad_ledger.release(self._grad.nbytes)

    # -- gradient slot -------------------------------------------------
    @property
    def grad(self) -> np.ndarray | None:
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        if value is None:
            self._drop_grad()
            return
        if not self.requires_grad:
            raise GraphError("tensor with requires_grad=False cannot hold a gradient")
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"gradient shape {value.shape} != value shape {self.data.shape}")
        if self._grad is None:
            self._alloc_grad()
        self._grad[...] = value

    def _alloc_grad(self) -> None:
        c = _state.counters
        self._grad = np.zeros_like(self.data)
        self._grad_ledger = c
        c.alloc(self._grad.nbytes)
        c.grad_allocations += 1
        c.grad_bytes_by_scope[self.tag] += self._grad.nbytes

    def _drop_grad(self) -> None:
        if self._grad is not None:
            self._grad_ledger.release(self._grad.nbytes)
            self._grad = None
            self._grad_ledger = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._alloc_grad()
        self._grad += g

    def zero_grad(self) -> None:
        if self._grad is None:
            self._alloc_grad()
        else:
            self._grad.fill(0)

    # -- conveniences --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, tag={self.tag!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        _state.counters.graph_nodes_by_scope[_state.scope] += 1
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _charge_backward(n: int) -> None:
    _state.counters.flops_backward += n


# ---------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    flops = 2 * batch * m * k * n
    _state.counters.add_flops("matmul", flops)
    ad, bd = a.data, b.data

    def bw(g):
        _charge_backward(2 * flops)
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    _state.counters.add_flops("add", out.size)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    _state.counters.add_flops("mul", out.size)
    ad, bd = a.data, b.data

    def bw(g):
        _charge_backward(2 * g.size)
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)
    _state.counters.add_flops("mul", out.size)
    return _make(out, (a,), lambda g: (g * a.data.dtype.type(c),), "scale")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    _state.counters.add_flops("sum", a.data.size)
    shape = a.shape
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.shape
    return _make(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def gather_rows(x: Tensor, index: np.ndarray, valid: np.ndarray) -> Tensor:
    """out[b, j] = x[b, index[b, j]] where valid, zero elsewhere. x is (B, T, D)."""
    if x.ndim != 3 or index.shape[0] != x.shape[0] or index.shape != valid.shape:
        raise ShapeError(f"gather_rows: x {x.shape}, index {index.shape}, valid {valid.shape}")
    B, T, D = x.shape
    idx = np.where(valid, index, 0)
    if np.any(valid & ((index < 0) | (index >= T))):
        raise ShapeError(f"gather_rows: index out of range for length {T}")
    bidx = np.arange(B)[:, None]
    m = valid[..., None].astype(x.dtype)
    out = x.data[bidx, idx] * m

    def bw(g):
        gx = np.zeros((B, T, D), dtype=g.dtype)
        np.add.at(gx, (np.broadcast_to(bidx, idx.shape), idx), g * m)
        return (gx,)

    return _make(out, (x,), bw, "gather_rows")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig
    _state.counters.add_flops("silu", xd.size * SILU_FLOPS)
    saved = _Saved(sig) if (_state.grad_enabled and x.requires_grad) else None

    def bw(g):
        _ = saved
        _charge_backward(xd.size * SILU_FLOPS)
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _make(out, (x,), bw, "silu")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    if weight.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm: weight {weight.shape} does not match features of {x.shape}")
    xd, wd = x.data, weight.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    out = xhat * wd
    _state.counters.add_flops("rms_norm", xd.size * RMSNORM_FLOPS)
    saved = _Saved(xhat) if (_state.grad_enabled and (x.requires_grad or weight.requires_grad)) else None

    def bw(g):
        _ = saved
        _charge_backward(xd.size * 2 * RMSNORM_FLOPS)
        gw = (g * xhat).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * wd
            gx = inv * (gxhat - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _make(out, (x, weight), bw, "rms_norm")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    _state.counters.add_flops("softmax", xd.size * SOFTMAX_FLOPS)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def rotary_tables(length: int, head_dim: int, base: float = 10000.0, offset: int = 0,
                  dtype=None) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ShapeError(f"rotary: head_dim {head_dim} must be even")
    dtype = dtype or _DEFAULT_DTYPE
    inv_freq = 1.0 / base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    pos = np.arange(offset, offset + length, dtype=np.float64)
    ang = np.outer(pos, inv_freq)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved-halves pairs of the last axis; x is (..., T, head_dim)."""
    T, hd = x.shape[-2], x.shape[-1]
    if cos.shape != (T, hd // 2):
        raise ShapeError(f"rotary: tables {cos.shape} do not match input {x.shape}")
    half = hd // 2
    xd = x.data
    x1, x2 = xd[..., :half], xd[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
    _state.counters.add_flops("rotary", xd.size * ROTARY_FLOPS)

    def bw(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return _make(out, (x,), bw, "rotary")


def causal_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = True,
                     key_valid: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over (B, H, T, dh) inputs.

    ``causal=False`` gives bidirectional attention; ``key_valid`` (B, T) then hides padding.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"causal_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    B, H, T, dh = q.shape
    if _state.trace_attention:
        _state.counters.attention_shapes.append((_state.scope, T))
    sc = q.dtype.type(1.0 / math.sqrt(dh))
    qd, kd, vd = q.data, k.data, v.data
    s = np.matmul(qd, np.swapaxes(kd, -1, -2)) * sc
    if causal:
        s[..., np.triu(np.ones((T, T), dtype=bool), k=1)] = -np.inf
    elif key_valid is not None:
        s = np.where(np.asarray(key_valid, dtype=bool)[:, None, None, :], s, -np.inf)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, vd)
    c = _state.counters
    c.add_flops("attention", 4 * B * H * T * T * dh + B * H * T * T * SOFTMAX_FLOPS)
    needs = _state.grad_enabled and (q.requires_grad or k.requires_grad or v.requires_grad)
    saved = _Saved(p) if needs else None

    def bw(g):
        _ = saved
        _charge_backward(8 * B * H * T * T * dh)
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(vd, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        gq = np.matmul(gs, kd)
        gk = np.matmul(np.swapaxes(gs, -1, -2), qd)
        return gq, gk, gv

    return _make(out, (q, k, v), bw, "attention")


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, T, D) -> (B, H, T, D // H)."""
    B, T, D = x.shape
    if D % n_heads:
        raise ShapeError(f"split_heads: width {D} not divisible by {n_heads} heads")
    out = np.ascontiguousarray(x.data.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3))
    return _make(out, (x,), lambda g: (g.transpose(0, 2, 1, 3).reshape(B, T, D),), "split_heads")


def merge_heads(x: Tensor) -> Tensor:
    """(B, H, T, dh) -> (B, T, H * dh)."""
    B, H, T, dh = x.shape
    out = np.ascontiguousarray(x.data.transpose(0, 2, 1, 3).reshape(B, T, H * dh))
    return _make(out, (x,), lambda g: (g.reshape(B, T, H, dh).transpose(0, 2, 1, 3),), "merge_heads")


def gated_mlp(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """SiLU-gated MLP: (silu(x @ w_gate) * (x @ w_up)) @ w_down."""
    D = x.shape[-1]
    if w_gate.shape != w_up.shape or w_gate.shape[0] != D or w_down.shape != w_gate.shape[::-1]:
        raise ShapeError(f"gated_mlp: x {x.shape}, gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape}")
    xd = x.data
    a = np.matmul(xd, w_gate.data)
    b = np.matmul(xd, w_up.data)
    sig = 1.0 / (1.0 + np.exp(-a))
    act = a * sig
    hmid = act * b
    out = np.matmul(hmid, w_down.data)
    rows = xd.size // D
    M = w_gate.shape[1]
    mm = 2 * rows * D * M
    _state.counters.add_flops("gated_mlp", 3 * mm + a.size * (SILU_FLOPS + 1))
    needs = _state.grad_enabled and any(t.requires_grad for t in (x, w_gate, w_up, w_down))
    saved = _Saved(a, b, sig, hmid) if needs else None

    def bw(g):
        _ = saved
        _charge_backward(6 * mm + a.size * 2 * SILU_FLOPS)
        g2 = g.reshape(rows, D)
        gw_down = np.matmul(hmid.reshape(rows, M).T, g2) if w_down.requires_grad else None
        gh = np.matmul(g, w_down.data.T)
        gb = gh * act
        ga = gh * b * (sig * (1.0 + a * (1.0 - sig)))
        x2 = xd.reshape(rows, D)
        gw_gate = np.matmul(x2.T, ga.reshape(rows, M)) if w_gate.requires_grad else None
        gw_up = np.matmul(x2.T, gb.reshape(rows, M)) if w_up.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.matmul(ga, w_gate.data.T) + np.matmul(gb, w_up.data.T)
        return gx, gw_gate, gw_up, gw_down

    return _make(out, (x, w_gate, w_up, w_down), bw, "gated_mlp")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    out = table.data[ids]
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make(out, (table,), bw, "embedding")


def _check_mask(mask: np.ndarray, shape: tuple, op: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeError(f"{op}: mask {mask.shape} does not match sequence dims {shape}")
    if not mask.any():
        raise EmptyLossSupport(f"{op}: empty loss support (mask has no unmasked positions)")
    return mask


def masked_mse(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Mean of squared error over the features of unmasked positions.

    ``mask`` covers all but the last (feature) axis.
    """
    td = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != td.shape:
        raise ShapeError(f"masked_mse: prediction {pred.shape} vs target {td.shape}")
    mask = _check_mask(mask, pred.shape[:-1], "masked_mse")
    m = mask[..., None]
    diff = np.where(m, pred.data - td, 0).astype(pred.dtype)
    n = mask.sum() * pred.shape[-1]
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    _state.counters.add_flops("mse", pred.data.size * MSE_FLOPS)
    tgt = target if isinstance(target, Tensor) else None

    def bw(g):
        gp = (2.0 / n) * g * diff
        return (gp, -gp) if tgt is not None else (gp,)

    parents = (pred, tgt) if tgt is not None else (pred,)
    return _make(out, parents, bw, "mse")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token cross-entropy over unmasked positions. logits (..., V), targets (...)."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    mask = _check_mask(mask, targets.shape, "cross_entropy")
    ld = logits.data
    z = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    tgt = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    n = mask.sum()
    out = np.asarray(-(picked * mask).sum() / n, dtype=logits.dtype)
    _state.counters.add_flops("cross_entropy", ld.size * CE_FLOPS)
    saved = _Saved(logp) if (_state.grad_enabled and logits.requires_grad) else None

    def bw(g):
        _ = saved
        p = np.exp(logp)
        np.put_along_axis(p, tgt[..., None], np.take_along_axis(p, tgt[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (mask[..., None] * (g / n)).astype(p.dtype),)

    return _make(out, (logits,), bw, "cross_entropy")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, then free the graph."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("backward on a graph that was already freed")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad (no parameter reaches it)")
    order = _topo(loss)
    c = _state.counters
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is not None and node is not loss:
            c.release(g.nbytes)
        if node._backward is None:
            if g is not None:
                node._accumulate(g)
            continue
        if g is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                c.alloc(pg.nbytes)
                c.grad_allocations += 1
                c.grad_bytes_by_scope[p.tag] += pg.nbytes
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._freed = True
