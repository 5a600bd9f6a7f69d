"""Minimal reverse-mode automatic differentiation over dense tensors.

Design notes:

* Values are numpy arrays, float32 by default.  Reductions and the
  log-sum-exp inside :func:`log_softmax` accumulate in float64 regardless
  of the storage dtype.  float64 tensors are supported so that numeric
  tests can run the same graph at full precision.
* Spatial tensors use channels-last layout ``(N, H, W, C)`` (or
  ``(H, W, C)`` unbatched) and convolution kernels are ``(kh, kw, ci, co)``.
  On CPU this avoids every layout transpose in the im2col hot path, which
  dominated profiles otherwise.
* Recording is explicit: ops append to the active :class:`Tape`; with no
  active tape they are plain forward computations.  A tape and its tensors
  belong to one thread; independent tapes may run concurrently.
* Broadcasting is restricted to scalar-with-tensor (plus the dedicated
  :func:`bias_add`) to keep every gradient rule auditable.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DomainError, ParameterError, ShapeMismatchError

Scalar = Union[int, float]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array with an optional gradient buffer and tape identity.

    ``requires_grad=False`` marks constants (inputs, labels): operations on
    constants alone are not recorded and no gradient is propagated to them.
    """

    __slots__ = ("values", "grad", "node_id", "requires_grad")

    def __init__(self, values, dtype=None, requires_grad: bool = True):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, node_id={self.node_id})"


class _OpRecord:
    __slots__ = ("kind", "input_ids", "output_id", "ctx")

    def __init__(self, kind: str, input_ids, output_id: int, ctx: dict):
        self.kind = kind
        self.input_ids = input_ids
        self.output_id = output_id
        self.ctx = ctx


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of operations; backward replays it in reverse.

    Usage::

        with Tape() as tape:
            y = ops...
        backward(tape, y)
    """

    def __init__(self):
        self._ops: list[_OpRecord] = []
        self._tensors: dict[int, Tensor] = {}
        self._next_id = 0

    def watch(self, t: Tensor) -> None:
        """Register a tensor on this tape, assigning a node id if new.

        A tensor may carry a stale id from an earlier tape, so membership
        is decided by object identity, not by the id value.
        """
        if t.node_id is not None and self._tensors.get(t.node_id) is t:
            return
        t.node_id = self._next_id
        self._next_id += 1
        self._tensors[t.node_id] = t

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tape = None

    def __len__(self) -> int:
        return len(self._ops)


def _record(kind: str, inputs: Sequence[Tensor], out: Tensor, ctx: dict) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    if not any(t.requires_grad for t in inputs):
        out.requires_grad = False
        return out
    for t in inputs:
        if t.requires_grad:
            tape.watch(t)
    tape.watch(out)
    input_ids = [t.node_id if t.requires_grad else None for t in inputs]
    tape._ops.append(_OpRecord(kind, input_ids, out.node_id, ctx))
    return out


_BACKWARD: dict[str, Callable] = {}


def _backward_rule(kind: str):
    def deco(fn):
        _BACKWARD[kind] = fn
        return fn

    return deco


# ---------------------------------------------------------------------------
# im2col machinery (thread-local workspace pool; shapes repeat every step)
# ---------------------------------------------------------------------------


def _workspace(key: str, shape: tuple, dtype) -> np.ndarray:
    pool = getattr(_state, "pool", None)
    if pool is None:
        pool = _state.pool = {}
    full_key = (key, shape, np.dtype(dtype).str)
    buf = pool.get(full_key)
    if buf is None:
        buf = pool[full_key] = np.empty(shape, dtype)
    return buf


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int,
            key: str) -> np.ndarray:
    """Gather (kh, kw, C) patches of padded NHWC input into a GEMM matrix.

    Returns a view shaped ``(N * out_h * out_w, kh * kw * C)`` over a pooled
    workspace; valid until the next call with the same key/shape.
    """
    n, _, _, c = xp.shape
    cols = _workspace(key, (n, out_h, out_w, kh, kw, c), xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            src = xp[:, di:di + stride * out_h:stride, dj:dj + stride * out_w:stride, :]
            cols[:, :, :, di, dj, :] = src
    return cols.reshape(n * out_h * out_w, kh * kw * c)


def _pad_nhwc(x: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    if pad_h == 0 and pad_w == 0:
        return x
    n, h, w, c = x.shape
    out = _workspace("pad", (n, h + 2 * pad_h, w + 2 * pad_w, c), x.dtype)
    out.fill(0.0)
    out[:, pad_h:pad_h + h, pad_w:pad_w + w, :] = x
    return out


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _as_operands(a, b, op: str):
    """Validate the equal-shape-or-scalar broadcast contract for binary ops."""
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    if not at and not bt:
        raise ContractError(f"{op}: at least one operand must be a Tensor")
    if at and bt:
        if a.shape != b.shape and a.shape != () and b.shape != ():
            raise ShapeMismatchError(
                f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")
    return at, bt


def _binary(kind: str, a, b, fwd, da, db) -> Tensor:
    at, bt = _as_operands(a, b, kind)
    av = a.values if at else a
    bv = b.values if bt else b
    out = Tensor(fwd(av, bv))
    inputs = [t for t in (a, b) if isinstance(t, Tensor)]
    ctx = {"a": av, "b": bv, "a_is_tensor": at, "b_is_tensor": bt,
           "a_shape": a.shape if at else None, "b_shape": b.shape if bt else None,
           "da": da, "db": db}
    return _record(kind, inputs, out, ctx)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to a scalar-shaped operand if needed."""
    if shape == () and g.shape != ():
        return np.asarray(g.sum(dtype=np.float64).astype(g.dtype))
    return g


@_backward_rule("binary")
def _binary_backward(ctx, g):
    grads = []
    if ctx["a_is_tensor"]:
        ga = ctx["da"](ctx, g)
        grads.append(_reduce_to(ga, ctx["a_shape"]))
    if ctx["b_is_tensor"]:
        gb = ctx["db"](ctx, g)
        grads.append(_reduce_to(gb, ctx["b_shape"]))
    return grads


def add(a, b) -> Tensor:
    return _binary("binary", a, b, lambda x, y: x + y,
                   lambda ctx, g: g, lambda ctx, g: g)


def sub(a, b) -> Tensor:
    return _binary("binary", a, b, lambda x, y: x - y,
                   lambda ctx, g: g, lambda ctx, g: -g)


def mul(a, b) -> Tensor:
    return _binary("binary", a, b, lambda x, y: x * y,
                   lambda ctx, g: g * ctx["b"], lambda ctx, g: g * ctx["a"])


def scale(x: Tensor, c: Scalar) -> Tensor:
    out = Tensor(x.values * c)
    return _record("scale", [x], out, {"c": float(c)})


@_backward_rule("scale")
def _scale_backward(ctx, g):
    return [g * ctx["c"]]


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.values, 0))
    return _record("relu", [x], out, {"x": x.values})


@_backward_rule("relu")
def _relu_backward(ctx, g):
    # subgradient 0 at the tie x == 0
    return [g * (ctx["x"] > 0)]


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    out_v = np.empty_like(v)
    pos = v >= 0
    out_v[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_v[~pos] = ev / (1.0 + ev)
    out = Tensor(out_v)
    return _record("sigmoid", [x], out, {"s": out_v})


@_backward_rule("sigmoid")
def _sigmoid_backward(ctx, g):
    s = ctx["s"]
    return [g * s * (1.0 - s)]


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.values))
    return _record("exp", [x], out, {"e": out.values})


@_backward_rule("exp")
def _exp_backward(ctx, g):
    return [g * ctx["e"]]


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise DomainError("log: input contains non-positive values")
    out = Tensor(np.log(x.values))
    return _record("log", [x], out, {"x": x.values})


@_backward_rule("log")
def _log_backward(ctx, g):
    return [g / ctx["x"]]


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(x.values, lo, hi))
    return _record("clamp", [x], out, {"x": x.values, "lo": lo, "hi": hi})


@_backward_rule("clamp")
def _clamp_backward(ctx, g):
    inside = (ctx["x"] > ctx["lo"]) & (ctx["x"] < ctx["hi"])
    return [g * inside]


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values @ b.values)
    return _record("matmul", [a, b], out, {"a": a.values, "b": b.values})


@_backward_rule("matmul")
def _matmul_backward(ctx, g):
    return [g @ ctx["b"].T, ctx["a"].T @ g]


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.values.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(
            f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    out = Tensor(x.values + b.values)
    return _record("bias_add", [x, b], out, {"lead": x.values.ndim - 1})


@_backward_rule("bias_add")
def _bias_add_backward(ctx, g):
    axes = tuple(range(ctx["lead"]))
    return [g, g.sum(axis=axes, dtype=np.float64).astype(g.dtype)]


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected 2-D tensor, got {x.shape}")
    out = Tensor(np.ascontiguousarray(x.values.T))
    return _record("transpose", [x], out, {})


@_backward_rule("transpose")
def _transpose_backward(ctx, g):
    return [np.ascontiguousarray(g.T)]


def diag(x: Tensor) -> Tensor:
    if x.values.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"diag: expected square matrix, got {x.shape}")
    out = Tensor(np.ascontiguousarray(np.diagonal(x.values)))
    return _record("diag", [x], out, {"n": x.shape[0]})


@_backward_rule("diag")
def _diag_backward(ctx, g):
    full = np.zeros((ctx["n"], ctx["n"]), dtype=g.dtype)
    np.fill_diagonal(full, g)
    return [full]


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.values.reshape(shape))
    return _record("reshape", [x], out, {"shape": x.values.shape})


@_backward_rule("reshape")
def _reshape_backward(ctx, g):
    return [g.reshape(ctx["shape"])]


# ---------------------------------------------------------------------------
# convolution / pooling / upsampling (channels-last)
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0,
           cache_key: Optional[str] = None) -> Tensor:
    """2-D cross-correlation (no kernel flip) on channels-last input.

    ``x`` is ``(N, H, W, C_in)`` or ``(H, W, C_in)``; ``kernels`` is
    ``(kh, kw, C_in, C_out)``.  Output height is
    ``(H + 2 * padding - kh) // stride + 1`` and likewise for width.

    ``cache_key`` names a dedicated patch-matrix workspace so the backward
    pass can reuse the forward gather.  The key must be unique per layer
    within one recorded graph.
    """
    if stride < 1:
        raise ParameterError(f"conv2d: stride must be >= 1, got {stride}")
    xv = x.values
    unbatched = xv.ndim == 3
    if unbatched:
        xv = xv[None]
    if xv.ndim != 4 or kernels.values.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d: expected NHWC input and (kh, kw, ci, co) kernels, got "
            f"{x.shape} and {kernels.shape}")
    n, h, w, ci = xv.shape
    kh, kw, kci, co = kernels.shape
    if kci != ci:
        raise ShapeMismatchError(
            f"conv2d: input channels {ci} != kernel channels {kci} "
            f"(input {x.shape}, kernels {kernels.shape})")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeMismatchError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})")
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1

    xp = _pad_nhwc(xv, padding, padding)
    cols = _im2col(xp, kh, kw, stride, out_h, out_w,
                   "fwd" if cache_key is None else f"cols:{cache_key}")
    y = cols @ kernels.values.reshape(kh * kw * ci, co)
    if bias is not None:
        if bias.values.shape != (co,):
            raise ShapeMismatchError(
                f"conv2d: bias {bias.shape} does not match {co} output channels")
        y += bias.values
    y = y.reshape(n, out_h, out_w, co)
    out = Tensor(y[0] if unbatched else y)
    inputs = [x, kernels] if bias is None else [x, kernels, bias]
    ctx = {"x": xv, "w": kernels.values, "stride": stride, "padding": padding,
           "out_hw": (out_h, out_w), "has_bias": bias is not None,
           "unbatched": unbatched, "need_dx": x.requires_grad,
           "cols": cols if cache_key is not None else None}
    return _record("conv2d", inputs, out, ctx)


def _conv2d_input_grad(dy: np.ndarray, wk: np.ndarray, x_shape: tuple,
                       stride: int, padding: int) -> np.ndarray:
    n, h, w, ci = x_shape
    kh, kw, _, co = wk.shape
    if stride == 1:
        # transposed convolution: full correlation of dy with flipped kernels
        wflip = np.ascontiguousarray(
            wk[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(kh * kw * co, ci)
        dyp = _pad_nhwc(dy, kh - 1, kw - 1)
        cols = _im2col(dyp, kh, kw, 1, h + 2 * padding, w + 2 * padding, "bwd_dx")
        dxp = (cols @ wflip).reshape(n, h + 2 * padding, w + 2 * padding, ci)
        if padding:
            dxp = dxp[:, padding:padding + h, padding:padding + w, :]
        return np.ascontiguousarray(dxp)
    # generic strided fallback: scatter-add column gradients
    out_h, out_w = dy.shape[1], dy.shape[2]
    dcols = (dy.reshape(-1, co) @ wk.reshape(-1, co).T).reshape(
        n, out_h, out_w, kh, kw, ci)
    dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, ci), dy.dtype)
    for di in range(kh):
        for dj in range(kw):
            dxp[:, di:di + stride * out_h:stride,
                dj:dj + stride * out_w:stride, :] += dcols[:, :, :, di, dj, :]
    if padding:
        dxp = dxp[:, padding:padding + h, padding:padding + w, :]
    return np.ascontiguousarray(dxp)


@_backward_rule("conv2d")
def _conv2d_backward(ctx, g):
    xv, wk = ctx["x"], ctx["w"]
    stride, padding = ctx["stride"], ctx["padding"]
    out_h, out_w = ctx["out_hw"]
    kh, kw, ci, co = wk.shape
    dy = g[None] if ctx["unbatched"] else g
    dym = dy.reshape(-1, co)

    cols = ctx["cols"]
    if cols is None:
        xp = _pad_nhwc(xv, padding, padding)
        cols = _im2col(xp, kh, kw, stride, out_h, out_w, "bwd_dw")
    dw = (cols.T @ dym).reshape(kh, kw, ci, co)
    if ctx["need_dx"]:
        dx = _conv2d_input_grad(dy, wk, xv.shape, stride, padding)
        if ctx["unbatched"]:
            dx = dx[0]
    else:
        dx = None
    grads = [dx, dw]
    if ctx["has_bias"]:
        grads.append(dym.sum(axis=0, dtype=np.float64).astype(g.dtype))
    return grads


def max_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; the window must divide both extents.

    Ties route the gradient to the first index in row-major window order.
    """
    xv = x.values
    unbatched = xv.ndim == 3
    if unbatched:
        xv = xv[None]
    if xv.ndim != 4:
        raise ShapeMismatchError(f"max_pool2d: expected NHWC input, got {x.shape}")
    n, h, w, c = xv.shape
    k = int(window)
    if k < 1 or h % k or w % k:
        raise ShapeMismatchError(
            f"max_pool2d: window {k} does not divide spatial extent {h}x{w}")
    ho, wo = h // k, w // k
    y = xv.reshape(n, ho, k, wo, k, c).max(axis=(2, 4))
    out = Tensor(y[0] if unbatched else y)
    ctx = {"x": xv, "y": y, "k": k, "unbatched": unbatched}
    return _record("max_pool2d", [x], out, ctx)


@_backward_rule("max_pool2d")
def _max_pool2d_backward(ctx, g):
    xv, y, k = ctx["x"], ctx["y"], ctx["k"]
    n, h, w, c = xv.shape
    ho, wo = h // k, w // k
    dy = g[None] if ctx["unbatched"] else g
    xr = xv.reshape(n, ho, k, wo, k, c)
    dxr = np.zeros_like(xr)
    # route to the first maximum in row-major window order
    taken = np.zeros((n, ho, wo, c), dtype=bool)
    for di in range(k):
        for dj in range(k):
            hit = (xr[:, :, di, :, dj, :] == y) & ~taken
            dxr[:, :, di, :, dj, :] = hit * dy
            taken |= hit
    dx = dxr.reshape(n, h, w, c)
    return [dx[0] if ctx["unbatched"] else dx]


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N, H, W, C) -> (N, C) or (H, W, C) -> (C,)."""
    xv = x.values
    unbatched = xv.ndim == 3
    if unbatched:
        xv = xv[None]
    if xv.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool: expected NHWC input, got {x.shape}")
    y = xv.mean(axis=(1, 2), dtype=np.float64).astype(xv.dtype)
    out = Tensor(y[0] if unbatched else y)
    ctx = {"in_shape": xv.shape, "unbatched": unbatched}
    return _record("global_avg_pool", [x], out, ctx)


@_backward_rule("global_avg_pool")
def _global_avg_pool_backward(ctx, g):
    n, h, w, c = ctx["in_shape"]
    dy = g[None] if ctx["unbatched"] else g
    dx = np.broadcast_to(dy[:, None, None, :] / (h * w), (n, h, w, c)).astype(g.dtype)
    dx = np.ascontiguousarray(dx)
    return [dx[0] if ctx["unbatched"] else dx]


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the spatial axes by an integer factor."""
    xv = x.values
    unbatched = xv.ndim == 3
    if unbatched:
        xv = xv[None]
    if xv.ndim != 4 or factor < 1:
        raise ShapeMismatchError(
            f"upsample_nearest: expected NHWC input and factor >= 1, got "
            f"{x.shape}, {factor}")
    y = np.repeat(np.repeat(xv, factor, axis=1), factor, axis=2)
    out = Tensor(y[0] if unbatched else y)
    ctx = {"f": factor, "unbatched": unbatched, "in_shape": xv.shape}
    return _record("upsample_nearest", [x], out, ctx)


@_backward_rule("upsample_nearest")
def _upsample_nearest_backward(ctx, g):
    n, h, w, c = ctx["in_shape"]
    f = ctx["f"]
    dy = g[None] if ctx["unbatched"] else g
    dx = dy.reshape(n, h, f, w, f, c).sum(axis=(2, 4), dtype=np.float64).astype(g.dtype)
    return [dx[0] if ctx["unbatched"] else dx]


def l2_normalize(x: Tensor, gain: float = 1.0, eps: float = 1e-6) -> Tensor:
    """Scale each row (last axis) to Euclidean length ``gain``.

    Deterministic per-sample feature scaling; the gradient projects onto
    the tangent of the sphere, which removes any radial component.  A gain
    of sqrt(dim) keeps per-component magnitudes near 1 so downstream
    layers see unit-scale inputs and gradients are not attenuated.
    """
    xv = x.values
    norm = np.sqrt(np.einsum("...k,...k->...", xv, xv, dtype=np.float64))
    r = (np.maximum(norm, eps) / gain)[..., None].astype(xv.dtype)
    y = xv / r
    out = Tensor(y)
    return _record("l2_normalize", [x], out, {"y": y, "r": r, "gain": gain})


@_backward_rule("l2_normalize")
def _l2_normalize_backward(ctx, g):
    y, r, gain = ctx["y"], ctx["r"], ctx["gain"]
    radial = np.einsum("...k,...k->...", g, y)[..., None].astype(g.dtype) / gain ** 2
    return [(g - y * radial) / r]


# ---------------------------------------------------------------------------
# reductions and softmax
# ---------------------------------------------------------------------------


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.values.sum(dtype=np.float64), dtype=x.dtype))
    return _record("reduce_sum", [x], out, {"shape": x.shape})


@_backward_rule("reduce_sum")
def _reduce_sum_backward(ctx, g):
    return [np.full(ctx["shape"], g, dtype=g.dtype)]


def reduce_mean(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.values.mean(dtype=np.float64), dtype=x.dtype))
    return _record("reduce_mean", [x], out, {"shape": x.shape, "n": x.size})


@_backward_rule("reduce_mean")
def _reduce_mean_backward(ctx, g):
    return [np.full(ctx["shape"], g / ctx["n"], dtype=g.dtype)]


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax with max-subtraction and float64 accumulation.

    Accepts a vector (one distribution) or a matrix (one distribution per
    row).  ``exp(out)`` sums to 1 along the last axis.
    """
    xv = x.values
    if xv.ndim not in (1, 2) or xv.shape[-1] == 0:
        raise ShapeMismatchError(f"log_softmax: expected non-empty 1-D or 2-D input, got {x.shape}")
    if not np.all(np.isfinite(xv)):
        raise DomainError("log_softmax: input contains non-finite entries")
    x64 = xv.astype(np.float64)
    m = x64.max(axis=-1, keepdims=True)
    z = x64 - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out64 = z - lse
    out = Tensor(out64.astype(xv.dtype))
    return _record("log_softmax", [x], out, {"out": out.values})


@_backward_rule("log_softmax")
def _log_softmax_backward(ctx, g):
    soft = np.exp(ctx["out"])
    return [g - soft * g.sum(axis=-1, keepdims=True)]


# ---------------------------------------------------------------------------
# p-norm distances
# ---------------------------------------------------------------------------


def _check_p(p: float) -> float:
    p = float(p)
    if p < 1.0:
        raise ParameterError(f"p-norm distance requires p >= 1, got {p}")
    return p


def p_norm_distance(u: Tensor, v: Tensor, p: float = 2.0) -> Tensor:
    """``(sum |u_i - v_i|**p) ** (1/p)`` for two equal-length vectors.

    Differentiable wherever u != v; at u == v the gradient is the zero
    vector (subgradient choice).
    """
    p = _check_p(p)
    if u.values.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatchError(
            f"p_norm_distance: expected equal-length vectors, got {u.shape} and {v.shape}")
    diff = u.values.astype(np.float64) - v.values.astype(np.float64)
    a = np.abs(diff)
    d = float((a ** p).sum() ** (1.0 / p))
    out = Tensor(np.asarray(d, dtype=u.dtype))
    return _record("p_norm", [u, v], out, {"diff": diff, "a": a, "d": d, "p": p})


@_backward_rule("p_norm")
def _p_norm_backward(ctx, g):
    d, p = ctx["d"], ctx["p"]
    if d == 0.0:
        z = np.zeros_like(ctx["diff"])
        return [z.astype(g.dtype), z.astype(g.dtype)]
    gu = float(g) * np.sign(ctx["diff"]) * ctx["a"] ** (p - 1.0) * d ** (1.0 - p)
    gu = gu.astype(g.dtype)
    return [gu, -gu]


def pairwise_p_distance(u: Tensor, v: Tensor, p: float = 2.0) -> Tensor:
    """All-pairs p-norm distances between rows: (n, d) x (m, d) -> (n, m).

    Computed in the promoted input dtype; sums over the feature axis
    accumulate in float64.
    """
    p = _check_p(p)
    if u.values.ndim != 2 or v.values.ndim != 2 or u.shape[1] != v.shape[1]:
        raise ShapeMismatchError(
            f"pairwise_p_distance: expected (n, d) and (m, d), got {u.shape} and {v.shape}")
    work = np.promote_types(u.dtype, v.dtype)
    diff = u.values.astype(work)[:, None, :] - v.values.astype(work)[None, :, :]
    if p == 2.0:
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff, dtype=np.float64))
    elif p == 1.0:
        d = np.abs(diff).sum(axis=2, dtype=np.float64)
    else:
        d = (np.abs(diff).astype(np.float64) ** p).sum(axis=2) ** (1.0 / p)
    out = Tensor(d.astype(work))
    return _record("pairwise_p", [u, v], out, {"diff": diff, "d": d, "p": p})


@_backward_rule("pairwise_p")
def _pairwise_p_backward(ctx, g):
    diff, d, p = ctx["diff"], ctx["d"], ctx["p"]
    with np.errstate(divide="ignore"):
        s = np.where(d > 0.0, d ** (1.0 - p), 0.0) * g.astype(np.float64)
    s = s.astype(diff.dtype)
    if p == 2.0:
        core = diff
    elif p == 1.0:
        core = np.sign(diff)
    else:
        core = (np.sign(diff) * np.abs(diff) ** (p - 1.0)).astype(diff.dtype)
    gu = np.einsum("ij,ijk->ik", s, core)
    gv = -np.einsum("ij,ijk->jk", s, core)
    return [gu.astype(g.dtype), gv.astype(g.dtype)]


# ---------------------------------------------------------------------------
# backward driver and SGD
# ---------------------------------------------------------------------------


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(tensor) into ``grad`` for every tensor on the tape.

    Repeated calls without clearing grads accumulate, matching the
    contract that backward adds into existing buffers.
    """
    if root.values.shape != ():
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if root.node_id is None or root.node_id not in tape._tensors:
        raise ContractError("backward: root tensor is not on the tape")
    grads: dict[int, np.ndarray] = {
        root.node_id: np.asarray(1.0, dtype=root.dtype)}
    for rec in reversed(tape._ops):
        g = grads.get(rec.output_id)
        if g is None:
            continue
        input_grads = _BACKWARD[rec.kind](rec.ctx, g)
        for tid, gin in zip(rec.input_ids, input_grads):
            if tid is None or gin is None:
                continue
            acc = grads.get(tid)
            if acc is None:
                gin = np.asarray(gin)
                # own the buffer: passthrough rules may alias g or return views
                if gin is g or gin.base is not None:
                    gin = gin.copy()
                grads[tid] = gin
            else:
                acc += gin
    for tid, g in grads.items():
        t = tape._tensors[tid]
        if g.dtype != t.dtype:
            g = g.astype(t.dtype)
        if g.shape != t.shape:
            g = g.reshape(t.shape)
        if t.grad is None:
            t.grad = g if g.base is None else g.copy()
        else:
            t.grad += g


def sgd_step(params: Mapping[str, Tensor], lr: float) -> None:
    """In-place ``param -= lr * grad`` for every named parameter; grads reset."""
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"sgd_step: parameter '{name}' has no gradient")
    for t in params.values():
        t.values -= np.asarray(lr * t.grad, dtype=t.dtype)
        t.grad = None
