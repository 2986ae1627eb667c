"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded onto the active :class:`Tape` (a thread-local stack)
only when at least one input requires a gradient.  Outside of a tape every op
is a plain numpy forward evaluation.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = ops.sum(ops.square(x))
    >>> grads = tape.backward(loss)
    >>> grads[x]
    array([2., 4., 6.])

A tape may be consumed by ``backward`` exactly once; a second call raises
``RuntimeError``.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = ["Op", "Tensor", "Tape", "TapeNode", "ops", "grad_check", "no_tape"]


class Op(enum.Enum):
    MATMUL = "matmul"
    ADD = "add"  # broadcasting; doubles as broadcast-add
    MUL = "mul"
    ELU = "elu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    EXP = "exp"
    SUM = "sum"
    MEAN = "mean"
    SQUARE = "square"
    CONCAT = "concat"
    SLICE = "slice"
    RESHAPE = "reshape"
    BILINEAR_SAMPLE = "bilinear_sample"
    # extensions needed by rotation, inverse scaling and the conv encoder
    SIN = "sin"
    COS = "cos"
    RECIPROCAL = "reciprocal"
    CONV2D = "conv2d"


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def astype(self, dtype) -> "Tensor":
        """Detached copy at another precision (same requires_grad flag)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar, all routed through the recorded primitives
    def __add__(self, other):
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return ops.add(self, ops.neg(other))

    def __rsub__(self, other):
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return ops.mul(self, ops.reciprocal(other))
        return ops.mul(self, 1.0 / np.asarray(other))

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        return ops.matmul(other, self)

    def __getitem__(self, idx):
        return ops.slice(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


@dataclass(eq=False)
class TapeNode:
    op: Op
    inputs: tuple[Tensor, ...]
    out: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tape:
    """Records primitive ops in forward execution order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        assert stack and stack[-1] is self
        stack.pop()

    def _record(self, op: Op, inputs: tuple[Tensor, ...], out: Tensor, vjp) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); record on a fresh tape")
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self.leaves.setdefault(id(t), t)
        self._produced.add(id(out))
        self.nodes.append(TapeNode(op, inputs, out, vjp))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Backpropagate from a scalar ``loss``.

        Without ``wrt`` every leaf seen on the tape gets ``.grad`` populated
        (zeros when unreachable) and the leaf->grad map is returned.  With
        ``wrt`` the map covers exactly those tensors, which may be
        intermediates.
        """
        if self._consumed:
            raise RuntimeError("backward() called twice on the same tape")
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        targets = list(self.leaves.values()) if wrt is None else list(wrt)
        keep = {id(t) for t in targets}
        kept: dict[int, np.ndarray] = {}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if id(node.out) in keep and g is not None:
                kept[id(node.out)] = g
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
            node.vjp = None
        kept.update({k: v for k, v in grads.items() if k in keep})
        out = {}
        for t in targets:
            g = kept.get(id(t))
            g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
            out[t] = g
            if wrt is None:
                t.grad = g
        self.nodes.clear()
        return out


_local = threading.local()


def _stack() -> list[Tape]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def _current() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


class no_tape:
    """Context manager suspending recording (e.g. for evaluation)."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)


def _lift(x, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like))


def _emit(op: Op, inputs: tuple[Tensor, ...], data: np.ndarray, vjp) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    tape = _current()
    if req and tape is not None:
        tape._record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _lift(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _lift(a, b.dtype), b
    return _lift(a), _lift(b)


def _check_broadcast(op: Op, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op.value}: shapes {a.shape} and {b.shape} do not broadcast") from None


class ops:
    """Namespace of recorded primitives."""

    @staticmethod
    def add(a, b) -> Tensor:
        a, b = _pair(a, b)
        _check_broadcast(Op.ADD, a, b)
        sa, sb = a.shape, b.shape
        return _emit(Op.ADD, (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    @staticmethod
    def mul(a, b) -> Tensor:
        a, b = _pair(a, b)
        _check_broadcast(Op.MUL, a, b)
        ad, bd = a.data, b.data
        return _emit(Op.MUL, (a, b), ad * bd,
                     lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))

    @staticmethod
    def neg(a) -> Tensor:
        a = _lift(a)
        return ops.mul(a, np.asarray(-1.0, dtype=a.dtype))

    @staticmethod
    def matmul(a, b) -> Tensor:
        a, b = _pair(a, b)
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ValueError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
        ad, bd = a.data, b.data

        def vjp(g):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
            return ga, gb

        return _emit(Op.MATMUL, (a, b), ad @ bd, vjp)

    @staticmethod
    def elu(a) -> Tensor:
        """elu with alpha = 1."""
        a = _lift(a)
        pos = a.data > 0
        out = np.where(pos, a.data, np.expm1(np.minimum(a.data, 0)))
        return _emit(Op.ELU, (a,), out, lambda g: (g * np.where(pos, 1.0, out + 1.0).astype(g.dtype),))

    @staticmethod
    def tanh(a) -> Tensor:
        a = _lift(a)
        out = np.tanh(a.data)
        return _emit(Op.TANH, (a,), out, lambda g: (g * (1 - out * out),))

    @staticmethod
    def sigmoid(a) -> Tensor:
        a = _lift(a)
        # split by sign to avoid overflow in exp
        x = a.data
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
        return _emit(Op.SIGMOID, (a,), out, lambda g: (g * out * (1 - out),))

    @staticmethod
    def exp(a) -> Tensor:
        a = _lift(a)
        out = np.exp(a.data)
        return _emit(Op.EXP, (a,), out, lambda g: (g * out,))

    @staticmethod
    def sin(a) -> Tensor:
        a = _lift(a)
        x = a.data
        return _emit(Op.SIN, (a,), np.sin(x), lambda g: (g * np.cos(x),))

    @staticmethod
    def cos(a) -> Tensor:
        a = _lift(a)
        x = a.data
        return _emit(Op.COS, (a,), np.cos(x), lambda g: (-g * np.sin(x),))

    @staticmethod
    def reciprocal(a) -> Tensor:
        a = _lift(a)
        out = 1.0 / a.data
        return _emit(Op.RECIPROCAL, (a,), out, lambda g: (-g * out * out,))

    @staticmethod
    def square(a) -> Tensor:
        a = _lift(a)
        x = a.data
        return _emit(Op.SQUARE, (a,), x * x, lambda g: (2 * g * x,))

    @staticmethod
    def sum(a, axis=None, keepdims: bool = False) -> Tensor:
        a = _lift(a)
        shape = a.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _emit(Op.SUM, (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), vjp)

    @staticmethod
    def mean(a, axis=None, keepdims: bool = False) -> Tensor:
        a = _lift(a)
        shape = a.shape
        n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, shape).copy(),)

        return _emit(Op.MEAN, (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), vjp)

    @staticmethod
    def concat(tensors: Sequence, axis: int = 0) -> Tensor:
        ts = [_lift(t) for t in tensors]
        dtype = np.result_type(*[t.dtype for t in ts])
        try:
            data = np.concatenate([t.data for t in ts], axis=axis).astype(dtype, copy=False)
        except ValueError:
            raise ValueError(f"concat: shapes {[t.shape for t in ts]} do not join on axis {axis}") from None
        bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

        def vjp(g):
            return [np.take(g, np.arange(lo, hi), axis=axis) if t.requires_grad else None
                    for t, lo, hi in zip(ts, bounds[:-1], bounds[1:])]

        return _emit(Op.CONCAT, tuple(ts), data, vjp)

    @staticmethod
    def slice(a, idx) -> Tensor:
        """Basic (view) indexing only: ints, slices, Ellipsis, None."""
        a = _lift(a)
        items = idx if isinstance(idx, tuple) else (idx,)
        if not all(isinstance(i, (int, np.integer, slice, type(Ellipsis), type(None))) for i in items):
            raise TypeError(f"slice: only basic indexing is recorded, got {idx!r}")
        shape, dtype = a.shape, a.dtype

        def vjp(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g
            return (full,)

        return _emit(Op.SLICE, (a,), a.data[idx], vjp)

    @staticmethod
    def reshape(a, shape) -> Tensor:
        a = _lift(a)
        src = a.shape
        try:
            data = a.data.reshape(shape)
        except ValueError:
            raise ValueError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
        return _emit(Op.RESHAPE, (a,), data, lambda g: (g.reshape(src),))

    @staticmethod
    def bilinear_sample(image, coords) -> Tensor:
        """Sample ``image`` (B, H, W) at normalized ``coords`` (B, N, 2) holding (x, y).

        Pixel centres sit at (2i + 1) / n - 1; samples outside the image read
        zeros.  Returns (B, N).
        """
        image, coords = _pair(image, coords)
        if image.ndim != 3 or coords.ndim != 3 or coords.shape[-1] != 2 or coords.shape[0] != image.shape[0]:
            raise ValueError(f"bilinear_sample: expected image (B,H,W) and coords (B,N,2), "
                             f"got {image.shape} and {coords.shape}")
        img = image.data
        B, H, W = img.shape
        cx, cy = coords.data[..., 0], coords.data[..., 1]
        u = ((cx + 1) * W - 1) / 2
        v = ((cy + 1) * H - 1) / 2
        x0 = np.floor(u)
        y0 = np.floor(v)
        fx = (u - x0).astype(img.dtype)
        fy = (v - y0).astype(img.dtype)
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        flat = img.reshape(B, H * W)
        corners = []
        for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            lin = np.where(valid, yi * W + xi, 0)
            val = np.take_along_axis(flat, lin, axis=1) * valid
            corners.append((lin, valid, val))
        (l00, m00, i00), (l01, m01, i01), (l10, m10, i10), (l11, m11, i11) = corners
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        out = w00 * i00 + w01 * i01 + w10 * i10 + w11 * i11

        def vjp(g):
            gi = gc = None
            if image.requires_grad:
                offs = (np.arange(B) * (H * W))[:, None]
                idx = np.concatenate([(l + offs)[m] for l, m in
                                      ((l00, m00), (l01, m01), (l10, m10), (l11, m11))])
                wts = np.concatenate([(g * w)[m] for w, m in
                                      ((w00, m00), (w01, m01), (w10, m10), (w11, m11))])
                gi = np.bincount(idx, weights=wts, minlength=B * H * W).reshape(B, H, W).astype(img.dtype)
            if coords.requires_grad:
                du = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
                dv = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
                gc = np.stack([g * du * (W / 2), g * dv * (H / 2)], axis=-1).astype(coords.dtype)
            return gi, gc

        return _emit(Op.BILINEAR_SAMPLE, (image, coords), out, vjp)

    @staticmethod
    def conv2d(x, w, stride: int = 1, pad: int = 1) -> Tensor:
        """Cross-correlation of x (B, Cin, H, W) with w (Cout, Cin, k, k), zero padding."""
        x, w = _pair(x, w)
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
            raise ValueError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
        k = w.shape[2]
        xd = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        Ho, Wo = cols.shape[2], cols.shape[3]
        wd = w.data
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        xshape = x.shape

        def vjp(g):
            gx = gw = None
            if w.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gcols = np.tensordot(g, wd, axes=([1], [0]))  # B, Ho, Wo, Cin, k, k
                gxp = np.zeros(xd.shape, dtype=xd.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pad:pad + xshape[2], pad:pad + xshape[3]]
            return gx, gw

        return _emit(Op.CONV2D, (x, w), np.ascontiguousarray(out), vjp)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    ``coords`` restricts the check to a subset of flat indices.
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError(f"f(x) is not finite: {y.data}")
    analytic = tape.backward(y, wrt=[x])[x].ravel()
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x.data)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x.data)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is not finite at coordinate {i} +/- {eps}")
        num = (fp - fm) / (2 * eps)
        err = abs(analytic[i] - num) / max(1e-8, abs(analytic[i]) + abs(num))
        worst = max(worst, err)
    return worst
