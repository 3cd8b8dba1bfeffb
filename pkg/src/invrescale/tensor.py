"""Dense tensors plus a recording tape for reverse-mode gradients.

The op set is deliberately closed: elementwise arithmetic, a direct 2-D
convolution, channel concat/narrow, and whole-tensor reductions.  That is
everything the coupling networks and losses need, and it keeps the
finite-difference check exhaustive.  Image tensors are (batch, channel,
height, width); reductions produce 0-d scalars.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


def _as_float_array(data, dtype: Optional[str]) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(DTYPES[dtype], copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Immutable value holder; ops return new tensors and never write in place."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype: Optional[str] = None, requires_grad: bool = False):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.dtype})"

    # Small amount of operator sugar so model code stays readable.  Binary ops
    # require identical shapes; scalar multiply maps to `scale`.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf: value plus a persistent gradient accumulator."""

    __slots__ = ("grad", "name")

    def __init__(self, data, dtype: Optional[str] = None, name: str = ""):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def assign(self, data: np.ndarray) -> None:
        """Overwrite the value in place (optimizer step / checkpoint load)."""
        if data.shape != self.data.shape:
            raise ValueError(
                f"parameter {self.name!r}: cannot assign shape {data.shape} "
                f"over {self.data.shape}"
            )
        self.data[...] = data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.dtype})"


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


_TAPES = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = _TAPES.stack = []
    return stack


class Tape:
    """Execution-ordered record of primitive applications.

    Recording order is a topological order by construction (every input
    exists before its consumer), so the backward pass is a single reverse
    sweep with no graph search.  The active-tape stack is thread-local: one
    tape per training step, independent tapes may run on other threads.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(parameter) into every reachable Parameter.

        Unreachable parameters are untouched (their grad stays whatever it
        was, all-zero after `zero_grad`).  Grads of intermediate tensors are
        transient and freed as the sweep passes them.
        """
        if loss.data.ndim != 0:
            raise ValueError("backward target must be a scalar (0-d) tensor")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if isinstance(loss, Parameter):
            loss.grad += 1.0
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if isinstance(parent, Parameter):
                    parent.grad += pg
                else:
                    key = id(parent)
                    held = grads.get(key)
                    grads[key] = pg if held is None else held + pg


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def custom_op(value: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    """Wrap a computed value as a taped primitive (used by wavelet/STE ops).

    `backward(g)` must return one gradient array (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = value
    tape = _active_tape()
    tracked = tape is not None and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        tape._nodes.append(_Node(out, parents, backward))
    return out


_result = custom_op


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise family
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data + c, (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _result(out_data, (a,), lambda g: (g * out_data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Stable two-sided form: never exponentiates a positive argument.
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    return _result(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    slope = float(slope)
    out_data = np.where(x > 0, x, x * slope)
    return _result(out_data, (a,), lambda g: (np.where(x > 0, g, g * slope),))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    # Derivative floored away from the x=0 singularity.
    return _result(out_data, (a,),
                   lambda g: (g * (0.5 / np.maximum(out_data, 1e-30)),))


# ---------------------------------------------------------------------------
# shape plumbing: concat along channels, narrow (slice) along channels
# ---------------------------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat: empty input")
    dt = parts[0].data.dtype
    for p in parts[1:]:
        if p.data.dtype != dt:
            raise ValueError("concat: dtype mismatch")
    sizes = [p.data.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g):
        pieces = []
        start = 0
        for size in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            pieces.append(g[tuple(sl)])
            start += size
        return tuple(pieces)

    return _result(out_data, parts, backward)


def narrow(a: Tensor, start: int, length: int, axis: int = 1) -> Tensor:
    extent = a.data.shape[axis]
    if start < 0 or length < 1 or start + length > extent:
        raise ValueError(
            f"narrow: slice [{start}:{start + length}] outside axis extent {extent}"
        )
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = np.ascontiguousarray(a.data[sl])
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _result(out_data, (a,), backward)


def split_channels(a: Tensor, first: int) -> tuple[Tensor, Tensor]:
    """Split along channels into (first, rest)."""
    total = a.data.shape[1]
    return narrow(a, 0, first), narrow(a, first, total - first)


# ---------------------------------------------------------------------------
# reductions (row-major pairwise via numpy; bit-reproducible single-threaded)
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor) -> Tensor:
    shape, dt = a.data.shape, a.data.dtype
    out_data = np.sum(a.data)
    return _result(np.asarray(out_data, dtype=dt), (a,),
                   lambda g: (np.broadcast_to(g, shape),))


def reduce_mean(a: Tensor) -> Tensor:
    shape, dt = a.data.shape, a.data.dtype
    n = a.data.size
    out_data = np.asarray(np.sum(a.data) / n, dtype=dt)
    return _result(out_data, (a,),
                   lambda g: (np.broadcast_to(g / n, shape),))


def reduce_sumsq(a: Tensor) -> Tensor:
    x = a.data
    flat = x.reshape(-1)
    out_data = np.asarray(flat @ flat, dtype=x.dtype)
    return _result(out_data, (a,), lambda g: (x * (2.0 * g),))


# ---------------------------------------------------------------------------
# conv2d: direct cross-correlation, stride 1, size-preserving padding
# ---------------------------------------------------------------------------

def _valid_window(h: int, w: int, dy: int, dx: int):
    """Output region whose shifted source index stays in bounds (zero pad)."""
    oy0, oy1 = max(0, -dy), min(h, h - dy)
    ox0, ox1 = max(0, -dx), min(w, w - dx)
    return oy0, oy1, ox0, ox1


def _conv_raw(x: np.ndarray, kern: np.ndarray, pad: int) -> np.ndarray:
    """Direct convolution: one GEMM per kernel tap, accumulated with the
    tap's spatial shift.  Writes stay (B,Co,H,W)-sized, which beats building
    an im2col matrix at these channel counts."""
    b, ci, h, w = x.shape
    co, _, kh, _ = kern.shape
    xf = x.reshape(b, ci, h * w)
    if kh == 1:
        return np.matmul(kern[:, :, 0, 0], xf).reshape(b, co, h, w)
    taps = np.ascontiguousarray(kern.transpose(2, 3, 0, 1))  # (kh,kh,Co,Ci)
    out = np.zeros((b, co, h, w), dtype=x.dtype)
    for p in range(kh):
        for q in range(kh):
            ptap = np.matmul(taps[p, q], xf).reshape(b, co, h, w)
            dy, dx = p - pad, q - pad
            oy0, oy1, ox0, ox1 = _valid_window(h, w, dy, dx)
            out[:, :, oy0:oy1, ox0:ox1] += ptap[:, :, oy0 + dy:oy1 + dy, ox0 + dx:ox1 + dx]
    return out


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, pad: int) -> np.ndarray:
    b, ci, h, w = x.shape
    co = g.shape[1]
    if kh == 1:
        gk = np.matmul(g.reshape(b, co, h * w), x.reshape(b, ci, h * w).transpose(0, 2, 1))
        return np.ascontiguousarray(gk.sum(axis=0)[:, :, None, None])
    # One contiguous (B*H*W, Ci) copy of x, then a small GEMM per tap against
    # the tap-shifted gradient.
    xcol = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(b * h * w, ci)
    gk = np.empty((co, ci, kh, kh), dtype=x.dtype)
    gsh = np.zeros((co, b, h, w), dtype=x.dtype)
    gt = g.transpose(1, 0, 2, 3)
    for p in range(kh):
        for q in range(kh):
            dy, dx = p - pad, q - pad
            oy0, oy1, ox0, ox1 = _valid_window(h, w, dy, dx)
            gsh[...] = 0.0
            gsh[:, :, oy0 + dy:oy1 + dy, ox0 + dx:ox1 + dx] = gt[:, :, oy0:oy1, ox0:ox1]
            gk[:, :, p, q] = gsh.reshape(co, b * h * w) @ xcol
    return gk


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, pad: Optional[int] = None) -> Tensor:
    """Cross-correlation plus bias; kernel 1x1 or 3x3, output keeps H x W."""
    xd, kd, bd = x.data, weight.data, bias.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input/kernel, got {xd.shape} and {kd.shape}")
    co, ci, kh, kw = kd.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d: kernel must be square 1x1 or 3x3, got {kh}x{kw}")
    if xd.shape[1] != ci:
        raise ValueError(
            f"conv2d: input has {xd.shape[1]} channels but kernel expects {ci}"
        )
    if bd.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bd.shape} != ({co},)")
    if xd.dtype != kd.dtype or xd.dtype != bd.dtype:
        raise ValueError("conv2d: input/kernel/bias dtype mismatch")
    want = (kh - 1) // 2
    if pad is None:
        pad = want
    elif pad != want:
        raise ValueError(f"conv2d: pad must be {want} for a {kh}x{kh} kernel, got {pad}")

    out_data = _conv_raw(xd, kd, pad) + bd[:, None, None]
    b, _, h, w = xd.shape

    def backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gk = _conv_kernel_grad(xd, g, kh, pad)
        # d/d(input): correlate grad with the flipped, channel-transposed kernel
        kt = np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _conv_raw(g, kt, pad)
        return gx, gk, gb

    return _result(out_data, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# misc helpers
# ---------------------------------------------------------------------------

def zeros(shape, dtype: str = "f32") -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPES[dtype]))


def parameters_of(objs: Iterable) -> list[Parameter]:
    """Flatten .parameters() of each item into one list."""
    out: list[Parameter] = []
    for obj in objs:
        out.extend(obj.parameters())
    return out
