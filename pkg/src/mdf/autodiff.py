"""Reverse-mode automatic differentiation over dense float64 arrays.

Ops execute eagerly on numpy buffers. While a ``Tape`` is active, every op
appends a node (inputs, output, backward closure) in execution order, so the
node list is already topologically sorted and ``Tape.backward`` is a single
reverse sweep. Without an active tape ops run gradient-free, which is what
inference rollouts use.

Every op validates shapes up front and checks the result for NaN/Inf; a
non-finite value anywhere is treated as a bug in the caller, never silently
propagated.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the op's signature."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class Tensor:
    """Dense float64 array, leaf or intermediate of the autodiff graph.

    ``data`` is a row-major numpy array; ``grad`` is lazily allocated by
    ``Tape.backward`` for leaves that receive an adjoint.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, copy: bool = False):
        arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # Operator sugar; the functional forms below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: tuple, out: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops for one forward pass; single-owner.

    Usage::

        with Tape() as tape:
            loss = build_model(...)
        tape.backward(loss)          # accumulates into leaf .grad

    Node inputs always reference tensors created strictly earlier, so the
    record is a topological order and backward is one reverse sweep. Backward
    is pure with respect to activations: calling it twice with the same seed
    doubles the accumulated leaf gradients.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise RuntimeError("tapes do not nest; close the active tape first")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def record(self, op: str, inputs: tuple, out: Tensor, backward_fn: Callable) -> None:
        self.nodes.append(_Node(op, inputs, out, backward_fn))
        self._produced.add(id(out))

    def backward(self, outputs, seeds=None) -> None:
        """Accumulate d(sum(seed * output)) into the .grad of every leaf.

        ``outputs`` is a Tensor or sequence of Tensors produced on this tape;
        ``seeds`` the matching cotangent arrays (default: ones).
        """
        if not self.nodes:
            raise RuntimeError("backward before forward: tape is empty")
        if isinstance(outputs, Tensor):
            outputs = [outputs]
        if seeds is None:
            seeds = [np.ones_like(o.data) for o in outputs]
        elif isinstance(seeds, np.ndarray):
            seeds = [seeds]
        adjoint: dict[int, np.ndarray] = {}
        for out, seed in zip(outputs, seeds):
            if id(out) not in self._produced:
                raise RuntimeError("backward before forward: output was not produced on this tape")
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != out.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {out.data.shape}")
            _accumulate(adjoint, out, seed)
        for node in reversed(self.nodes):
            g = adjoint.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gin in zip(node.inputs, node.backward_fn(g)):
                if gin is not None:
                    _accumulate(adjoint, inp, gin)
        # Whatever is left belongs to leaves (never produced by a node).
        for node in self.nodes:
            for inp in node.inputs:
                g = adjoint.pop(id(inp), None)
                if g is not None:
                    inp.grad = g if inp.grad is None else inp.grad + g


def _accumulate(adjoint: dict, t: Tensor, g: np.ndarray) -> None:
    key = id(t)
    if key in adjoint:
        adjoint[key] = adjoint[key] + g
    else:
        adjoint[key] = g


def _emit(op: str, inputs: tuple, out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    tape = Tape._active
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _need2d(op: str, *ts: Tensor) -> None:
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"{op}: expected 2-d operand, got shape {t.shape}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a (d, 1) bias against a (d, n) matrix."""
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 2 and b.shape == (a.shape[0], 1):
        return _emit("add", (a, b), a.data + b.data,
                     lambda g: (g, g.sum(axis=1, keepdims=True)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} (only (d,1) bias broadcast allowed)")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))
    if a.data.ndim == 2 and b.data.ndim == 2 and b.shape == (a.shape[0], 1):
        return _emit("sub", (a, b), a.data - b.data,
                     lambda g: (g, -g.sum(axis=1, keepdims=True)))
    raise ShapeError(f"sub: shapes {a.shape} and {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python scalar elementwise."""
    return _emit("shift", (a,), a.data + float(c), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (g * b.data, g * a.data))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis {axis} unsupported")
    _need2d("concat", *parts)
    sizes = [p.shape[axis] for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(parts)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit("concat", tuple(parts), out, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _need2d("slice_rows", a)
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] of shape {a.shape}")
    out = a.data[start:stop, :].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop, :] = g
        return (full,)

    return _emit("slice_rows", (a,), out, bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _need2d("slice_cols", a)
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] of shape {a.shape}")
    out = a.data[:, start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", (a,), out, bwd)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Partition along an axis; inverse of concat for matching sizes."""
    total = a.shape[axis]
    if sum(sizes) != total:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {total}")
    out, off = [], 0
    for s in sizes:
        if axis == 0:
            out.append(slice_rows(a, off, off + s))
        else:
            out.append(slice_cols(a, off, off + s))
        off += s
    return out


def tile(a: Tensor, reps: int, axis: int = 1) -> Tensor:
    """Repeat a matrix along an axis; backward sums the repeats."""
    _need2d("tile", a)
    if reps < 1:
        raise ShapeError(f"tile: reps {reps} < 1")
    if axis == 1:
        out = np.tile(a.data, (1, reps))
        n = a.shape[1]

        def bwd(g):
            return (_sum_tiles_cols(g, reps, n),)
    elif axis == 0:
        out = np.tile(a.data, (reps, 1))
        m = a.shape[0]

        def bwd(g):
            return (g.reshape(reps, m, a.shape[1]).sum(axis=0),)
    else:
        raise ShapeError(f"tile: axis {axis} unsupported")
    return _emit("tile", (a,), out, bwd)


def _sum_tiles_cols(g: np.ndarray, reps: int, n: int) -> np.ndarray:
    # np.tile along axis 1 lays the reps out contiguously: [A A A].
    return sum(g[:, i * n:(i + 1) * n] for i in range(reps))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _emit("relu", (a,), out, lambda g: (g * (a.data > 0.0),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def sin(a: Tensor) -> Tensor:
    return _emit("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _emit("cos", (a,), np.cos(a.data), lambda g: (g * -np.sin(a.data),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log: non-positive input")
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def powf(a: Tensor, p: float) -> Tensor:
    """Elementwise power with real exponent; requires positive base unless p
    is a non-negative integer."""
    p = float(p)
    if p != int(p) or p < 0:
        if np.any(a.data <= 0.0):
            raise NonFiniteError(f"powf: non-positive base with exponent {p}")
    out = np.power(a.data, p)
    return _emit("powf", (a,), out,
                 lambda g: (g * p * np.power(a.data, p - 1.0),))


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    """Row-wise (axis=1) or column-wise (axis=0) softmax, shift-stabilized."""
    _need2d("softmax", a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax", (a,), out, bwd)


_LN_EPS = 1e-5


def layer_norm(a: Tensor, axis: int = 0) -> Tensor:
    """Normalize to zero mean / unit variance along an axis (no affine)."""
    _need2d("layer_norm", a)
    n = a.shape[axis]
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    out = xc * inv

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _emit("layer_norm", (a,), out, bwd)


def dropout_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a fixed 0/1 keep-mask (no rescaling).

    The mask is a constant: gradients flow only through ``a``. With keep
    probability 1-p the expectation of the output is (1-p) times the input.
    """
    if mask.shape != a.shape:
        raise ShapeError(f"dropout_mask: mask {mask.shape} vs input {a.shape}")
    m = mask.astype(np.float64)
    return _emit("dropout", (a,), a.data * m, lambda g: (g * m,))


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        out = np.asarray(a.data.mean())
        return _emit("reduce_mean", (a,), out,
                     lambda g: (np.full_like(a.data, float(g) / n),))
    _need2d("reduce_mean", a)
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=True)
    if axis == 0:
        return _emit("reduce_mean", (a,), out,
                     lambda g: (np.repeat(g / n, a.shape[0], axis=0),))
    return _emit("reduce_mean", (a,), out,
                 lambda g: (np.repeat(g / n, a.shape[1], axis=1),))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = np.asarray(a.data.sum())
        return _emit("reduce_sum", (a,), out,
                     lambda g: (np.full_like(a.data, float(g)),))
    _need2d("reduce_sum", a)
    out = a.data.sum(axis=axis, keepdims=True)
    if axis == 0:
        return _emit("reduce_sum", (a,), out,
                     lambda g: (np.repeat(g, a.shape[0], axis=0),))
    return _emit("reduce_sum", (a,), out,
                 lambda g: (np.repeat(g, a.shape[1], axis=1),))


def transpose(a: Tensor) -> Tensor:
    _need2d("transpose", a)
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape}")
    old = a.data.shape
    return _emit("reshape", (a,), a.data.reshape(shape),
                 lambda g: (g.reshape(old),))


def take_columns(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather columns of a (d, V) table; backward scatter-adds."""
    _need2d("take_columns", table)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= table.shape[1]:
        raise ShapeError(f"take_columns: indices out of range for table {table.shape}")
    out = table.data[:, idx]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full.T, idx, g.T)
        return (full,)

    return _emit("take_columns", (table,), out, bwd)


def inverse(a: Tensor, jitter: float = 1e-9) -> Tensor:
    """Matrix inverse of a square (usually SPD) matrix.

    Retries once with ``jitter * I`` added; if still singular, raises with a
    hint to raise the measurement-noise floor (the common cause here).
    """
    _need2d("inverse", a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"inverse: non-square {a.shape}")
    eye = np.eye(a.shape[0])
    try:
        inv = np.linalg.solve(a.data, eye)
    except np.linalg.LinAlgError:
        try:
            inv = np.linalg.solve(a.data + jitter * eye, eye)
        except np.linalg.LinAlgError:
            raise NonFiniteError(
                "inverse: singular innovation covariance; increase the noise floor R"
            ) from None

    def bwd(g):
        return (-inv.T @ g @ inv.T,)

    return _emit("inverse", (a,), inv, bwd)


def conv2d(img: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 'same' convolution of an (H, W, Cin) image.

    ``kernel`` is (kh*kw*Cin, Cout) in patch-major layout, ``bias`` (Cout, 1).
    Output is (H, W, Cout). Forward/backward go through im2col so both are
    plain matmuls plus a scatter.
    """
    if img.data.ndim != 3:
        raise ShapeError(f"conv2d: image must be (H, W, C), got {img.shape}")
    h, w, cin = img.shape
    k2c, cout = kernel.shape
    kh = int(round(math.sqrt(k2c / cin)))
    if kh * kh * cin != k2c:
        raise ShapeError(f"conv2d: kernel rows {k2c} not square*{cin}")
    if bias.shape != (cout, 1):
        raise ShapeError(f"conv2d: bias {bias.shape}, want ({cout}, 1)")
    pad = kh // 2
    padded = np.pad(img.data, ((pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(padded, h, w, kh, cin)          # (H*W, kh*kh*Cin)
    out = (cols @ kernel.data + bias.data.T).reshape(h, w, cout)

    def bwd(g):
        gmat = g.reshape(h * w, cout)
        dk = cols.T @ gmat
        db = gmat.sum(axis=0, keepdims=True).T
        dcols = gmat @ kernel.data.T
        dpad = np.zeros_like(padded)
        _col2im(dpad, dcols, h, w, kh, cin)
        dimg = dpad[pad:pad + h, pad:pad + w, :]
        return dimg, dk, db

    return _emit("conv2d", (img, kernel, bias), out, bwd)


def _im2col(padded: np.ndarray, h: int, w: int, k: int, cin: int) -> np.ndarray:
    cols = np.empty((h * w, k * k * cin))
    i = 0
    for dy in range(k):
        for dx in range(k):
            patch = padded[dy:dy + h, dx:dx + w, :]
            cols[:, i:i + cin] = patch.reshape(h * w, cin)
            i += cin
    return cols


def _col2im(dpad: np.ndarray, dcols: np.ndarray, h: int, w: int, k: int, cin: int) -> None:
    i = 0
    for dy in range(k):
        for dx in range(k):
            dpad[dy:dy + h, dx:dx + w, :] += dcols[:, i:i + cin].reshape(h, w, cin)
            i += cin


def avg_pool2d(img: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling of an (H, W, C) image."""
    if img.data.ndim != 3:
        raise ShapeError(f"avg_pool2d: image must be (H, W, C), got {img.shape}")
    h, w, c = img.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = img.data.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))

    def bwd(g):
        up = np.repeat(np.repeat(g, k, axis=0), k, axis=1) / (k * k)
        return (up,)

    return _emit("avg_pool2d", (img,), out, bwd)


# ---------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[[dict], Tensor], point: dict[str, Tensor],
               h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the named tensors to a scalar Tensor and must be
    deterministic (fix any dropout streams before calling). Error per entry is
    |analytic - fd| / max(1, |fd|); the max over all entries of all named
    tensors is returned.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"grad_check: step {h} outside [1e-7, 1e-3]")
    for t in point.values():
        t.zero_grad()
    with Tape() as tape:
        out = fn(point)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: fn must be scalar-valued, got {out.shape}")
    tape.backward(out)
    worst = 0.0
    for name, t in point.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(point).item()
            flat[i] = orig - h
            fm = fn(point).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
