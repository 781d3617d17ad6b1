"""Dense matrix numerics with exact FLOP counting and tape-based reverse mode.

A :class:`Matrix` wraps a read-only numpy array whose two trailing axes are
(rows, cols).  Leading axes, when present, are a stack of independent
matrices (heads, batch items); every op treats them elementwise and counts
FLOPs for each matrix in the stack.

FLOP convention, shared with :mod:`flexattn.cost`:

* a multiply-add inside a matmul is 2 FLOPs, booked in ``mul_adds``;
* ``exps`` counts exponentials (softmax, the tanh inside GELU);
* ``divs`` counts divisions (attention scaling, softmax normalisation,
  layer-norm statistics, the division inside tanh);
* ``adds`` counts every other elementwise operation (add, subtract,
  elementwise multiply, max, sqrt).

Per-op rules are the module constants below.  Ops that only move data
(transpose, concat, gather, reshape) cost nothing.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import MaskError, ShapeError

# softmax over a row of length L: L maxes + L subtracts + L sums, L exps, L divs
SOFTMAX_ADDS_PER_ELEM = 3
# layer norm over a row of length L: 7L + 2 adds, 3 divs
LN_ADDS_PER_ELEM = 7
LN_ADDS_PER_ROW = 2
LN_DIVS_PER_ROW = 3
# tanh-form GELU, per element
GELU_ADDS_PER_ELEM = 8
GELU_EXPS_PER_ELEM = 1
GELU_DIVS_PER_ELEM = 1

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class FlopCounter:
    mul_adds: int = 0
    exps: int = 0
    divs: int = 0
    adds: int = 0

    def total(self) -> int:
        return self.mul_adds + self.exps + self.divs + self.adds

    def copy(self) -> "FlopCounter":
        return FlopCounter(self.mul_adds, self.exps, self.divs, self.adds)

    def __add__(self, other: "FlopCounter") -> "FlopCounter":
        return FlopCounter(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def __sub__(self, other: "FlopCounter") -> "FlopCounter":
        return FlopCounter(*(getattr(self, f.name) - getattr(other, f.name) for f in fields(self)))

    def scaled(self, k: int) -> "FlopCounter":
        return FlopCounter(self.mul_adds * k, self.exps * k, self.divs * k, self.adds * k)

    def as_dict(self) -> dict:
        return {"mul_adds": self.mul_adds, "exps": self.exps, "divs": self.divs,
                "adds": self.adds, "total": self.total()}


class Matrix:
    """Immutable stack of row-major matrices (trailing axes are rows, cols)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim < 2:
            raise ShapeError(f"matrix needs at least 2 axes, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Matrix":
        """Adopt ``arr`` without copying; the caller must not mutate it afterwards."""
        if arr.ndim < 2:
            raise ShapeError(f"matrix needs at least 2 axes, got shape {arr.shape}")
        m = cls.__new__(cls)
        arr.setflags(write=False)
        m.data = arr
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int, dtype=np.float64) -> "Matrix":
        return cls.wrap(np.zeros((rows, cols), dtype=dtype))

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Matrix(shape={self.data.shape})"


# --------------------------------------------------------------------------
# gradient tape

class _NonDifferentiable:
    """Marker for gradients that would have to cross a discrete decision."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NON_DIFFERENTIABLE"


NON_DIFFERENTIABLE = _NonDifferentiable()

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("flexattn_tape", default=None)


class GradTape:
    """Records ops on watched matrices while active as a context manager.

    >>> with GradTape() as tape:
    ...     tape.watch(a)
    ...     loss = sum_all(matmul(a, b))
    >>> grads = backward(tape, loss)
    """

    def __init__(self):
        self._nodes: list = []
        self._tracked: dict = {}
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watch(self, *matrices: Matrix) -> None:
        for m in matrices:
            self._tracked[id(m)] = m

    def is_tracked(self, m) -> bool:
        return m is not None and id(m) in self._tracked

    def _record(self, out: Matrix, parents: tuple, vjp) -> None:
        if any(self.is_tracked(p) for p in parents):
            self._tracked[id(out)] = out
            self._nodes.append((out, parents, vjp))

    def __len__(self) -> int:
        return len(self._nodes)


class Gradients:
    """Gradients keyed by matrix identity."""

    def __init__(self, grads: dict, owners: dict):
        self._grads = grads
        self._owners = owners

    def __getitem__(self, m: Matrix):
        return self._grads[id(m)]

    def get(self, m: Matrix, default=None):
        return self._grads.get(id(m), default)

    def __contains__(self, m: Matrix) -> bool:
        return id(m) in self._grads


def backward(tape: GradTape, output: Matrix, output_grad=None) -> Gradients:
    """Reverse-mode sweep from ``output``; ``output_grad`` defaults to ones."""
    if output_grad is None:
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(output_grad.data if isinstance(output_grad, Matrix) else output_grad,
                          dtype=output.data.dtype)
        if seed.shape != output.shape:
            raise ShapeError(f"output grad shape {seed.shape} != output shape {output.shape}")
    grads = {id(output): seed}
    for out, parents, vjp in reversed(tape._nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        if g is NON_DIFFERENTIABLE:
            for p in parents:
                if tape.is_tracked(p):
                    grads.setdefault(id(p), NON_DIFFERENTIABLE)
            continue
        for p, gp in zip(parents, vjp(g)):
            if gp is None or not tape.is_tracked(p):
                continue
            cur = grads.get(id(p))
            if gp is NON_DIFFERENTIABLE:
                if cur is None:
                    grads[id(p)] = NON_DIFFERENTIABLE
            elif cur is None or cur is NON_DIFFERENTIABLE:
                grads[id(p)] = gp
            else:
                grads[id(p)] = cur + gp
    return Gradients(grads, tape._tracked)


def _emit(arr: np.ndarray, parents: tuple, vjp) -> Matrix:
    out = Matrix.wrap(arr)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape._record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _stack_size(shape: tuple) -> int:
    return int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1


# --------------------------------------------------------------------------
# ops

def matmul(a: Matrix, b: Matrix, ctr: FlopCounter | None = None) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul stack mismatch: {a.shape} x {b.shape}") from None
    out = np.matmul(a.data, b.data)
    if ctr is not None:
        stack = int(np.prod(lead, dtype=np.int64)) if lead else 1
        ctr.mul_adds += 2 * a.rows * a.cols * b.cols * stack

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), vjp)


def transpose(x: Matrix) -> Matrix:
    return _emit(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def add(a: Matrix, b: Matrix, ctr: FlopCounter | None = None) -> Matrix:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    if ctr is not None:
        ctr.adds += out.size
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Matrix, b: Matrix, ctr: FlopCounter | None = None) -> Matrix:
    """Elementwise product with broadcasting."""
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}") from None
    if ctr is not None:
        ctr.adds += out.size
    return _emit(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def divide(x: Matrix, s: float, ctr: FlopCounter | None = None) -> Matrix:
    """Divide every entry by the scalar ``s``."""
    out = x.data / s
    if ctr is not None:
        ctr.divs += out.size
    return _emit(out, (x,), lambda g: (g / s,))


def softmax_rows(x: Matrix, mask: np.ndarray | None = None,
                 ctr: FlopCounter | None = None) -> Matrix:
    """Row softmax with an optional additive mask of 0 / -inf entries.

    Rows are shifted by their max before exponentiation.  A row with no
    finite entry raises :class:`MaskError` instead of returning NaN.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask)
        if not np.all((mask == 0) | (mask == -np.inf)):
            raise ValueError("softmax mask entries must be 0 or -inf")
        try:
            z = z + mask.astype(z.dtype, copy=False)
        except ValueError:
            raise ShapeError(f"mask shape {mask.shape} does not fit scores {x.shape}") from None
    if z.shape[-1] == 0:
        raise MaskError("softmax over an empty row")
    m = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise MaskError("softmax row has no finite entry (fully masked row or non-finite input)")
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)
    if ctr is not None:
        ctr.exps += p.size
        ctr.divs += p.size
        ctr.adds += SOFTMAX_ADDS_PER_ELEM * p.size

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (x,), vjp)


def layer_norm(x: Matrix, gain: Matrix, bias: Matrix, ctr: FlopCounter | None = None,
               eps: float = LN_EPS) -> Matrix:
    """Per-row normalisation to zero mean and unit variance, then ``gain * . + bias``."""
    if gain.cols != x.cols or bias.cols != x.cols or gain.rows != 1 or bias.rows != 1:
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} do not fit {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    if ctr is not None:
        n_rows = out.size // x.cols
        ctr.adds += LN_ADDS_PER_ELEM * out.size + LN_ADDS_PER_ROW * n_rows
        ctr.divs += LN_DIVS_PER_ROW * n_rows

    def vjp(g):
        gxhat = g * gain.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), vjp)


def gelu(x: Matrix, ctr: FlopCounter | None = None) -> Matrix:
    """GELU, tanh approximation."""
    v = x.data
    u = _GELU_C * (v + _GELU_A * v ** 3)
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)
    if ctr is not None:
        ctr.adds += GELU_ADDS_PER_ELEM * out.size
        ctr.exps += GELU_EXPS_PER_ELEM * out.size
        ctr.divs += GELU_DIVS_PER_ELEM * out.size

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _emit(out, (x,), vjp)


def concat_rows(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.cols or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"concat_rows shape mismatch: {a.shape} ++ {b.shape}")
    out = np.concatenate([a.data, b.data], axis=-2)
    p = a.rows
    return _emit(out, (a, b), lambda g: (g[..., :p, :], g[..., p:, :]))


def block(x: Matrix, rows: slice = slice(None), cols: slice = slice(None)) -> Matrix:
    """Copy of a rectangular block of every matrix in the stack."""
    out = np.ascontiguousarray(x.data[..., rows, cols])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., rows, cols] = g
        return (gx,)

    return _emit(out, (x,), vjp)


def embedding(table: Matrix, ids) -> Matrix:
    """Look up rows of a 2-D ``table``; result has shape ``ids.shape + (cols,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 0:
        ids = ids.reshape(1)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise ShapeError(f"embedding ids out of range [0, {table.rows})")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.cols))
        return (gt,)

    return _emit(out, (table,), vjp)


def gather_rows(x: Matrix, idx, decided_by: Matrix | None = None) -> Matrix:
    """Pick rows ``idx`` (shape ``x.shape[:-2] + (M,)``) from each matrix of ``x``.

    ``decided_by`` names the matrix the indices were derived from.  The tape
    links it to the output with a non-differentiable edge, so gradients flow
    into the gathered values but never into the decision.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"gather indices {idx.shape} do not fit stack {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise ShapeError(f"gather index out of range [0, {x.rows})")
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def vjp(g):
        n, d = x.rows, x.cols
        stacks = _stack_size(x.shape)
        flat = (idx.reshape(stacks, -1) + (np.arange(stacks) * n)[:, None]).reshape(-1)
        gx = np.zeros((stacks * n, d), dtype=g.dtype)
        np.add.at(gx, flat, g.reshape(-1, d))
        return gx.reshape(x.shape), NON_DIFFERENTIABLE

    return _emit(out, (x, decided_by), vjp)


def split_heads(x: Matrix, heads: int) -> Matrix:
    """(..., N, D) -> (..., heads, N, D/heads)."""
    n, d = x.rows, x.cols
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    lead = x.shape[:-2]
    out = np.swapaxes(x.data.reshape(lead + (n, heads, d // heads)), -3, -2)

    def vjp(g):
        return (np.swapaxes(g, -3, -2).reshape(x.shape),)

    return _emit(out, (x,), vjp)


def merge_heads(x: Matrix) -> Matrix:
    """(..., heads, N, d) -> (..., N, heads*d)."""
    if x.data.ndim < 3:
        raise ShapeError(f"merge_heads needs a head axis, got {x.shape}")
    h, n, d = x.shape[-3:]
    lead = x.shape[:-3]
    out = np.swapaxes(x.data, -3, -2).reshape(lead + (n, h * d))

    def vjp(g):
        return (np.swapaxes(g.reshape(lead + (n, h, d)), -3, -2),)

    return _emit(out, (x,), vjp)


def mean_heads(x: Matrix) -> Matrix:
    """Average over the head axis (..., heads, N, L) -> (..., N, L).  Not counted."""
    h = x.shape[-3]
    out = x.data.mean(axis=-3)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, -3) / h, x.shape).copy(),)

    return _emit(out, (x,), vjp)


def sum_all(x: Matrix) -> Matrix:
    """Sum of every entry as a 1x1 matrix."""
    return _emit(np.array([[x.data.sum()]], dtype=x.dtype), (x,),
                 lambda g: (np.full_like(x.data, g[0, 0]),))


def cross_entropy(logits: Matrix, targets) -> Matrix:
    """Mean negative log-likelihood of integer ``targets`` (shape ``logits.shape[:-1]``)."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not fit logits {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    count = targets.size
    loss = -picked.sum() / count

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (g[0, 0] / count),)

    return _emit(np.array([[loss]], dtype=logits.dtype), (logits,), vjp)
