"""
Primitive operations over Tensors.

Every primitive computes its forward value with numpy and, when a tape is
recording on this thread and one of its inputs is tracked, registers an
adjoint rule on that tape. All results are checked for finiteness.
"""
import math
from typing import Optional, Sequence, Union
import numpy as np
from scipy.special import ndtr
from bppo.base.exceptions import NumericsException
from bppo.numerics.tape import Tensor, current_tape, VJP

RMS_EPS = 1e-6
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
    """Wrap a forward value and record it on the active tape if needed."""

    if not np.all(np.isfinite(value)):
        raise NumericsException(f"Non-finite output from {op}")

    out = Tensor(value)

    tape = current_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(op, tuple(inputs), out, vjp)

    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise NumericsException(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def constant(value, name: Optional[str] = None) -> Tensor:
    """A tensor which is never recorded (no gradient flows into it)."""
    return Tensor(value, name=name)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (g * b.data, g * a.data)
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:

    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsException(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    return _emit(
        "matmul",
        (a, b),
        a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g)
    )


def transpose(a: Tensor) -> Tensor:

    if a.data.ndim != 2:
        raise NumericsException(f"transpose: expected a matrix, not {a.shape}")

    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with max-subtraction."""

    y = _softmax_rows(a.data)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), y, vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""

    y = _log_softmax_rows(a.data)
    p = np.exp(y)

    def vjp(g):
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), y, vjp)


def log(a: Tensor) -> Tensor:

    if np.any(a.data <= 0):
        raise NumericsException("log: non-positive input")

    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def rms_norm(x: Tensor, offset: Tensor, eps: float = RMS_EPS) -> Tensor:
    """
    RMS normalization over the last axis with gain (1 + offset).
    The offset is a vector of length x.shape[-1], initialized at zero.
    """

    if offset.data.ndim != 1 or offset.shape[0] != x.shape[-1]:
        raise NumericsException(
            f"rms_norm: offset {offset.shape} does not match input {x.shape}"
        )

    r = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    n = x.data / r
    gain = 1.0 + offset.data
    y = n * gain

    def vjp(g):
        dn = g * gain
        dx = (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r
        doffset = np.sum((g * n).reshape(-1, n.shape[-1]), axis=0)
        return (dx, doffset)

    return _emit("rms_norm", (x, offset), y, vjp)


def gelu(a: Tensor) -> Tensor:
    """GELU in its exact Gaussian-CDF form, x * Phi(x)."""

    cdf = ndtr(a.data)
    pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI

    return _emit(
        "gelu",
        (a,),
        a.data * cdf,
        lambda g: (g * (cdf + a.data * pdf),)
    )


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a [rows x dim] table."""

    idx = np.asarray(ids, dtype=np.int64)

    if table.data.ndim != 2:
        raise NumericsException(f"embedding: table must be a matrix ({table.shape})")
    if idx.size > 0 and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise NumericsException("embedding: index out of range")

    def vjp(g):
        dt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(dt, idx, g)
        return (dt,)

    return _emit("embedding", (table,), table.data[idx], vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:

    if not 0 <= start <= stop <= a.shape[0]:
        raise NumericsException(f"slice_rows: [{start}:{stop}] outside {a.shape}")

    def vjp(g):
        da = np.zeros(a.shape, dtype=np.float64)
        da[start:stop] = g
        return (da,)

    return _emit("slice_rows", (a,), a.data[start:stop].copy(), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:

    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise NumericsException(f"slice_cols: [{start}:{stop}] outside {a.shape}")

    def vjp(g):
        da = np.zeros(a.shape, dtype=np.float64)
        da[:, start:stop] = g
        return (da,)

    return _emit("slice_cols", (a,), a.data[:, start:stop].copy(), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:

    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise NumericsException("concat_cols: parts must be matrices with equal rows")

    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        return tuple(
            g[:, bounds[i]:bounds[i + 1]]
            for i in range(len(parts))
        )

    return _emit(
        "concat_cols",
        tuple(parts),
        np.concatenate([p.data for p in parts], axis=1),
        vjp
    )


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True with a constant."""

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise NumericsException(f"masked_fill: mask {mask.shape} vs {a.shape}")

    keep = ~mask
    return _emit(
        "masked_fill",
        (a,),
        np.where(mask, float(value), a.data),
        lambda g: (g * keep,)
    )


def gather(a: Tensor, idx: Sequence[int]) -> Tensor:
    """Pick one column per row: out[t] = a[t, idx[t]]."""

    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise NumericsException(f"gather: index {idx.shape} vs {a.shape}")
    if idx.size > 0 and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise NumericsException("gather: index out of range")

    rows = np.arange(a.shape[0])

    def vjp(g):
        da = np.zeros(a.shape, dtype=np.float64)
        da[rows, idx] = g
        return (da,)

    return _emit("gather", (a,), a.data[rows, idx].copy(), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient passes only inside the interval."""

    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(
        "clip",
        (a,),
        np.clip(a.data, lo, hi),
        lambda g: (g * inside,)
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to the first operand."""

    _same_shape("minimum", a, b)
    pick_a = a.data <= b.data

    return _emit(
        "minimum",
        (a, b),
        np.where(pick_a, a.data, b.data),
        lambda g: (g * pick_a, g * ~pick_a)
    )


def reduce_sum(a: Tensor, axis: Union[int, None] = None) -> Tensor:
    """Sum over all entries (axis=None) or over the last axis (axis=-1)."""

    if axis is None:

        # Fixed left-to-right order over the flattened values
        total = 0.0
        for v in a.data.reshape(-1):
            total += v

        return _emit(
            "sum",
            (a,),
            np.array(total),
            lambda g: (np.full(a.shape, float(g), dtype=np.float64),)
        )

    if axis not in (-1, a.data.ndim - 1):
        raise NumericsException("reduce_sum: only the last axis is supported")

    return _emit(
        "sum_rows",
        (a,),
        np.sum(a.data, axis=-1),
        lambda g: (np.repeat(g[..., None], a.shape[-1], axis=-1),)
    )


def reduce_mean(a: Tensor, axis: Union[int, None] = None) -> Tensor:

    n = a.size if axis is None else a.shape[-1]
    return scale(reduce_sum(a, axis=axis), 1.0 / n)
