"""Dense tensor substrate: storage, reference convolution, binary16 emulation.

Tensors are thin immutable wrappers around row-major float32 numpy arrays
carrying a precision tag. Convolutions and reductions accumulate in float64.
"""
from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

HALF_MAX = 65504.0

TENSOR_MAGIC = b"QSIM"
TENSOR_VERSION = 1


class TensorError(ValueError):
    """Raised on shape mismatches and malformed tensor data."""


class Precision(enum.IntEnum):
    FULL = 0
    EMULATED_HALF = 1


@dataclass(frozen=True, eq=False)
class Tensor:
    data: np.ndarray
    precision: Precision = Precision.FULL
    overflow_count: int = 0

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy()
        if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
            raise TensorError(f"tensor dims must be positive, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "precision", Precision(self.precision))

    @classmethod
    def wrap(cls, arr: np.ndarray, precision: Precision = Precision.FULL) -> "Tensor":
        """Take ownership of a fresh float32 array without copying it."""
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        arr.flags.writeable = False
        object.__setattr__(t, "data", arr)
        object.__setattr__(t, "precision", Precision(precision))
        object.__setattr__(t, "overflow_count", 0)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        # half values are emulated inside float32 storage
        return self.data.nbytes

    def numpy(self) -> np.ndarray:
        return self.data

    def equals(self, other: "Tensor") -> bool:
        """Bitwise equality of data plus matching shape and precision tag."""
        return (
            self.shape == other.shape
            and self.precision == other.precision
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision.name})"


def as_tensor(x, precision: Precision = Precision.FULL) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32), precision)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Return (cols [C*kh*kw, H'*W'], H', W') for a [C,H,W] float64 input."""
    c = x.shape[0]
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return cols, ho, wo


def _check_conv_args(in_shape, w_shape, stride, padding):
    if len(in_shape) != 3:
        raise TensorError(f"conv2d input must be [C_in,H,W], got {in_shape}")
    if len(w_shape) != 4:
        raise TensorError(f"conv2d weight must be [C_out,C_in,kH,kW], got {w_shape}")
    c_in, h, w = in_shape
    _, wc_in, kh, kw = w_shape
    if wc_in != c_in:
        raise TensorError(f"channel mismatch: input C_in={c_in}, weight C_in={wc_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise TensorError(f"kernel dims must be odd, got kH={kh}, kW={kw}")
    if stride < 1 or padding < 0:
        raise TensorError(f"invalid stride={stride} / padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise TensorError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (padding={padding})")


def conv2d_array(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation on raw arrays; float64 accumulation, float32 result."""
    _check_conv_args(x.shape, weight.shape, stride, padding)
    c_out, _, kh, kw = weight.shape
    cols, ho, wo = _im2col(x.astype(np.float64), kh, kw, stride, padding)
    out = weight.reshape(c_out, -1).astype(np.float64) @ cols
    return out.reshape(c_out, ho, wo).astype(np.float32)


def conv2d(input: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Output spatial size is ``(H + 2*padding - kH) // stride + 1``. Products are
    accumulated in float64; the result is stored at full precision.
    """
    return Tensor.wrap(conv2d_array(input.data, weight.data, stride, padding))


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    weight: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``conv2d`` w.r.t. its input and weight, in float64."""
    c_out, c_in, kh, kw = weight.shape
    g = np.asarray(grad_out, dtype=np.float64).reshape(c_out, -1)
    cols, ho, wo = _im2col(np.asarray(x, dtype=np.float64), kh, kw, stride, padding)
    d_weight = (g @ cols.T).reshape(weight.shape)

    dcols = (weight.reshape(c_out, -1).astype(np.float64).T @ g).reshape(c_in, kh, kw, ho, wo)
    h, w = x.shape[1], x.shape[2]
    dx = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    if padding:
        dx = dx[:, padding:-padding, padding:-padding]
    return dx, d_weight


def demote_half(t: Tensor) -> Tensor:
    """Round every element to the nearest binary16 value (ties to even).

    Magnitudes above the binary16 maximum saturate to +/-65504; the number of
    saturated elements is recorded in ``overflow_count``.
    """
    data = t.data
    if not np.all(np.isfinite(data)):
        raise TensorError("demote_half requires finite input")
    over = np.abs(data) > HALF_MAX
    n_over = int(np.count_nonzero(over))
    if n_over:
        data = np.clip(data, -HALF_MAX, HALF_MAX)
    out = data.astype(np.float16).astype(np.float32)
    return Tensor(out, Precision.EMULATED_HALF, overflow_count=t.overflow_count + n_over)


def pairwise_sum(values) -> float:
    """Fixed-order pairwise (tree) summation in float64.

    Adjacent pairs are added level by level; odd levels are padded with an
    exact zero. The order depends only on the element count.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise TensorError("reduction over an empty tensor")
    while arr.size > 1:
        if arr.size % 2:
            arr = np.append(arr, 0.0)
        arr = arr[0::2] + arr[1::2]
    return float(arr[0])


def reduce_sum(t) -> float:
    data = t.data if isinstance(t, Tensor) else t
    return pairwise_sum(data)


def reduce_mean(t) -> float:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.size == 0:
        raise TensorError("reduction over an empty tensor")
    return pairwise_sum(data) / data.size


# -- binary format ----------------------------------------------------------

def write_tensor(fh: BinaryIO, t: Tensor) -> int:
    """Write one tensor record; returns the number of bytes written."""
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, len(t.shape))
    header += struct.pack(f"<{len(t.shape)}Q", *t.shape)
    header += struct.pack("<B", int(t.precision))
    payload = t.data.astype("<f4").tobytes()
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise TensorError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != TENSOR_VERSION:
        raise TensorError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    (tag,) = struct.unpack("<B", fh.read(1))
    n = int(np.prod(dims))
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise TensorError("truncated tensor payload")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    return Tensor(data, Precision(tag))


def tensor_to_bytes(t: Tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> Tensor:
    return read_tensor(io.BytesIO(raw))
