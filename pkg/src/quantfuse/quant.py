"""Symmetric INT8 fake quantization with learnable log-domain scales.

Forward arithmetic runs in float32 (the storage precision) so every
execution path can reproduce it bit for bit:

    z = x / s;  z = clip(z, -q_max, q_max);  n = rint(z);  y = n * s

Scale resolution, ``s = clip(softplus(log_s) + eps, s_min, s_max)``, always
runs in float64 before the scale is narrowed to float32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Precision, Tensor, TensorError, pairwise_sum


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 8
    s_min: float = 1e-6
    s_max: float = 64.0
    eps: float = 1e-8
    rounding: str = "half_to_even"

    def __post_init__(self):
        if self.bits < 2:
            raise QuantError(f"bits must be >= 2, got {self.bits}")
        if not 0 < self.s_min < self.s_max:
            raise QuantError(f"need 0 < s_min < s_max, got [{self.s_min}, {self.s_max}]")
        # eps >= s_min would make the eps/clip order observable
        if not 0 < self.eps < self.s_min:
            raise QuantError(f"need 0 < eps < s_min, got eps={self.eps}, s_min={self.s_min}")
        if self.rounding != "half_to_even":
            raise QuantError("only half_to_even rounding is supported")

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @classmethod
    def for_half(cls, **kw) -> "QuantConfig":
        """Defaults for the emulated-half path (stricter lower bound)."""
        kw.setdefault("s_min", 1e-4)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {"bits": self.bits, "s_min": self.s_min, "s_max": self.s_max, "eps": self.eps}


@dataclass(frozen=True, eq=False)
class ScaleParams:
    """Trainable log-domain scales of one conv layer."""

    log_w_scale: np.ndarray
    log_a_scale: float

    def __post_init__(self):
        w = np.array(self.log_w_scale, dtype=np.float64).ravel()
        w.flags.writeable = False
        object.__setattr__(self, "log_w_scale", w)
        object.__setattr__(self, "log_a_scale", float(self.log_a_scale))

    @property
    def n_channels(self) -> int:
        return self.log_w_scale.size

    def flat(self) -> np.ndarray:
        """Weight scales followed by the activation scale."""
        return np.append(self.log_w_scale, self.log_a_scale)

    @classmethod
    def from_flat(cls, v: np.ndarray) -> "ScaleParams":
        return cls(v[:-1], v[-1])

    def same_as(self, other: "ScaleParams") -> bool:
        return self.flat().tobytes() == other.flat().tobytes()


@dataclass
class FakeQuantGrad:
    d_input: np.ndarray
    d_log_scale: float | np.ndarray


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def resolve_scale(log_s, cfg: QuantConfig):
    """Map log-domain parameters to clamped positive scales (float64)."""
    v = np.asarray(log_s, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise QuantError("non-finite log scale")
    s = np.clip(softplus(v) + cfg.eps, cfg.s_min, cfg.s_max)
    return float(s) if s.ndim == 0 else s


def _scale_f32(s, x_shape) -> np.ndarray:
    """Validate scales and shape them for broadcasting along axis 0."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(s > 0):
        raise QuantError("scales must be strictly positive")
    if s.ndim == 0:
        return np.float32(s)
    s = s.ravel()
    if s.size != x_shape[0]:
        raise QuantError(f"per-channel scale length {s.size} != output channels {x_shape[0]}")
    return s.astype(np.float32).reshape((-1,) + (1,) * (len(x_shape) - 1))


def int8_codes(x: Tensor, s, cfg: QuantConfig) -> np.ndarray:
    """Integer image ``rint(clip(x/s, -q_max, q_max))``."""
    s32 = _scale_f32(s, x.shape)
    q = np.float32(cfg.q_max)
    z = np.clip(x.data / s32, -q, q)
    dtype = np.int8 if cfg.bits <= 8 else np.int32
    return np.rint(z).astype(dtype)


def fake_quantize(x: Tensor, s, cfg: QuantConfig) -> Tensor:
    """Quantize-dequantize ``x`` with scalar or per-output-channel scales.

    Half-tagged inputs produce half-tagged outputs: the dequantized values
    are re-rounded onto the binary16 grid.
    """
    s32 = _scale_f32(s, x.shape)
    q = np.float32(cfg.q_max)
    y = np.rint(np.clip(x.data / s32, -q, q)) * s32
    if x.precision is Precision.EMULATED_HALF:
        y = y.astype(np.float16).astype(np.float32)
    return Tensor(y, x.precision)


def fake_quantize_backward(x, log_s, cfg: QuantConfig, upstream) -> FakeQuantGrad:
    """Straight-through gradients of ``fake_quantize`` (LSQ scale gradient).

    With ``z = x/s``: the input gradient passes ``upstream`` where
    ``|z| <= q_max`` and is zero elsewhere; the per-element scale gradient is
    ``rint(z) - z`` in range and ``sign(z) * q_max`` when saturated. The scale
    gradient is chained through ``sigmoid(log_s)``, which is zeroed where the
    scale clamp is active. Per-channel sums use pairwise reduction.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != xd.shape:
        raise QuantError(f"upstream shape {up.shape} != input shape {xd.shape}")

    log_s = np.asarray(log_s, dtype=np.float64)
    s = np.asarray(resolve_scale(log_s, cfg))
    s32 = _scale_f32(s, xd.shape)
    q = cfg.q_max
    # mask and rounding come from the float32 forward; the z term is float64
    z32 = xd / s32
    inside = np.abs(z32) <= np.float32(q)
    s64 = s.reshape(s32.shape) if s.ndim else s
    z64 = xd.astype(np.float64) / s64
    ds_elem = np.where(inside, np.rint(z32).astype(np.float64) - z64, np.sign(z64) * q) * up
    d_input = np.where(inside, up, 0.0)

    raw = softplus(log_s) + cfg.eps
    chain = sigmoid(log_s) * ((raw > cfg.s_min) & (raw < cfg.s_max))
    if log_s.ndim == 0:
        d_log = pairwise_sum(ds_elem) * float(chain)
    else:
        per_ch = ds_elem.reshape(xd.shape[0], -1)
        d_log = np.array([pairwise_sum(row) for row in per_ch]) * chain
    return FakeQuantGrad(d_input=d_input, d_log_scale=d_log)


def calibrate_log_scale(max_abs, cfg: QuantConfig):
    """Log-domain parameter whose resolved scale is ``max_abs / q_max``."""
    target = np.asarray(max_abs, dtype=np.float64) / cfg.q_max
    target = np.clip(target, cfg.s_min, cfg.s_max) - cfg.eps
    out = softplus_inv(target)
    return float(out) if out.ndim == 0 else out


def multiply_scales(scales: dict[str, ScaleParams], factor: float, cfg: QuantConfig) -> dict[str, ScaleParams]:
    """Scale every resolved scale by ``factor``, capped just below ``s_max``."""
    if not factor > 0:
        raise QuantError(f"factor must be positive, got {factor}")
    cap = 0.999 * cfg.s_max

    def move(v):
        return softplus_inv(np.minimum(softplus(np.asarray(v, dtype=np.float64)) * factor, cap))

    return {k: ScaleParams(move(p.log_w_scale), float(move(p.log_a_scale))) for k, p in scales.items()}


__all__ = [
    "FakeQuantGrad",
    "QuantConfig",
    "QuantError",
    "ScaleParams",
    "TensorError",
    "calibrate_log_scale",
    "fake_quantize",
    "fake_quantize_backward",
    "int8_codes",
    "multiply_scales",
    "resolve_scale",
    "sigmoid",
    "softplus",
    "softplus_inv",
]
