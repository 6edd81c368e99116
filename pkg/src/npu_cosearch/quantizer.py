"""Fixed-point quantization and batch-norm folding.

Values use a pure fractional format: an ``n``-bit raw integer ``r``
represents ``r / 2**(n-1)`` in [-1, 1).  Rounding is half away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateScale(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointValue:
    raw: int
    bits: int

    def __post_init__(self):
        lo, hi = raw_range(self.bits)
        if not lo <= self.raw <= hi:
            raise ValueError(f"raw {self.raw} outside {self.bits}-bit range")

    @property
    def value(self) -> float:
        return self.raw / (1 << (self.bits - 1))


def raw_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def round_half_away(x):
    """Round to nearest, ties away from zero (scalar or array)."""
    a = np.abs(x)
    fl = np.floor(a)
    r = np.where(a - fl >= 0.5, fl + 1.0, fl)
    return np.copysign(r, x)


def quantize_array(v, bits: int) -> np.ndarray:
    """Vectorized :func:`quantize`, returning raw int64 values."""
    if bits < 2:
        raise ValueError("need at least 2 bits")
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    lo, hi = raw_range(bits)
    scaled = np.ldexp(v, bits - 1)  # exact power-of-two scaling
    return np.clip(round_half_away(scaled), lo, hi).astype(np.int64)


def quantize(v: float, bits: int) -> FixedPointValue:
    return FixedPointValue(int(quantize_array(v, bits)), bits)


def dequantize(raw, bits: int) -> np.ndarray:
    return np.ldexp(np.asarray(raw, dtype=np.float64), -(bits - 1))


def fold_batchnorm(weights, bias, gamma, beta, mean, var, eps=1e-5):
    """Fold inference batch norm into the preceding conv.

    ``weights`` has the output channel on axis 0; ``bias`` may be None
    (treated as zero).  Returns ``(weights', bias')``.
    """
    w = np.asarray(weights, dtype=np.float64)
    k = w.shape[0]
    b = np.zeros(k) if bias is None else np.asarray(bias, dtype=np.float64)
    denom = np.asarray(var, dtype=np.float64) + eps
    if np.any(denom <= 0):
        raise DegenerateScale("batch-norm variance + eps must be positive")
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(denom)
    w_f = w * scale.reshape((k,) + (1,) * (w.ndim - 1))
    b_f = (b - np.asarray(mean, dtype=np.float64)) * scale + np.asarray(beta, dtype=np.float64)
    return w_f, b_f
