"""k-bit activation quantization on a fixed truncation range.

The uniform quantizer snaps onto the grid {i * r / (2^k - 1)} with ties
rounding toward +inf, so both endpoints 0 and r are representable. Gradients
use the straight-through convention: the snap contributes nothing, only the
surrounding clamp (or tanh) does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, apply_op


class QuantRangeError(ValueError):
    """Input fed to the bare quantizer lies outside [0, range_max]."""


@dataclass
class QuantConfig:
    bits: int = 4
    range_max: float = 6.0
    mode: str = "uniform"  # uniform | tanh | off

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        if self.range_max <= 0:
            raise ValueError(f"range_max must be positive, got {self.range_max}")
        if self.mode not in ("uniform", "tanh", "off"):
            raise ValueError(f"unknown quantization mode {self.mode!r}")

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    @property
    def step(self) -> float:
        return self.range_max / (2 ** self.bits - 1)


def snap_index(arr: np.ndarray, bits: int, range_max: float) -> np.ndarray:
    """Index of the nearest grid level for already-truncated values; ties go up.

    floor(x/step + 0.5) implements round-half-up (toward +inf). Arithmetic
    runs in float64 so the float32 grid is exact and the snap is idempotent;
    the chain is fused in place to keep one temporary.
    """
    step = float(range_max) / (2 ** bits - 1)
    u = np.divide(arr, step, dtype=np.float64)
    u += 0.5
    np.floor(u, out=u)
    np.clip(u, 0, 2 ** bits - 1, out=u)
    return u


def snap_to_grid(arr: np.ndarray, bits: int, range_max: float) -> np.ndarray:
    """Nearest grid level {i * range_max / (2^bits - 1)}, ties toward +inf."""
    step = float(range_max) / (2 ** bits - 1)
    idx = snap_index(arr, bits, range_max)
    idx *= step
    return idx.astype(np.asarray(arr).dtype)


def quantize_uniform(x, cfg: QuantConfig, tol: float = 1e-6):
    """Snap in-range values onto the cfg grid; rejects out-of-range input.

    Callers clamp first: this operator owns only the grid, not the range.
    Accepts a Tensor or a bare array and returns the same kind; the tensor
    form is forward-only (no gradient path, see quantized_relu6 for STE).
    """
    if cfg.mode != "uniform":
        raise ValueError(f"quantize_uniform needs mode='uniform', got {cfg.mode!r}")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    lo, hi = arr.min(initial=0.0), arr.max(initial=0.0)
    if lo < -tol or hi > cfg.range_max + tol:
        raise QuantRangeError(
            f"values in [{lo:g}, {hi:g}] exceed [0, {cfg.range_max:g}] beyond tol={tol:g}")
    out = snap_to_grid(arr, cfg.bits, cfg.range_max)
    return Tensor(out) if isinstance(x, Tensor) else out


def quantized_relu6(x: Tensor, cfg: QuantConfig) -> Tensor:
    """Clamp to [0, range_max], snap to the grid, pass clamp-only gradients.

    Forward equals quantize_uniform(clamp(x)); backward is exactly the clamp
    subgradient (1 strictly inside the range, 0 outside and at the kinks) —
    the straight-through estimator, so the quantizer never zeroes or scales
    the gradient signal.
    """
    xd = x.data
    rmax = xd.dtype.type(cfg.range_max)
    clamped = np.minimum(np.maximum(xd, 0), rmax)
    if cfg.mode == "off":
        out = clamped
    else:
        out = snap_to_grid(clamped, cfg.bits, cfg.range_max)
    mask = ((xd > 0) & (xd < rmax)).astype(xd.dtype)

    def bwd(g):
        return (g * mask,)

    return apply_op("quantized_relu6", (x,), out, bwd)


def quantize_tanh(x: Tensor, cfg: QuantConfig) -> Tensor:
    """Tanh-domain quantizer: squash to [0,1], snap, map back affinely.

    y = 2 * snap((tanh(x)+1)/2) - 1. The backward path is the tanh
    derivative alone (straight through the snap), which is what makes this
    variant prone to saturating gradients.
    """
    if cfg.mode != "tanh":
        raise ValueError(f"quantize_tanh needs mode='tanh', got {cfg.mode!r}")
    t = np.tanh(x.data)
    unit = (np.tanh(x.data.astype(np.float64)) + 1.0) / 2.0
    idx = snap_index(unit, cfg.bits, 1.0)
    # output levels computed straight from the index, so they are the
    # canonical grid values {2*i/(2^bits - 1) - 1}
    out = idx * (2.0 / (2 ** cfg.bits - 1)) - 1.0

    def bwd(g):
        return (g * (1.0 - t * t),)

    return apply_op("quantize_tanh", (x,), out.astype(x.data.dtype), bwd)


def quantization_error_bound(cfg: QuantConfig) -> float:
    """Worst-case snap distance for in-range input: half a grid step."""
    return cfg.range_max / (2.0 * (2 ** cfg.bits - 1))
