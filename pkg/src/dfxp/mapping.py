"""Dynamic fixed-point (block floating-point) tensor format and mappings.

A block of b-bit signed integers shares one power-of-two scale. The scale
is the largest binary exponent found in the source tensor, so the largest
element always lands in the top quarter of the integer range. One integer
unit is worth ``2**(scale - b + 2)`` — the quantization step of the block.

Float -> integer mapping supports round-to-nearest (half away from zero)
and stochastic rounding on an explicit counter-based stream, so every
mapping is reproducible and order-independent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BIT_WIDTH_MIN",
    "BIT_WIDTH_MAX",
    "ZERO_EXPONENT",
    "DfpTensor",
    "WideAccumulator",
    "Nearest",
    "Stochastic",
    "RoundingMode",
    "ErrorStats",
    "Fp32RangeError",
    "derive_stream",
    "exponent_of",
    "map_to_dfp",
    "inverse_map",
    "inverse_map_wide",
    "stochastic_round",
    "quant_error_stats",
]

BIT_WIDTH_MIN = 2
# Above 26 bits the step drops below FP32 mantissa granularity at the
# block scale, so finer widths buy nothing in an FP32 pipeline.
BIT_WIDTH_MAX = 26

# Exponent reported for an exactly-zero element (sentinel, below any
# normal FP32 exponent).
ZERO_EXPONENT = -127

FP32_MAX = float(np.finfo(np.float32).max)


class Fp32RangeError(OverflowError):
    """A represented value does not fit the FP32 range."""

    def __init__(self, msg: str, index: int | None = None):
        super().__init__(msg)
        self.index = index


# ── number format containers ────────────────────────────────────────────


@dataclass(frozen=True)
class DfpTensor:
    """Block of b-bit signed integers sharing one power-of-two scale.

    ``values`` live in an int32 container but are confined to the
    symmetric range ±(2**(b-1) - 1). Element i represents the real value
    ``values[i] * 2**(scale - bit_width + 2)``.

    Mapping and requantization outputs additionally keep the largest
    magnitude at or above ``2**(b-2)`` (the max-exponent element is
    normalized near full scale); sliced or gathered views need not.
    """

    values: np.ndarray
    scale: int
    bit_width: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int32)
        if not (BIT_WIDTH_MIN <= self.bit_width <= BIT_WIDTH_MAX):
            raise ValueError(f"bit width {self.bit_width} outside [{BIT_WIDTH_MIN}, {BIT_WIDTH_MAX}]")
        qmax = (1 << (self.bit_width - 1)) - 1
        if v.size and int(np.abs(v).max()) > qmax:
            raise ValueError(f"values exceed ±{qmax} for {self.bit_width}-bit block")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "scale", int(self.scale))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def step_exponent(self) -> int:
        """t such that element i represents values[i] * 2**t."""
        return self.scale - self.bit_width + 2

    @property
    def qmax(self) -> int:
        return (1 << (self.bit_width - 1)) - 1


@dataclass(frozen=True)
class WideAccumulator:
    """64-bit integer accumulation buffer with a step exponent.

    Element i represents ``values[i] * 2**step_exponent``. Produced by
    integer matmuls and reductions before requantization or inverse
    mapping; reduction-length guards keep every element inside int64.
    """

    values: np.ndarray
    step_exponent: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "step_exponent", int(self.step_exponent))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class Nearest:
    """Round to nearest, ties away from zero (symmetric under negation)."""


@dataclass(frozen=True)
class Stochastic:
    """Unbiased randomized rounding on an explicit counter-based stream.

    ``stream`` keys a Philox generator; identical streams reproduce
    identical roundings, distinct streams are independent.
    """

    stream: int = 0


RoundingMode = Nearest | Stochastic


@dataclass(frozen=True)
class ErrorStats:
    """Elementwise round-trip error statistics of one mapped block."""

    max_abs_err: float
    mean_err: float
    var_err: float
    step: float


# ── stream derivation ────────────────────────────────────────────────────

_MASK64 = (1 << 64) - 1


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_stream(*parts: int | str) -> int:
    """Fold (seed, tensor id, step, ...) into one 64-bit stream key.

    Pure and stable across processes, unlike built-in ``hash``.
    """
    h = 0x243F6A8885A308D3
    for p in parts:
        v = _fnv1a64(p) if isinstance(p, str) else int(p) & _MASK64
        h = _splitmix64(h ^ v)
    return h


def _stream_rng(stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream & _MASK64))


# ── mapping operations ───────────────────────────────────────────────────


def exponent_of(x):
    """floor(log2(|x|)) per element; ZERO_EXPONENT sentinel for 0.

    Raises ValueError on NaN/Inf input.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("exponent_of requires finite input")
    _, e = np.frexp(arr)
    out = np.where(arr == 0.0, ZERO_EXPONENT, e - 1)
    if np.isscalar(x) or arr.ndim == 0:
        return int(out)
    return out.astype(np.int64)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def stochastic_round(x, rng: np.random.Generator):
    """floor(x) + 1 with probability frac(x), else floor(x); E[result] = x.

    ``rng`` is the explicit stream state; exact integers never move.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("stochastic_round requires finite input")
    lo = np.floor(arr)
    frac = arr - lo
    up = rng.random(arr.shape) < frac
    out = lo + up
    if np.isscalar(x) or arr.ndim == 0:
        return int(out)
    return out


def map_to_dfp(F, bit_width: int, mode: RoundingMode = Nearest()) -> DfpTensor:
    """Map a float tensor to a b-bit integer block with one shared scale.

    The scale is the maximum element exponent; each element is divided by
    the step ``2**(scale - b + 2)`` and rounded under ``mode``, saturating
    at ±(2**(b-1) - 1). An all-zero tensor maps to zeros with scale 0.
    """
    if not (BIT_WIDTH_MIN <= bit_width <= BIT_WIDTH_MAX):
        raise ValueError(f"bit width {bit_width} outside [{BIT_WIDTH_MIN}, {BIT_WIDTH_MAX}]")
    f32 = np.asarray(F, dtype=np.float32)
    if not np.all(np.isfinite(f32)):
        raise ValueError("map_to_dfp requires finite input")
    peak = float(np.abs(f32).max()) if f32.size else 0.0
    if peak == 0.0:
        return DfpTensor(np.zeros(f32.shape, dtype=np.int32), 0, bit_width)

    # The largest magnitude carries the largest exponent == the scale.
    _, e = np.frexp(np.float64(peak))
    scale = int(e) - 1
    # f / step is exact in float64: scaling by a power of two only moves
    # the exponent, and |f / step| < 2**(b-1) <= 2**25.
    scaled = f32.astype(np.float64) * 2.0 ** float(bit_width - 2 - scale)
    if isinstance(mode, Nearest):
        q = _round_half_away(scaled)
    elif isinstance(mode, Stochastic):
        q = stochastic_round(scaled, _stream_rng(mode.stream))
    else:
        raise TypeError(f"unknown rounding mode {mode!r}")
    qmax = (1 << (bit_width - 1)) - 1
    q = np.clip(q, -qmax, qmax)
    return DfpTensor(q.astype(np.int32), scale, bit_width)


def inverse_map(Q: DfpTensor) -> np.ndarray:
    """Integer block back to FP32: values * 2**(scale - b + 2), exact."""
    wide = Q.values.astype(np.float64) * 2.0 ** float(Q.step_exponent)
    return wide.astype(np.float32)


def inverse_map_wide(W: WideAccumulator) -> np.ndarray:
    """Accumulator to FP32: values * 2**t rounded to nearest.

    int64 -> float64 -> float32 is correctly rounded (53 >= 2*24 + 2, so
    the double rounding is benign). Raises Fp32RangeError with the first
    offending flat index if a value exceeds the FP32 range.
    """
    wide = W.values.astype(np.float64) * 2.0 ** float(W.step_exponent)
    over = np.abs(wide) > FP32_MAX
    if np.any(over):
        idx = int(np.flatnonzero(over)[0])
        raise Fp32RangeError(f"value {wide.flat[idx]!r} at flat index {idx} exceeds FP32 range", index=idx)
    return wide.astype(np.float32)


def quant_error_stats(F, Q: DfpTensor) -> ErrorStats:
    """Round-trip error delta = inverse_map(Q) - F summarized per block."""
    f32 = np.asarray(F, dtype=np.float32)
    if f32.shape != Q.shape:
        raise ValueError(f"shape mismatch: {f32.shape} vs {Q.shape}")
    delta = inverse_map(Q).astype(np.float64) - f32.astype(np.float64)
    return ErrorStats(
        max_abs_err=float(np.abs(delta).max()) if delta.size else 0.0,
        mean_err=float(delta.mean()) if delta.size else 0.0,
        var_err=float(delta.var()) if delta.size else 0.0,
        step=2.0 ** float(Q.step_exponent),
    )
