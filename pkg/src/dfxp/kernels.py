"""Integer-arithmetic compute primitives.

Matrix multiplication on shared-scale integer blocks (scales add),
wide-integer row statistics, exact integer square root, fixed-point
division, and requantization. Everything here is pure, bit-exact, and
guarded against silent int64 overflow: shapes that could wrap are
rejected before any arithmetic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mapping import DfpTensor, Nearest, RoundingMode, Stochastic, WideAccumulator, _stream_rng

__all__ = [
    "AccumulatorOverflow",
    "MatmulPlan",
    "int_matmul",
    "int_matmul_grad_w",
    "requantize",
    "int_mean",
    "int_variance",
    "isqrt",
    "fxp_div",
    "rshift_round",
    "rshift_stochastic",
    "bits_max",
    "shift_wide",
]

# Accumulators stay strictly below 2**62 so one extra bit of headroom is
# always available for rounding offsets.
_ACC_LIMIT = 1 << 62

MEAN_FRAC_BITS = 16


class AccumulatorOverflow(OverflowError):
    """A reduction could exceed the signed 64-bit accumulator range."""


def bits_max(values) -> int:
    """Bit length of the largest magnitude (0 for an all-zero array)."""
    arr = np.asarray(values)
    if arr.size == 0:
        return 0
    m = max(int(arr.max()), -int(arr.min()))
    return m.bit_length()


def rshift_round(values: np.ndarray, shift: int) -> np.ndarray:
    """Divide by 2**shift, rounding half away from zero."""
    if shift == 0:
        return values.copy()
    if shift < 0:
        raise ValueError("negative shift")
    mag = np.abs(values)
    q = (mag + (1 << (shift - 1))) >> shift
    return np.where(values < 0, -q, q)


def rshift_stochastic(values: np.ndarray, shift: int, rng: np.random.Generator) -> np.ndarray:
    """Divide by 2**shift with unbiased randomized rounding."""
    if shift == 0:
        return values.copy()
    if shift < 0:
        raise ValueError("negative shift")
    lo = values >> shift  # arithmetic shift == floor division
    rem = values & ((1 << shift) - 1)
    up = rng.random(values.shape) * float(1 << shift) < rem
    return lo + up


def _div_round_half_away(num, den: int):
    """round(num / den) with ties away from zero; works on int64 and object arrays."""
    if den <= 0:
        raise ZeroDivisionError("divisor must be positive")
    mag = np.abs(num)
    q = (2 * mag + den) // (2 * den)
    return np.where(num < 0, -q, q)


def fxp_div(num, den, frac_bits: int = 16):
    """round_nearest((num << frac_bits) / den), ties away from zero.

    ``den`` must be positive (scalar or array). Guarded so the shifted
    numerator keeps one headroom bit for the rounding offset.
    """
    num = np.asarray(num, dtype=np.int64)
    den_arr = np.asarray(den, dtype=np.int64)
    if np.any(den_arr <= 0):
        raise ZeroDivisionError("fxp_div divisor must be positive")
    if frac_bits < 0:
        raise ValueError("frac_bits must be >= 0")
    if bits_max(num) + frac_bits > 61:
        raise AccumulatorOverflow(f"fxp_div numerator needs {bits_max(num) + frac_bits} bits")
    a = num << frac_bits
    mag = np.abs(a)
    q = (2 * mag + den_arr) // (2 * den_arr)
    out = np.where(a < 0, -q, q)
    if np.isscalar(den) and num.ndim == 0:
        return int(out)
    return out


# ── integer matmul ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class MatmulPlan:
    """Shape/overflow contract for one integer matmul.

    Built from the operand bit-widths; construction fails if summing k
    products of (b_a-1)- by (b_b-1)-bit magnitudes could leave int64.
    """

    m: int
    k: int
    n: int
    transpose_a: bool = False
    transpose_b: bool = False
    bits_a: int = 8
    bits_b: int = 8

    def __post_init__(self):
        if min(self.m, self.k, self.n) <= 0:
            raise ValueError("matmul dimensions must be positive")
        if self.k * (1 << (self.bits_a - 1 + self.bits_b - 1)) >= _ACC_LIMIT:
            raise AccumulatorOverflow(
                f"k={self.k} at {self.bits_a}x{self.bits_b} bits can overflow the 64-bit accumulator"
            )

    @classmethod
    def for_operands(cls, A: DfpTensor, B: DfpTensor, transpose_a: bool = False, transpose_b: bool = False) -> "MatmulPlan":
        if A.values.ndim != 2 or B.values.ndim != 2:
            raise ValueError("int_matmul operands must be 2-D")
        am, ak = (A.shape[1], A.shape[0]) if transpose_a else A.shape
        bk, bn = (B.shape[1], B.shape[0]) if transpose_b else B.shape
        if ak != bk:
            raise ValueError(f"inner dimensions disagree: {ak} vs {bk}")
        return cls(am, ak, bn, transpose_a, transpose_b, A.bit_width, B.bit_width)

    def matches(self, A: DfpTensor, B: DfpTensor) -> bool:
        rebuilt = MatmulPlan.for_operands(A, B, self.transpose_a, self.transpose_b)
        return rebuilt == self


def int_matmul(
    A: DfpTensor,
    B: DfpTensor,
    plan: MatmulPlan | None = None,
    *,
    transpose_a: bool = False,
    transpose_b: bool = False,
) -> WideAccumulator:
    """Exact int64 matrix product; output step is the sum of input steps."""
    if plan is None:
        plan = MatmulPlan.for_operands(A, B, transpose_a, transpose_b)
    elif not plan.matches(A, B):
        raise ValueError("plan does not match operands")
    a = A.values.T if plan.transpose_a else A.values
    b = B.values.T if plan.transpose_b else B.values
    # Narrow blocks go through BLAS float64, which is exact here: every
    # partial sum is an integer below 2**52. Wide blocks use int64 loops.
    if plan.bits_a + plan.bits_b - 2 + max(plan.k - 1, 1).bit_length() <= 52:
        c = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    else:
        c = a.astype(np.int64) @ b.astype(np.int64)
    return WideAccumulator(c, A.step_exponent + B.step_exponent)


def int_matmul_grad_w(Xhat: DfpTensor, Ghat: DfpTensor) -> WideAccumulator:
    """X^T G — the weight-gradient product of a linear layer."""
    return int_matmul(Xhat, Ghat, transpose_a=True)


# ── requantization ───────────────────────────────────────────────────────


def requantize(W: WideAccumulator, bit_width: int, mode: RoundingMode = Nearest()) -> DfpTensor:
    """Wide accumulator to a fresh b-bit block, by integer shifts only.

    The new scale is read off the widest value's bit length (no float
    round trip), then values are shift-rounded to the new step. Matches
    the float path (inverse map + remap) within one final-step ulp.
    """
    v = W.values
    top = bits_max(v)
    if top == 0:
        return DfpTensor(np.zeros(W.shape, dtype=np.int32), 0, bit_width)
    scale = top - 1 + W.step_exponent
    shift = top + 1 - bit_width  # new_step - old_step
    if shift >= 0:
        if isinstance(mode, Nearest):
            q = rshift_round(v, shift)
        elif isinstance(mode, Stochastic):
            q = rshift_stochastic(v, shift, _stream_rng(mode.stream))
        else:
            raise TypeError(f"unknown rounding mode {mode!r}")
    else:
        q = v << (-shift)  # exact: result stays below 2**(b-1)
    qmax = (1 << (bit_width - 1)) - 1
    q = np.clip(q, -qmax, qmax)
    return DfpTensor(q.astype(np.int32), scale, bit_width)


# ── row statistics (last axis) ───────────────────────────────────────────


def int_mean(Q: DfpTensor) -> WideAccumulator:
    """Per-row mean over the last axis, carried at 16 extra fraction bits.

    Returns round(sum(q) * 2**16 / H) at step t - 16.
    """
    H = Q.shape[-1] if Q.values.ndim else 0
    if H == 0:
        raise ValueError("int_mean requires a non-empty last axis")
    s = Q.values.astype(np.int64).sum(axis=-1)
    mu = fxp_div(s, H, MEAN_FRAC_BITS)
    return WideAccumulator(np.asarray(mu, dtype=np.int64), Q.step_exponent - MEAN_FRAC_BITS)


def int_variance(Q: DfpTensor, mu: WideAccumulator) -> WideAccumulator:
    """Per-row population variance of (q * 2**16 - mu) over the last axis.

    Result step is 2t - 32 when it fits int64; otherwise the step widens
    by the smallest even shift that fits (the sum of squares itself is
    computed exactly, falling back to arbitrary precision when squares
    would leave int64).
    """
    H = Q.shape[-1] if Q.values.ndim else 0
    if H == 0:
        raise ValueError("int_variance requires a non-empty last axis")
    if mu.step_exponent != Q.step_exponent - MEAN_FRAC_BITS:
        raise ValueError("mu step does not match int_mean output for this block")
    if mu.shape != Q.shape[:-1]:
        raise ValueError(f"mu shape {mu.shape} does not match rows {Q.shape[:-1]}")

    c = (Q.values.astype(np.int64) << MEAN_FRAC_BITS) - mu.values[..., None]
    peak = bits_max(c)
    if 2 * peak + math.ceil(math.log2(H)) + 1 <= 62:
        ss = (c * c).sum(axis=-1)
        v = _div_round_half_away(ss, H).astype(np.int64)
        extra = 0
    else:
        cobj = c.astype(object)
        ss = (cobj * cobj).sum(axis=-1)
        v = _div_round_half_away(ss, H)
        vmax = int(max(v.flat)) if v.size else 0
        extra = max(0, -(-(vmax.bit_length() - 62) // 2))  # ceil, even shift below
        if extra:
            half = 1 << (2 * extra - 1)
            v = (v + half) >> (2 * extra)
        v = v.astype(np.int64)
    return WideAccumulator(v, 2 * Q.step_exponent - 2 * MEAN_FRAC_BITS + 2 * extra)


def shift_wide(W: WideAccumulator, shift: int) -> WideAccumulator:
    """Coarsen an accumulator's step by 2**shift with nearest rounding."""
    return WideAccumulator(rshift_round(W.values, shift), W.step_exponent + shift)


# ── integer square root ──────────────────────────────────────────────────


def _isqrt_scalar(x: int) -> int:
    if x < 0:
        raise ValueError("isqrt requires non-negative input")
    if x == 0:
        return 0
    r = 1 << ((x.bit_length() + 1) // 2)
    while True:
        nxt = (r + x // r) // 2
        if nxt >= r:
            break
        r = nxt
    if not (r * r <= x < (r + 1) * (r + 1)):
        raise RuntimeError(f"isqrt post-check failed for {x}")
    return r


def isqrt(x):
    """Exact floor square root; Newton iteration with a correctness post-check.

    Scalars use pure integer Newton; arrays seed from a float sqrt and
    correct in uint64 (the seed is within ±2 of the root).
    """
    if np.isscalar(x) or np.asarray(x).ndim == 0:
        return _isqrt_scalar(int(x))
    arr = np.asarray(x, dtype=np.int64)
    if np.any(arr < 0):
        raise ValueError("isqrt requires non-negative input")
    r = np.sqrt(arr.astype(np.float64)).astype(np.int64)
    xu = arr.astype(np.uint64)
    for _ in range(3):
        ru = r.astype(np.uint64)
        r = np.where((r > 0) & (ru * ru > xu), r - 1, r)
    for _ in range(3):
        r1 = (r + 1).astype(np.uint64)
        r = np.where(r1 * r1 <= xu, r + 1, r)
    ru = r.astype(np.uint64)
    r1 = (r + 1).astype(np.uint64)
    if np.any(ru * ru > xu) or np.any(r1 * r1 <= xu):
        raise RuntimeError("isqrt post-check failed")
    return r
