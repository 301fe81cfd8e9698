"""Mapping layer: float <-> shared-scale integer blocks.

Derived expectations come from independent oracles: an arbitrary-precision
(fractions) evaluation of the mapping definition, frexp decompositions,
and Monte-Carlo frequencies for the stochastic rounding path.
"""
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dfxp.mapping import (
    DfpTensor,
    Fp32RangeError,
    Nearest,
    Stochastic,
    WideAccumulator,
    ZERO_EXPONENT,
    derive_stream,
    exponent_of,
    inverse_map,
    inverse_map_wide,
    map_to_dfp,
    quant_error_stats,
    stochastic_round,
)


def reference_map(values, b: int):
    """Arbitrary-precision oracle: round-half-away(f / 2**(e-b+2)), saturated."""
    fracs = [Fraction(float(np.float32(v))) for v in values]
    nonzero = [abs(f) for f in fracs if f != 0]
    if not nonzero:
        return [0] * len(fracs), 0
    scale = max(math.floor(math.log2(f)) for f in nonzero)
    step = Fraction(2) ** (scale - b + 2)
    qmax = 2 ** (b - 1) - 1
    out = []
    for f in fracs:
        r = f / step
        q = math.floor(abs(r) + Fraction(1, 2))
        q = min(q, qmax)
        out.append(-q if f < 0 else q)
    return out, scale


finite_f32 = st.floats(
    min_value=-(2.0 ** 100), max_value=2.0 ** 100, allow_nan=False, allow_infinity=False, width=32
)


class TestExponentOf:
    @pytest.mark.parametrize("x,expected", [(1.0, 0), (3.0, 1), (0.25, -2), (-6.0, 2), (0.0, ZERO_EXPONENT)])
    def test_known_values(self, x, expected):
        assert exponent_of(x) == expected

    def test_matches_frexp_oracle(self):
        rng = np.random.default_rng(0)
        xs = rng.uniform(-1e6, 1e6, 1000)
        m, e = np.frexp(xs)
        expect = np.where(xs == 0, ZERO_EXPONENT, e - 1)
        assert np.array_equal(exponent_of(xs), expect)

    def test_subnormal(self):
        assert exponent_of(2.0 ** -130) == -130

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            exponent_of(bad)


class TestMapToDfp:
    def test_all_zero_convention(self):
        q = map_to_dfp([0.0, 0.0, 0.0], 8)
        assert q.values.tolist() == [0, 0, 0] and q.scale == 0

    def test_spec_case_b8(self):
        q = map_to_dfp([1.0, -0.5, 0.25], 8)
        assert q.scale == 0 and q.values.tolist() == [64, -32, 16]

    def test_spec_case_b4(self):
        q = map_to_dfp([3.0, 0.1], 4)
        assert q.scale == 1 and q.values.tolist() == [6, 0]
        # dropped element still within one step of its target
        assert abs(0.1 - 0.0) <= 2.0 ** (q.scale - 4 + 2)

    @pytest.mark.parametrize("b", [2, 4, 8, 13, 26])
    def test_matches_arbitrary_precision_oracle(self, b):
        rng = np.random.default_rng(b)
        vals = rng.normal(0, 3.0, 64).astype(np.float32)
        q = map_to_dfp(vals, b)
        expect, scale = reference_map(vals, b)
        assert q.scale == scale
        assert q.values.tolist() == expect

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            map_to_dfp([1.0, float("nan")], 8)

    @pytest.mark.parametrize("b", [1, 0, 27, 64])
    def test_rejects_bad_width(self, b):
        with pytest.raises(ValueError):
            map_to_dfp([1.0], b)

    def test_normalization_invariant(self):
        rng = np.random.default_rng(7)
        for b in (2, 5, 8, 16, 26):
            for _ in range(20):
                vals = (rng.normal(size=17) * 10.0 ** rng.integers(-6, 6)).astype(np.float32)
                q = map_to_dfp(vals, b)
                if np.any(q.values):
                    assert np.abs(q.values).max() >= 2 ** (b - 2)

    def test_deterministic_stochastic_stream(self):
        vals = np.random.default_rng(1).normal(size=40).astype(np.float32)
        a = map_to_dfp(vals, 8, Stochastic(123))
        b = map_to_dfp(vals, 8, Stochastic(123))
        c = map_to_dfp(vals, 8, Stochastic(124))
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)


class TestInverseMap:
    def test_spec_cases(self):
        q = DfpTensor(np.array([64, -32, 16]), 0, 8)
        assert inverse_map(q).tolist() == [1.0, -0.5, 0.25]
        q2 = DfpTensor(np.array([6, 0]), 1, 4)
        assert inverse_map(q2).tolist() == [3.0, 0.0]
        zero = DfpTensor(np.zeros(3, np.int32), 0, 8)
        assert inverse_map(zero).tolist() == [0.0, 0.0, 0.0]

    def test_wide_cases(self):
        assert inverse_map_wide(WideAccumulator(np.array([0]), -10)).tolist() == [0.0]
        assert inverse_map_wide(WideAccumulator(np.array([1024]), -12)).tolist() == [0.25]
        assert inverse_map_wide(WideAccumulator(np.array([3]), 2)).tolist() == [12.0]

    def test_wide_overflow_reports_index(self):
        w = WideAccumulator(np.array([1, 1 << 40, 2]), 100)
        with pytest.raises(Fp32RangeError) as exc:
            inverse_map_wide(w)
        assert exc.value.index == 1


class TestStochasticRound:
    def test_integers_are_fixed(self):
        rng = np.random.default_rng(0)
        vals = np.arange(-5.0, 6.0)
        out = stochastic_round(vals, rng)
        assert np.array_equal(out, vals)

    def test_quarter_frequency(self):
        """Monte-Carlo oracle: P(round(0.25) == 1) = 0.25 within 3 sigma."""
        n = 1_000_000
        rng = np.random.default_rng(42)
        ups = stochastic_round(np.full(n, 0.25), rng).sum()
        sigma = math.sqrt(n * 0.25 * 0.75)
        assert abs(ups - 0.25 * n) <= 3 * sigma

    def test_negative_half_split(self):
        n = 1_000_000
        rng = np.random.default_rng(43)
        out = stochastic_round(np.full(n, -1.5), rng)
        assert set(np.unique(out)) == {-2.0, -1.0}
        sigma = math.sqrt(n * 0.25)
        assert abs((out == -1.0).sum() - 0.5 * n) <= 3 * sigma

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            stochastic_round(float("inf"), np.random.default_rng(0))


class TestErrorStats:
    def test_exact_round_trip(self):
        vals = np.array([1.0, -0.5, 0.25], dtype=np.float32)
        stats = quant_error_stats(vals, map_to_dfp(vals, 8))
        assert stats.max_abs_err == 0.0 and stats.var_err == 0.0

    def test_uniform_bounds_b8(self):
        """max|delta| <= 2**(e-6) and var <= 2**(2(e-6)) at b = 8."""
        rng = np.random.default_rng(3)
        vals = rng.uniform(-1, 1, 4096).astype(np.float32)
        q = map_to_dfp(vals, 8)
        stats = quant_error_stats(vals, q)
        bound = 2.0 ** (q.scale - 6)
        assert stats.max_abs_err <= bound
        assert stats.var_err <= bound * bound

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            quant_error_stats(np.zeros(3, np.float32), map_to_dfp(np.zeros(4), 8))

    def test_step_field(self):
        q = map_to_dfp([1.0], 8)
        assert quant_error_stats(np.array([1.0], np.float32), q).step == 2.0 ** -6


class TestRoundTripProperties:
    @given(
        vals=arrays(np.float32, st.integers(1, 32), elements=finite_f32),
        b=st.integers(2, 26),
    )
    @settings(max_examples=200, deadline=None)
    def test_error_bound(self, vals, b):
        """|round_trip - f| <= 2**(e-b+2) always; half that if nothing saturates."""
        q = map_to_dfp(vals, b)
        delta = np.abs(inverse_map(q).astype(np.float64) - vals.astype(np.float64))
        step = 2.0 ** float(q.step_exponent)
        assert delta.max() <= step
        if not np.any(np.abs(q.values) == q.qmax):
            assert delta.max() <= step / 2
        # Popoviciu: population variance within step**2
        assert np.var(inverse_map(q).astype(np.float64) - vals.astype(np.float64)) <= step * step

    @given(
        vals=arrays(np.float32, st.integers(1, 32), elements=finite_f32),
        b=st.integers(2, 25),
    )
    @settings(max_examples=150, deadline=None)
    def test_monotone_refinement(self, vals, b):
        qa = map_to_dfp(vals, b)
        qb = map_to_dfp(vals, b + 1)
        if np.any(np.abs(qa.values) == qa.qmax) or np.any(np.abs(qb.values) == qb.qmax):
            return  # refinement claim excludes saturation
        err = lambda q: np.abs(inverse_map(q).astype(np.float64) - vals.astype(np.float64)).max()
        assert err(qb) <= err(qa)

    @given(b=st.integers(2, 26), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_exact_multiples_lossless(self, b, seed):
        rng = np.random.default_rng(seed)
        scale = 3
        step = 2.0 ** (scale - b + 2)
        qmax = 2 ** (b - 1) - 1
        ints = rng.integers(-qmax, qmax + 1, 16)
        ints[0] = qmax  # pin the scale
        # keep every multiple FP32-representable (<= 24 significant bits)
        drop = max(0, b - 25)
        ints = (ints >> drop) << drop
        vals = (ints * step).astype(np.float32)
        for mode in (Nearest(), Stochastic(seed)):
            q = map_to_dfp(vals, b, mode)
            assert inverse_map(q).tolist() == vals.tolist()

    def test_unbiased_stochastic_mean(self):
        """Mean round-trip over streams approaches f within 4*(step/2)/sqrt(N)."""
        vals = np.random.default_rng(5).normal(size=16).astype(np.float32)
        n = 4000
        acc = np.zeros(16)
        for s in range(n):
            acc += inverse_map(map_to_dfp(vals, 6, Stochastic(derive_stream(9, s)))).astype(np.float64)
        q = map_to_dfp(vals, 6)
        step = 2.0 ** float(q.step_exponent)
        tol = 4 * (step / 2) / math.sqrt(n)
        assert abs((acc / n - vals).mean()) <= tol


class TestStreams:
    def test_derivation_is_pure(self):
        a = derive_stream(1, "layer.w", 7, "grad")
        b = derive_stream(1, "layer.w", 7, "grad")
        assert a == b
        assert derive_stream(1, "layer.w", 8, "grad") != a
        assert derive_stream(2, "layer.w", 7, "grad") != a

    def test_values_are_immutable(self):
        q = map_to_dfp([1.0, 2.0], 8)
        with pytest.raises(ValueError):
            q.values[0] = 0


class TestDfpTensorValidation:
    def test_range_enforced(self):
        with pytest.raises(ValueError):
            DfpTensor(np.array([200]), 0, 8)

    def test_width_enforced(self):
        with pytest.raises(ValueError):
            DfpTensor(np.array([0]), 0, 30)
