"""Integer-arithmetic forward and backward passes for linear, layer-norm,
and embedding layers, plus their plain FP32 twins.

Every integer layer keeps FP32 master parameters; compute-side copies are
mapped to shared-scale integer blocks on each use. Forward passes round to
nearest, backward gradient mappings use stochastic rounding on a stream
derived from (seed, layer name, step), so training is reproducible.

Intermediate layer-norm statistics are carried in 64-bit fixed point with
explicit step exponents; shift amounts are planned from actual value
magnitudes so no reduction can silently wrap.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .mapping import (
    BIT_WIDTH_MAX,
    BIT_WIDTH_MIN,
    DfpTensor,
    Nearest,
    RoundingMode,
    Stochastic,
    WideAccumulator,
    derive_stream,
    inverse_map,
    inverse_map_wide,
    map_to_dfp,
)
from .kernels import (
    AccumulatorOverflow,
    MEAN_FRAC_BITS,
    bits_max,
    fxp_div,
    int_matmul,
    int_mean,
    int_variance,
    isqrt,
    requantize,
    rshift_round,
)

__all__ = [
    "QuantConfig",
    "StateError",
    "IntLinear",
    "IntLayerNorm",
    "IntEmbedding",
    "Linear",
    "LayerNorm",
    "Embedding",
]


class StateError(RuntimeError):
    """backward called without a preceding forward on this layer."""


@dataclass(frozen=True)
class QuantConfig:
    """Bit widths, rounding policy, and RNG seed of one quantized run.

    ``backward_mode`` is a prototype: stochastic gradient mappings draw
    a fresh stream per (seed, layer, step) regardless of the stream id
    stored here.
    """

    b_weights: int = 8
    b_activations: int = 8
    b_gradients: int = 8
    forward_mode: RoundingMode = Nearest()
    backward_mode: RoundingMode = Stochastic(0)
    seed: int = 0
    chained_activations: bool = False

    def __post_init__(self):
        for label, b in (("weights", self.b_weights), ("activations", self.b_activations), ("gradients", self.b_gradients)):
            if not (BIT_WIDTH_MIN <= b <= BIT_WIDTH_MAX):
                raise ValueError(f"{label} bit width {b} outside [{BIT_WIDTH_MIN}, {BIT_WIDTH_MAX}]")


def _grad_mode(cfg: QuantConfig, name: str, step: int) -> RoundingMode:
    if isinstance(cfg.backward_mode, Stochastic):
        return Stochastic(derive_stream(cfg.seed, name, step, "grad"))
    return cfg.backward_mode


def _as_rows(x: np.ndarray, features: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim < 1 or x.shape[-1] != features:
        raise ValueError(f"{what} must have last dimension {features}, got shape {x.shape}")
    return x.reshape(-1, features)


def _align_into(acc: WideAccumulator, addend: DfpTensor) -> np.ndarray:
    """Addend values shifted to the accumulator's step (int64)."""
    vals = addend.values.astype(np.int64)
    sh = addend.step_exponent - acc.step_exponent
    if sh >= 0:
        if bits_max(vals) + sh > 62:
            raise AccumulatorOverflow("step alignment would overflow the accumulator")
        return vals << sh
    return rshift_round(vals, -sh)


# ── integer layers ───────────────────────────────────────────────────────


class IntLinear:
    """y = x W^T + b with integer matmul; scales add, bias joins the
    accumulator after step alignment, output inverse-maps to FP32.

    With ``chained_activations`` the accumulator is requantized to the
    activation width first, so the next layer's mapping is lossless.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None, config: QuantConfig, name: str = "linear"):
        self.weight = np.asarray(weight, dtype=np.float32)
        if self.weight.ndim != 2:
            raise ValueError("weight must be [out, in]")
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float32)
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias must be [out]")
        self.config = config
        self.name = name
        self._cache = None
        self._steps = 0

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        p = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            p[f"{self.name}.bias"] = self.bias
        return p

    def forward(self, x: np.ndarray) -> np.ndarray:
        cfg = self.config
        x2 = _as_rows(x, self.in_features, "input")
        xq = map_to_dfp(x2, cfg.b_activations, cfg.forward_mode)
        wq = map_to_dfp(self.weight, cfg.b_weights, cfg.forward_mode)
        acc = int_matmul(xq, wq, transpose_b=True)
        if self.bias is not None:
            bq = map_to_dfp(self.bias, cfg.b_weights, cfg.forward_mode)
            acc = WideAccumulator(acc.values + _align_into(acc, bq)[None, :], acc.step_exponent)
        if cfg.chained_activations:
            out = inverse_map(requantize(acc, cfg.b_activations, cfg.forward_mode))
        else:
            out = inverse_map_wide(acc)
        self._cache = (xq, wq, x.shape)
        return out.reshape(x.shape[:-1] + (self.out_features,))

    def backward(self, g: np.ndarray):
        """Returns (G_in, G_w, G_b); G_b is None for bias-free layers."""
        if self._cache is None:
            raise StateError(f"{self.name}: backward before forward")
        xq, wq, x_shape = self._cache
        g2 = _as_rows(g, self.out_features, "output gradient")
        if g2.shape[0] != xq.shape[0]:
            raise ValueError("gradient row count does not match cached input")
        gq = map_to_dfp(g2, self.config.b_gradients, _grad_mode(self.config, self.name, self._steps))
        g_w = inverse_map_wide(int_matmul(xq, gq, transpose_a=True)).T.copy()
        g_in = inverse_map_wide(int_matmul(gq, wq)).reshape(x_shape)
        g_b = None
        if self.bias is not None:
            col = WideAccumulator(gq.values.astype(np.int64).sum(axis=0), gq.step_exponent)
            g_b = inverse_map_wide(col)
        self._cache = None
        self._steps += 1
        return g_in, g_w, g_b


class IntLayerNorm:
    """gamma * (x - mu) / sqrt(var + eps) + beta over the last axis,
    statistics and normalization in 64-bit integer fixed point.

    Row means carry 16 extra fraction bits; the variance step widens by
    even shifts when a wide bit-width would otherwise overflow int64.
    """

    def __init__(self, gamma: np.ndarray, beta: np.ndarray, eps: float, config: QuantConfig, name: str = "ln"):
        self.gamma = np.asarray(gamma, dtype=np.float32)
        self.beta = np.asarray(beta, dtype=np.float32)
        if self.gamma.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise ValueError("gamma and beta must be 1-D with equal length")
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.eps = float(eps)
        self.config = config
        self.name = name
        self._cache = None
        self._steps = 0

    @property
    def features(self) -> int:
        return self.gamma.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def forward(self, x: np.ndarray) -> np.ndarray:
        cfg = self.config
        x2 = _as_rows(x, self.features, "input")
        xq = map_to_dfp(x2, cfg.b_activations, cfg.forward_mode)
        t = xq.step_exponent

        mu = int_mean(xq)
        var = int_variance(xq, mu)
        # eps lands on the variance step; widen further if it would not fit.
        eps_bits = int(np.floor(np.log2(self.eps)))
        if eps_bits - var.step_exponent >= 62:
            widen = -(-(eps_bits - var.step_exponent - 61) // 2) * 2
            var = WideAccumulator(rshift_round(var.values, widen), var.step_exponent + widen)
        eps_q = int(np.floor(self.eps / 2.0 ** float(var.step_exponent) + 0.5))
        k = (var.step_exponent - (2 * t - 2 * MEAN_FRAC_BITS)) // 2

        denom = isqrt(var.values + eps_q)  # step t - 16 + k
        denom = np.maximum(denom, 1)  # constant row with underflowed eps
        sd = t - MEAN_FRAC_BITS + k

        c = (xq.values.astype(np.int64) << MEAN_FRAC_BITS) - mu.values[:, None]
        n_raw = fxp_div(c, denom[:, None], MEAN_FRAC_BITS)  # step -16 - k

        gq = map_to_dfp(self.gamma, cfg.b_weights, cfg.forward_mode)
        bq = map_to_dfp(self.beta, cfg.b_weights, cfg.forward_mode)
        rn = max(0, bits_max(n_raw) + bits_max(gq.values) + 1 - 62)
        n_use = rshift_round(n_raw, rn)
        acc = WideAccumulator(
            n_use * gq.values.astype(np.int64)[None, :],
            (-MEAN_FRAC_BITS - k) + rn + gq.step_exponent,
        )
        acc = WideAccumulator(acc.values + _align_into(acc, bq)[None, :], acc.step_exponent)
        out = inverse_map_wide(acc)

        self._cache = (n_raw, k, denom, sd, gq, x.shape)
        return out.reshape(x.shape)

    def backward(self, g: np.ndarray):
        """Returns (G_in, G_gamma, G_beta)."""
        if self._cache is None:
            raise StateError(f"{self.name}: backward before forward")
        n_raw, k, denom, sd, gq, x_shape = self._cache
        H = self.features
        g2 = _as_rows(g, H, "output gradient")
        if g2.shape[0] != n_raw.shape[0]:
            raise ValueError("gradient row count does not match cached input")
        grad_q = map_to_dfp(g2, self.config.b_gradients, _grad_mode(self.config, self.name, self._steps))
        gv = grad_q.values.astype(np.int64)
        tg = grad_q.step_exponent

        g_beta = inverse_map_wide(WideAccumulator(gv.sum(axis=0), tg))
        n16 = rshift_round(n_raw, k)  # step -16
        g_gamma = inverse_map_wide(WideAccumulator((gv * n16).sum(axis=0), tg - MEAN_FRAC_BITS))

        # dx = (h - mean(h) - n * mean(h*n)) / sigma, h = g * gamma, all in
        # fixed point with shift amounts planned from actual magnitudes.
        h = gv * gq.values.astype(np.int64)[None, :]
        th = tg + gq.step_exponent
        rh = max(0, bits_max(h) - 34)
        hr = rshift_round(h, rh)
        thr = th + rh

        m1 = fxp_div(hr.sum(axis=-1), H, MEAN_FRAC_BITS)  # step thr - 16
        p_sum = (hr * n16).sum(axis=-1)  # step thr - 16
        f2 = max(0, min(8, 61 - bits_max(p_sum)))
        m2 = fxp_div(p_sum, H, f2)  # step thr - 16 - f2
        r2 = max(0, bits_max(m2) + bits_max(n16) + 1 - 62)
        w = n16 * rshift_round(m2, r2)[:, None]  # step thr - 32 - f2 + r2
        w_at_target = rshift_round(w, MEAN_FRAC_BITS + f2 - r2)

        d = (hr << MEAN_FRAC_BITS) - m1[:, None] - w_at_target  # step thr - 16
        fdx = max(0, min(16, 61 - bits_max(d)))
        dx = fxp_div(d, denom[:, None], fdx)
        g_in = inverse_map_wide(WideAccumulator(dx, (thr - MEAN_FRAC_BITS) - sd - fdx))

        self._cache = None
        self._steps += 1
        return g_in.reshape(x_shape), g_gamma, g_beta


class IntEmbedding:
    """Lookup table of integer embeddings with one shared scale.

    The table is mapped once per optimizer step (call ``invalidate`` after
    master updates); the backward pass scatter-adds integer gradients into
    a wide per-row buffer at the gradient block's single scale.
    """

    def __init__(self, table: np.ndarray, config: QuantConfig, name: str = "embedding"):
        self.table = np.asarray(table, dtype=np.float32)
        if self.table.ndim != 2:
            raise ValueError("table must be [vocab, features]")
        self.config = config
        self.name = name
        self._table_q: DfpTensor | None = None
        self._cache = None
        self._steps = 0

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    @property
    def features(self) -> int:
        return self.table.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.table": self.table}

    def invalidate(self) -> None:
        """Drop the per-step quantized table (master values changed)."""
        self._table_q = None

    def quantized_table(self) -> DfpTensor:
        if self._table_q is None:
            self._table_q = map_to_dfp(self.table, self.config.b_weights, self.config.forward_mode)
        return self._table_q

    def forward(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            bad = idx.flat[int(np.flatnonzero((idx < 0) | (idx >= self.vocab))[0])]
            raise IndexError(f"{self.name}: index {bad} outside [0, {self.vocab})")
        tq = self.quantized_table()
        rows = DfpTensor(tq.values[idx], tq.scale, tq.bit_width)
        self._cache = idx
        return inverse_map(rows)

    def backward(self, g: np.ndarray) -> np.ndarray:
        """Returns the dense [vocab, features] gradient table."""
        if self._cache is None:
            raise StateError(f"{self.name}: backward before forward")
        idx = self._cache
        g2 = np.asarray(g, dtype=np.float32).reshape(-1, self.features)
        flat = idx.reshape(-1)
        if g2.shape[0] != flat.shape[0]:
            raise ValueError("gradient row count does not match cached indices")
        gq = map_to_dfp(g2, self.config.b_gradients, _grad_mode(self.config, self.name, self._steps))
        if flat.size * (1 << (self.config.b_gradients - 1)) >= 1 << 62:
            raise AccumulatorOverflow("scatter-add could overflow the 64-bit row buffer")
        buf = np.zeros((self.vocab, self.features), dtype=np.int64)
        np.add.at(buf, flat, gq.values.astype(np.int64))
        self._cache = None
        self._steps += 1
        return inverse_map_wide(WideAccumulator(buf, gq.step_exponent))


# ── FP32 twins (identical topology, plain float arithmetic) ─────────────


class Linear:
    def __init__(self, weight: np.ndarray, bias: np.ndarray | None, name: str = "linear"):
        self.weight = np.asarray(weight, dtype=np.float32)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float32)
        self.name = name
        self._cache = None

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        p = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            p[f"{self.name}.bias"] = self.bias
        return p

    def forward(self, x: np.ndarray) -> np.ndarray:
        x2 = _as_rows(x, self.in_features, "input")
        y = x2 @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        self._cache = (x2, x.shape)
        return y.reshape(x.shape[:-1] + (self.out_features,))

    def backward(self, g: np.ndarray):
        if self._cache is None:
            raise StateError(f"{self.name}: backward before forward")
        x2, x_shape = self._cache
        g2 = _as_rows(g, self.out_features, "output gradient")
        g_w = g2.T @ x2
        g_in = (g2 @ self.weight).reshape(x_shape)
        g_b = g2.sum(axis=0) if self.bias is not None else None
        self._cache = None
        return g_in, g_w, g_b


class LayerNorm:
    def __init__(self, gamma: np.ndarray, beta: np.ndarray, eps: float, name: str = "ln"):
        self.gamma = np.asarray(gamma, dtype=np.float32)
        self.beta = np.asarray(beta, dtype=np.float32)
        self.eps = float(eps)
        self.name = name
        self._cache = None

    @property
    def features(self) -> int:
        return self.gamma.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def forward(self, x: np.ndarray) -> np.ndarray:
        x2 = _as_rows(x, self.features, "input")
        mu = x2.mean(axis=-1, keepdims=True)
        var = x2.var(axis=-1, keepdims=True)
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x2 - mu) * invstd
        self._cache = (xhat, invstd, x.shape)
        return (self.gamma * xhat + self.beta).reshape(x.shape)

    def backward(self, g: np.ndarray):
        if self._cache is None:
            raise StateError(f"{self.name}: backward before forward")
        xhat, invstd, x_shape = self._cache
        g2 = _as_rows(g, self.features, "output gradient")
        h = g2 * self.gamma
        g_in = invstd * (h - h.mean(axis=-1, keepdims=True) - xhat * (h * xhat).mean(axis=-1, keepdims=True))
        g_gamma = (g2 * xhat).sum(axis=0)
        g_beta = g2.sum(axis=0)
        self._cache = None
        return g_in.astype(np.float32).reshape(x_shape), g_gamma, g_beta


class Embedding:
    def __init__(self, table: np.ndarray, name: str = "embedding"):
        self.table = np.asarray(table, dtype=np.float32)
        self.name = name
        self._cache = None

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    @property
    def features(self) -> int:
        return self.table.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.table": self.table}

    def invalidate(self) -> None:
        pass

    def forward(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            raise IndexError(f"{self.name}: index outside [0, {self.vocab})")
        self._cache = idx
        return self.table[idx]

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError(f"{self.name}: backward before forward")
        idx = self._cache
        g2 = np.asarray(g, dtype=np.float32).reshape(-1, self.features)
        buf = np.zeros_like(self.table)
        np.add.at(buf, idx.reshape(-1), g2)
        self._cache = None
        return buf
