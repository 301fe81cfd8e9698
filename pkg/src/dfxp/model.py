"""Tiny transformer encoder classifier assembled from the quantized layers.

Linear projections, layer norms, and embeddings run in integer arithmetic
(or plain FP32 when built without a quantization config); softmax
attention, GELU, dropout, and the loss stay FP32. Backpropagation is
hand-written: every sublayer caches what its backward needs, and the
model walks the graph in reverse collecting parameter gradients by name.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .layers import (
    Embedding,
    IntEmbedding,
    IntLayerNorm,
    IntLinear,
    LayerNorm,
    Linear,
    QuantConfig,
)
from .mapping import derive_stream

__all__ = ["TinyTransformerConfig", "TinyTransformer", "build_model", "softmax_xent"]

FFN_MULT = 4
LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class TinyTransformerConfig:
    vocab: int = 64
    hidden: int = 32
    layers: int = 2
    heads: int = 2
    max_seq: int = 16
    classes: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.vocab, self.hidden, self.layers, self.heads, self.max_seq, self.classes) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by head count")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def param_count(self) -> int:
        h, f = self.hidden, FFN_MULT * self.hidden
        per_block = 4 * (h * h + h) + 2 * 2 * h + (h * f + f) + (f * h + h)
        return self.vocab * h + self.max_seq * h + self.layers * per_block + 2 * h + (h * self.classes + self.classes)


def _gelu(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))).astype(np.float32)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return (cdf + x * pdf).astype(np.float32)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits (FP32)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(p[np.arange(n), labels] + 1e-300).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, (dlogits / n).astype(np.float32)


def _merge(into: dict, new: dict) -> None:
    for k, v in new.items():
        into[k] = into[k] + v if k in into else v


class _Dropout:
    def __init__(self, rate: float, seed: int, name: str):
        self.rate = rate
        self.seed = seed
        self.name = name
        self.step = 0
        self._mask = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        rng = np.random.Generator(np.random.Philox(key=derive_stream(self.seed, self.name, self.step, "drop")))
        self.step += 1
        self._mask = (rng.random(x.shape) >= self.rate).astype(np.float32) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, g: np.ndarray) -> np.ndarray:
        return g if self._mask is None else g * self._mask


class _EncoderBlock:
    def __init__(self, make_linear, make_ln, cfg: TinyTransformerConfig, seed: int, name: str):
        h = cfg.hidden
        self.heads = cfg.heads
        self.head_dim = h // cfg.heads
        self.ln1 = make_ln(h, f"{name}.ln1")
        self.wq = make_linear(h, h, f"{name}.attn.q")
        self.wk = make_linear(h, h, f"{name}.attn.k")
        self.wv = make_linear(h, h, f"{name}.attn.v")
        self.wo = make_linear(h, h, f"{name}.attn.out")
        self.ln2 = make_ln(h, f"{name}.ln2")
        self.fc1 = make_linear(h, FFN_MULT * h, f"{name}.ffn.fc1")
        self.fc2 = make_linear(FFN_MULT * h, h, f"{name}.ffn.fc2")
        self.drop_attn = _Dropout(cfg.dropout, seed, f"{name}.attn")
        self.drop_ffn = _Dropout(cfg.dropout, seed, f"{name}.ffn")
        self._cache = None

    def layers(self):
        return [self.ln1, self.wq, self.wk, self.wv, self.wo, self.ln2, self.fc1, self.fc2]

    def _split(self, x: np.ndarray, B: int, S: int) -> np.ndarray:
        return x.reshape(B, S, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _unsplit(self, x: np.ndarray, B: int, S: int) -> np.ndarray:
        return x.transpose(0, 2, 1, 3).reshape(B, S, self.heads * self.head_dim)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        B, S, H = x.shape
        xn = self.ln1.forward(x)
        q = self._split(self.wq.forward(xn), B, S)
        k = self._split(self.wk.forward(xn), B, S)
        v = self._split(self.wv.forward(xn), B, S)
        isc = 1.0 / math.sqrt(self.head_dim)
        scores = (q @ k.transpose(0, 1, 3, 2)) * isc
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        ctx = p @ v
        attn_out = self.wo.forward(self._unsplit(ctx, B, S))
        x1 = x + self.drop_attn.forward(attn_out, train)

        x1n = self.ln2.forward(x1)
        u = self.fc1.forward(x1n)
        a = _gelu(u)
        ffn_out = self.fc2.forward(a)
        x2 = x1 + self.drop_ffn.forward(ffn_out, train)

        self._cache = (q, k, v, p, u, isc, (B, S))
        return x2.astype(np.float32)

    def backward(self, g: np.ndarray, grads: dict) -> np.ndarray:
        q, k, v, p, u, isc, (B, S) = self._cache
        self._cache = None

        d_ffn = self.drop_ffn.backward(g)
        d_a, g_fc2w, g_fc2b = self.fc2.backward(d_ffn)
        _merge(grads, {f"{self.fc2.name}.weight": g_fc2w, f"{self.fc2.name}.bias": g_fc2b})
        d_u = d_a * _gelu_grad(u)
        d_x1n, g_fc1w, g_fc1b = self.fc1.backward(d_u)
        _merge(grads, {f"{self.fc1.name}.weight": g_fc1w, f"{self.fc1.name}.bias": g_fc1b})
        d_x1, g_g2, g_b2 = self.ln2.backward(d_x1n)
        _merge(grads, {f"{self.ln2.name}.gamma": g_g2, f"{self.ln2.name}.beta": g_b2})
        d_x1 = d_x1 + g

        d_attn = self.drop_attn.backward(d_x1)
        d_merged, g_wow, g_wob = self.wo.backward(d_attn)
        _merge(grads, {f"{self.wo.name}.weight": g_wow, f"{self.wo.name}.bias": g_wob})
        d_ctx = self._split(d_merged, B, S)
        d_p = d_ctx @ v.transpose(0, 1, 3, 2)
        d_v = p.transpose(0, 1, 3, 2) @ d_ctx
        d_scores = p * (d_p - (d_p * p).sum(axis=-1, keepdims=True))
        d_q = (d_scores @ k) * isc
        d_k = (d_scores.transpose(0, 1, 3, 2) @ q) * isc

        d_xn = np.zeros((B, S, self.heads * self.head_dim), dtype=np.float32)
        for lin, dh in ((self.wq, d_q), (self.wk, d_k), (self.wv, d_v)):
            d_part, g_w, g_b = lin.backward(self._unsplit(dh.astype(np.float32), B, S))
            _merge(grads, {f"{lin.name}.weight": g_w, f"{lin.name}.bias": g_b})
            d_xn += d_part
        d_x, g_g1, g_b1 = self.ln1.backward(d_xn)
        _merge(grads, {f"{self.ln1.name}.gamma": g_g1, f"{self.ln1.name}.beta": g_b1})
        return (d_x + d_x1).astype(np.float32)


class TinyTransformer:
    """Pre-norm encoder stack, mean-pooled classifier head.

    ``quant=None`` builds the identical topology with plain FP32 layers;
    otherwise the compute-heavy layers run in integer arithmetic.
    """

    def __init__(self, cfg: TinyTransformerConfig, quant: QuantConfig | None, seed: int = 0):
        self.cfg = cfg
        self.quant = quant
        self.seed = seed
        init = np.random.Generator(np.random.Philox(key=derive_stream(seed, "init")))

        def w(*shape):
            return (init.normal(size=shape) * INIT_STD).astype(np.float32)

        if quant is None:
            make_linear = lambda i, o, name: Linear(w(o, i), np.zeros(o, np.float32), name)
            make_ln = lambda h, name: LayerNorm(np.ones(h, np.float32), np.zeros(h, np.float32), LN_EPS, name)
            self.tok = Embedding(w(cfg.vocab, cfg.hidden), "tok")
            self.pos = Embedding(w(cfg.max_seq, cfg.hidden), "pos")
        else:
            make_linear = lambda i, o, name: IntLinear(w(o, i), np.zeros(o, np.float32), quant, name)
            make_ln = lambda h, name: IntLayerNorm(np.ones(h, np.float32), np.zeros(h, np.float32), LN_EPS, quant, name)
            self.tok = IntEmbedding(w(cfg.vocab, cfg.hidden), quant, "tok")
            self.pos = IntEmbedding(w(cfg.max_seq, cfg.hidden), quant, "pos")

        self.blocks = [_EncoderBlock(make_linear, make_ln, cfg, seed, f"blk{i}") for i in range(cfg.layers)]
        self.ln_f = make_ln(cfg.hidden, "ln_f")
        self.head = make_linear(cfg.hidden, cfg.classes, "head")
        self._seq = None

    def _layers(self):
        out = [self.tok, self.pos]
        for b in self.blocks:
            out.extend(b.layers())
        out.extend([self.ln_f, self.head])
        return out

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self._layers():
            out.update(layer.params())
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        live = self.params()
        for name, arr in values.items():
            live[name][...] = arr
        self.bump_version()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def bump_version(self) -> None:
        """Master parameters changed: drop per-step quantized caches."""
        self.tok.invalidate()
        self.pos.invalidate()

    def param_count(self) -> int:
        return sum(v.size for v in self.params().values())

    def forward(self, tokens: np.ndarray, train: bool = False) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError("tokens must be [batch, seq]")
        B, S = tokens.shape
        if S > self.cfg.max_seq:
            raise ValueError(f"sequence length {S} exceeds maximum {self.cfg.max_seq}")
        x = self.tok.forward(tokens).reshape(B, S, self.cfg.hidden)
        x = x + self.pos.forward(np.arange(S))[None, :, :]
        for blk in self.blocks:
            x = blk.forward(x, train)
        x = self.ln_f.forward(x)
        pooled = x.mean(axis=1)
        self._seq = (B, S)
        return self.head.forward(pooled.astype(np.float32))

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        if self._seq is None:
            raise RuntimeError("backward before forward")
        B, S = self._seq
        self._seq = None
        grads: dict[str, np.ndarray] = {}
        d_pooled, g_hw, g_hb = self.head.backward(dlogits)
        _merge(grads, {f"{self.head.name}.weight": g_hw, f"{self.head.name}.bias": g_hb})
        d_x = np.broadcast_to(d_pooled[:, None, :] / S, (B, S, self.cfg.hidden)).astype(np.float32)
        d_x, g_gf, g_bf = self.ln_f.backward(d_x)
        _merge(grads, {f"{self.ln_f.name}.gamma": g_gf, f"{self.ln_f.name}.beta": g_bf})
        for blk in reversed(self.blocks):
            d_x = blk.backward(d_x, grads)
        _merge(grads, {f"{self.pos.name}.table": self.pos.backward(d_x.sum(axis=0))})
        _merge(grads, {f"{self.tok.name}.table": self.tok.backward(d_x)})
        return grads


def build_model(cfg: TinyTransformerConfig, quant: QuantConfig | None = None, seed: int = 0) -> TinyTransformer:
    """Construct the classifier; quant=None gives the FP32 twin."""
    return TinyTransformer(cfg, quant, seed)
