"""Integer linear and layer-norm passes next to their FP32 twins.

Both forward and backward run in integer arithmetic: activations and
parameters become shared-scale integer blocks, the matmul accumulates in
int64 with the two scales added, and only the final result returns to
FP32. Gradients quantize with stochastic rounding so their mean matches
the unquantized gradient.

Run:  python demos/02_integer_layers.py
"""
import numpy as np

from dfxp import IntLayerNorm, IntLinear, LayerNorm, Linear, Nearest, QuantConfig

rng = np.random.default_rng(1)

x = rng.normal(size=(4, 8)).astype(np.float32)
w = rng.normal(size=(3, 8)).astype(np.float32)
bias = rng.normal(size=3).astype(np.float32)
g = rng.normal(size=(4, 3)).astype(np.float32)

print("=== linear layer, integer vs FP32, rising bit-width ===")
ref = Linear(w, bias, "ref")
ref_out = ref.forward(x)
ref_gin, ref_gw, _ = ref.backward(g)

print(f"{'b':>3} {'fwd max diff':>14} {'grad-w max diff':>16}")
for b in (4, 8, 12, 16, 24):
    cfg = QuantConfig(b, b, b, backward_mode=Nearest(), seed=0)
    lin = IntLinear(w, bias, cfg, "int")
    out = lin.forward(x)
    gin, gw, gb = lin.backward(g)
    print(f"{b:>3} {np.abs(out - ref_out).max():>14.3e} {np.abs(gw - ref_gw).max():>16.3e}")
print("each extra bit roughly halves the gap to the FP32 layer.")

print("\n=== layer-norm with integer statistics ===")
gamma = (1 + 0.2 * rng.normal(size=8)).astype(np.float32)
beta = (0.1 * rng.normal(size=8)).astype(np.float32)
ln_ref = LayerNorm(gamma, beta, 1e-5, "ref")
ref_out = ln_ref.forward(x)
for b in (8, 16, 24):
    cfg = QuantConfig(b, b, b, backward_mode=Nearest(), seed=0)
    ln = IntLayerNorm(gamma, beta, 1e-5, cfg, "int")
    out = ln.forward(x)
    print(f"b={b:>2}: max |int - fp32| = {np.abs(out - ref_out).max():.3e}")
print("means, variances, the square root, and the normalization quotient")
print("all run in 64-bit integer fixed point with tracked step exponents.")

print("\n=== integer backward is an unbiased estimator ===")
cfg26 = QuantConfig(26, 26, 26, backward_mode=Nearest(), seed=0)
lin_ref = IntLinear(w, None, cfg26, "hi")
lin_ref.forward(x)
target = lin_ref.backward(g)[1]

acc = np.zeros_like(target, dtype=np.float64)
trials = 400
for s in range(trials):
    lin = IntLinear(w, None, QuantConfig(26, 26, 6, seed=s), "lo")
    lin.forward(x)
    acc += lin.backward(g)[1]
mean_gw = acc / trials
print(f"6-bit gradients, single draw error : {np.abs(target - (acc/1)).max():.3e} (first stream)")
print(f"6-bit gradients, {trials}-stream mean : {np.abs(target - mean_gw).max():.3e}")
print("coarse stochastic gradients average out to the high-precision gradient.")
