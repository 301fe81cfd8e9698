"""A walking tour of the dynamic fixed-point block format.

Maps a float tensor to b-bit integers sharing one power-of-two scale,
inspects the round-trip error against the analytic step bound, and shows
how stochastic rounding trades deterministic bias for zero-mean noise.

Run:  python demos/01_block_format_basics.py
"""
import numpy as np

from dfxp import Nearest, Stochastic, inverse_map, map_to_dfp, quant_error_stats

rng = np.random.default_rng(0)

print("=== one block, by hand ===")
values = np.array([1.0, -0.5, 0.25, 0.1], dtype=np.float32)
q = map_to_dfp(values, 8)
print("input      :", values)
print("integers   :", q.values, f"(scale {q.scale}, {q.bit_width}-bit, step 2**{q.step_exponent})")
print("round trip :", inverse_map(q))

print("\n=== error vs the step bound, across widths ===")
x = rng.normal(size=4096).astype(np.float32)
print(f"{'b':>3} {'step':>12} {'max|err|':>12} {'bound':>12} {'var(err)':>12} {'var bound':>12}")
for b in (4, 6, 8, 12, 16, 24):
    qb = map_to_dfp(x, b)
    s = quant_error_stats(x, qb)
    bound = 2.0 ** (qb.scale - b + 2)
    print(f"{b:>3} {s.step:>12.3e} {s.max_abs_err:>12.3e} {bound:>12.3e} {s.var_err:>12.3e} {bound*bound:>12.3e}")

print("\nEvery max|err| sits below its bound, every variance below bound**2.")

print("\n=== stochastic rounding is unbiased ===")
target = np.float32(0.3)   # not representable at 4 bits
arr = np.full(8, target, dtype=np.float32)
nearest = inverse_map(map_to_dfp(arr, 4))[0]
means = []
for stream in range(2000):
    means.append(inverse_map(map_to_dfp(arr, 4, Stochastic(stream)))[0])
print(f"target {target}, nearest-mode value {nearest}")
print(f"mean of 2000 stochastic streams: {np.mean(means):.6f} (step {2.0**map_to_dfp(arr,4).step_exponent})")
print("nearest rounding is biased toward the grid; the stochastic mean recovers the target.")
