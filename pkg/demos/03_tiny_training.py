"""Train the tiny transformer classifier with integer arithmetic.

A synthetic token-majority task: each sequence contains two marked tokens
whose counts differ by exactly one; the label says which leads. Deciding
needs aggregation precise to one part in seq_len, which makes the task a
sensitive probe of compute precision.

The same seed drives an FP32 run and an 8-bit integer run so the loss
traces are directly comparable.

Run:  python demos/03_tiny_training.py        (~2 minutes)
"""
import numpy as np

from dfxp import (
    DatasetSpec,
    QuantConfig,
    TinyTransformerConfig,
    TrainConfig,
    build_model,
    load_dataset,
    train,
)

model_cfg = TinyTransformerConfig(vocab=64, hidden=32, layers=2, heads=2, max_seq=24, classes=2)
data = load_dataset(DatasetSpec(kind="synthetic", seed=3, size=2048, vocab=64, seq_len=24, task="majority"))
print("dataset:", data.summary())

for name, quant in [("FP32", None), ("8-bit integer", QuantConfig(8, 12, 8, seed=0))]:
    model = build_model(model_cfg, quant, seed=0)
    cfg = TrainConfig(lr=1e-3, batch_size=16, steps=400, seed=0, log_interval=50, quant=quant)
    metrics = train(model, data, cfg)
    print(f"\n=== {name} ===")
    print("step :", metrics.steps)
    print("loss :", [round(l, 3) for l in metrics.losses])
    print("acc% :", [round(m, 1) for m in metrics.eval_metrics])

print("\nWeights, activations, and gradients all pass through b-bit integer")
print("blocks; only the optimizer update touches the FP32 masters.")
