"""FP32 master-weight training loop for the tiny transformer.

Quantized compute, plain FP32 updates: the optimizer only ever sees the
FP32 masters and FP32 gradients (integer layers inverse-map theirs before
handing them over). The loop is single-threaded and fully deterministic
in the config seed; metrics are logged on a fixed interval as the mean
loss over the interval plus held-out accuracy.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .layers import QuantConfig
from .mapping import Stochastic, derive_stream
from .model import TinyTransformer, TinyTransformerConfig, build_model, softmax_xent

__all__ = [
    "TrainConfig",
    "RunMetrics",
    "NanLossError",
    "SGD",
    "AdamW",
    "make_optimizer",
    "optimizer_step",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

METRICS_HEADER = "step,loss,eval_metric,wall_ms"
CHECKPOINT_MAGIC = b"DFXP"
CHECKPOINT_VERSION = 1


class NanLossError(RuntimeError):
    """Training aborted on a non-finite loss or gradient."""

    def __init__(self, msg: str, step: int, checkpoint_path: str | None = None):
        super().__init__(msg)
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 500
    optimizer: str = "adamw"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    lr_schedule: str = "constant"  # or "cosine" (decay to 0 over `steps`)
    quant: QuantConfig | None = None
    seed: int = 0
    log_interval: int = 25
    eval_batch_size: int = 64

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size <= 0 or self.steps <= 0 or self.log_interval <= 0:
            raise ValueError("batch size, steps, and log interval must be positive")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, self.steps) / self.steps))
        return self.lr


@dataclass
class RunMetrics:
    """Per-logged-step records plus a final summary.

    ``wall_ms`` is informational; reproducibility guarantees cover steps,
    losses, and metrics only.
    """

    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    eval_metrics: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    best_metric: float = float("nan")

    def log(self, step: int, loss: float, metric: float, wall: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("logged steps must be strictly increasing")
        self.steps.append(step)
        self.losses.append(loss)
        self.eval_metrics.append(metric)
        self.wall_ms.append(wall)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(METRICS_HEADER + "\n")
            for s, l, m, w in zip(self.steps, self.losses, self.eval_metrics, self.wall_ms):
                fh.write(f"{s},{l!r},{m!r},{w:.1f}\n")


# ── optimizers (FP32 masters only) ───────────────────────────────────────


class SGD:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.lr
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NanLossError(f"non-finite gradient for {name!r} at step {self.t}", self.t)
            p -= (self.lr * g).astype(np.float32)

    def state(self) -> dict:
        return {"t": self.t, "moments": {}}

    def load_state(self, state: dict, params: dict) -> None:
        self.t = int(state["t"])


class AdamW:
    """Standard bias-corrected moment recursion with decoupled weight decay."""

    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.lr
        self.b1, self.b2 = cfg.beta1, cfg.beta2
        self.eps = cfg.adam_eps
        self.wd = cfg.weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in params.items():
            g = grads[name].astype(np.float32)
            if not np.all(np.isfinite(g)):
                raise NanLossError(f"non-finite gradient for {name!r} at step {self.t}", self.t)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p -= (self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * p)).astype(np.float32)

    def state(self) -> dict:
        return {
            "t": self.t,
            "moments": {f"m.{k}": v for k, v in self.m.items()} | {f"v.{k}": v for k, v in self.v.items()},
        }

    def load_state(self, state: dict, params: dict) -> None:
        self.t = int(state["t"])
        for key, arr in state["moments"].items():
            kind, name = key.split(".", 1)
            (self.m if kind == "m" else self.v)[name] = np.asarray(arr, dtype=np.float32).copy()


def make_optimizer(cfg: TrainConfig):
    return AdamW(cfg) if cfg.optimizer == "adamw" else SGD(cfg)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], cfg: TrainConfig, opt=None):
    """One descent update in FP32; returns (params, optimizer)."""
    opt = opt or make_optimizer(cfg)
    opt.step(params, grads)
    return params, opt


# ── training loop ────────────────────────────────────────────────────────


def evaluate(model: TinyTransformer, tokens: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    """Accuracy in percentage points on the given split."""
    hits = 0
    for lo in range(0, tokens.shape[0], batch_size):
        logits = model.forward(tokens[lo : lo + batch_size], train=False)
        hits += int((logits.argmax(axis=-1) == labels[lo : lo + batch_size]).sum())
    return 100.0 * hits / max(1, tokens.shape[0])


def _batches(n: int, batch_size: int, steps: int, seed: int):
    rng = np.random.Generator(np.random.Philox(key=derive_stream(seed, "batches")))
    done = 0
    while done < steps:
        order = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield order[lo : lo + batch_size]
            done += 1
            if done >= steps:
                return


def train(
    model: TinyTransformer,
    data: Dataset,
    cfg: TrainConfig,
    metrics_path=None,
    checkpoint_path=None,
) -> RunMetrics:
    """Deterministic loop: batch -> forward -> loss -> backward -> update.

    A non-finite loss aborts with the last logged-good parameter snapshot
    written to ``checkpoint_path`` when one is given.
    """
    opt = make_optimizer(cfg)
    metrics = RunMetrics()
    window: list[float] = []
    last_good = model.snapshot()
    last_good_step = 0
    t0 = time.perf_counter()

    def abort(msg: str, step: int):
        path = None
        if checkpoint_path is not None:
            model.set_params(last_good)
            save_checkpoint(checkpoint_path, model, cfg, last_good_step, opt)
            path = str(checkpoint_path)
        raise NanLossError(msg + (f"; last-good checkpoint at step {last_good_step}" if path else ""), step, path)

    step = 0
    for idx in _batches(data.train_tokens.shape[0], cfg.batch_size, cfg.steps, cfg.seed):
        step += 1
        logits = model.forward(data.train_tokens[idx], train=True)
        loss, dlogits = softmax_xent(logits, data.train_labels[idx])
        if not np.isfinite(loss):
            abort(f"non-finite loss at step {step}", step)
        grads = model.backward(dlogits)
        opt.lr = cfg.lr_at(step)
        try:
            opt.step(model.params(), grads)
        except NanLossError as e:
            abort(str(e), step)
        model.bump_version()
        window.append(loss)

        if step % cfg.log_interval == 0 or step == cfg.steps:
            acc = evaluate(model, data.eval_tokens, data.eval_labels, cfg.eval_batch_size)
            metrics.log(step, float(np.mean(window)), acc, (time.perf_counter() - t0) * 1000.0)
            window.clear()
            last_good = model.snapshot()
            last_good_step = step

    metrics.final_loss = metrics.losses[-1] if metrics.losses else float("nan")
    metrics.best_metric = max(metrics.eval_metrics) if metrics.eval_metrics else float("nan")
    if metrics_path is not None:
        metrics.to_csv(metrics_path)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, cfg, step, opt)
    return metrics


# ── checkpoints (versioned binary, little-endian) ────────────────────────


def _config_blob(model: TinyTransformer, cfg: TrainConfig) -> dict:
    q = cfg.quant
    return {
        "model": asdict(model.cfg),
        "train": {
            "lr": cfg.lr,
            "batch_size": cfg.batch_size,
            "steps": cfg.steps,
            "optimizer": cfg.optimizer,
            "beta1": cfg.beta1,
            "beta2": cfg.beta2,
            "adam_eps": cfg.adam_eps,
            "weight_decay": cfg.weight_decay,
            "seed": cfg.seed,
            "log_interval": cfg.log_interval,
        },
        "quant": None
        if q is None
        else {
            "b_weights": q.b_weights,
            "b_activations": q.b_activations,
            "b_gradients": q.b_gradients,
            "seed": q.seed,
            "chained_activations": q.chained_activations,
            "stochastic_backward": isinstance(q.backward_mode, Stochastic),
        },
        "model_seed": model.seed,
    }


def save_checkpoint(path, model: TinyTransformer, cfg: TrainConfig, step: int, opt) -> None:
    params = model.params()
    opt_state = opt.state()
    names = sorted(params)
    moment_names = sorted(opt_state["moments"])
    header = {
        "config": _config_blob(model, cfg),
        "step": int(step),
        "optimizer_t": int(opt_state["t"]),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "moments": [{"name": n, "shape": list(opt_state["moments"][n].shape)} for n in moment_names],
        "rng": {"seed": cfg.seed, "next_step": int(step) + 1},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
        for n in moment_names:
            fh.write(np.ascontiguousarray(opt_state["moments"][n], dtype="<f4").tobytes())


def load_checkpoint(path) -> dict:
    """Returns {header, params, moments}; arrays are float32 copies."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))

        def read_block(entries):
            out = {}
            for ent in entries:
                n = int(np.prod(ent["shape"])) if ent["shape"] else 1
                buf = fh.read(4 * n)
                out[ent["name"]] = np.frombuffer(buf, dtype="<f4").reshape(ent["shape"]).astype(np.float32)
            return out

        params = read_block(header["tensors"])
        moments = read_block(header["moments"])
    return {"header": header, "params": params, "moments": moments}
