"""Desk-scale analyses: bit-width sweeps, loss trajectories, and empirical
verification of the mapping error and gradient-variance bounds.

Outputs are append-free CSV files with stable headers plus a companion
``meta.json`` carrying the effective config, its hash, and the package
version, so every table can be reproduced from its own directory.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import __version__
from .data import DatasetSpec, load_dataset
from .kernels import int_matmul
from .layers import QuantConfig
from .mapping import DfpTensor, Nearest, Stochastic, derive_stream, inverse_map, map_to_dfp, quant_error_stats
from .model import TinyTransformerConfig, build_model
from .train import RunMetrics, TrainConfig, train

__all__ = [
    "SweepSpec",
    "VarianceReport",
    "BoundViolation",
    "run_bitwidth_sweep",
    "run_activation_sweep",
    "verify_mapping_bounds",
    "verify_gradient_variance",
    "run_loss_trajectory",
    "write_csv",
    "read_csv",
    "write_meta",
    "SWEEP_HEADER",
    "VARIANCE_HEADER",
]

SWEEP_HEADER = ["b", "b_act", "seed", "final_loss", "final_metric"]
VARIANCE_HEADER = [
    "kind", "b", "dist", "e_scale", "n", "max_abs_err", "bound_abs", "var_err", "bound_var",
    "instance", "rows", "max_inflation", "max_ratio", "term_g", "term_x", "term_cross", "signal_var", "violations",
]
TRAJECTORY_COLUMNS = ("loss_fp32", "loss_int16", "loss_int8a12")

DISTRIBUTIONS = ("uniform", "normal", "student_t3")


class BoundViolation(AssertionError):
    """A hard inequality failed; carries the offending sample."""

    def __init__(self, msg: str, sample=None):
        super().__init__(msg)
        self.sample = sample


# ── CSV / meta plumbing ──────────────────────────────────────────────────


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(col)) for col in header) + "\n")


def read_csv(path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"empty CSV: {path}")
    cols = lines[0].split(",")
    return [dict(zip(cols, line.split(","))) for line in lines[1:] if line]


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def write_meta(out_dir, config: dict, seeds: list[int]) -> None:
    meta = {
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "version": __version__,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ── training sweeps ──────────────────────────────────────────────────────


@dataclass(frozen=True)
class SweepSpec:
    """Grid of quantized runs over bit widths and seeds.

    ``act_bits`` of None ties activation width to ``bits`` per point; a
    tuple sweeps activation width at fixed weight/gradient width.

    When ``pretrain`` is set, each seed first trains the FP32 twin with
    that config (retrying from derived init seeds until the held-out
    accuracy reaches ``pretrain_target``); every grid point then
    continues from the same converged snapshot under its own
    quantization. This mirrors fine-tuning a pretrained model and keeps
    comparisons across bit widths paired per seed.
    """

    bits: tuple[int, ...]
    seeds: tuple[int, ...]
    act_bits: tuple[int, ...] | None = None
    fixed_b: int = 8
    include_fp32: bool = True
    model: TinyTransformerConfig = TinyTransformerConfig()
    data: DatasetSpec = DatasetSpec()
    train: TrainConfig = TrainConfig()
    pretrain: TrainConfig | None = None
    pretrain_target: float = 98.0
    pretrain_attempts: int = 5

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed per grid point")
        if not self.bits and self.act_bits is None:
            raise ValueError("empty sweep grid")


# fine-tune batch streams must differ from the pretrain streams
_FINETUNE_SEED_OFFSET = 100003


def _pretrain_point(args: tuple) -> tuple[int, dict]:
    model_cfg, data_spec, pre_cfg, seed, target, attempts = args
    data = load_dataset(DatasetSpec(**data_spec))
    snapshot = None
    for attempt in range(attempts):
        init_seed = seed if attempt == 0 else derive_stream(seed, "pretrain-retry", attempt) % (1 << 31)
        model = build_model(TinyTransformerConfig(**model_cfg), None, seed=init_seed)
        cfg = replace(TrainConfig(**pre_cfg), quant=None, seed=init_seed)
        metrics = train(model, data, cfg)
        snapshot = model.snapshot()
        if metrics.eval_metrics[-1] >= target:
            break
    return seed, snapshot


def _sweep_point(args: tuple) -> dict:
    model_cfg, data_spec, train_cfg, b, b_act, seed, snapshot = args
    mcfg = TinyTransformerConfig(**model_cfg)
    data = load_dataset(DatasetSpec(**data_spec))
    tcfg = TrainConfig(**train_cfg)
    if b == 0:
        quant = None
    else:
        quant = QuantConfig(b_weights=b, b_activations=b_act, b_gradients=b, seed=seed)
    run_seed = seed + _FINETUNE_SEED_OFFSET if snapshot is not None else seed
    tcfg = replace(tcfg, quant=quant, seed=run_seed)
    model = build_model(mcfg, quant, seed=seed)
    if snapshot is not None:
        model.set_params(snapshot)
    metrics = train(model, data, tcfg)
    return {
        "b": b,
        "b_act": b_act,
        "seed": seed,
        "final_loss": float(metrics.final_loss),
        "final_metric": float(metrics.eval_metrics[-1]),
    }


def _pool_map(fn, items: list, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _snapshots_for(spec: SweepSpec, workers: int) -> dict[int, dict] | None:
    if spec.pretrain is None:
        return None
    jobs = [
        (asdict(spec.model), asdict(spec.data), _train_cfg_dict(spec.pretrain),
         seed, spec.pretrain_target, spec.pretrain_attempts)
        for seed in spec.seeds
    ]
    return dict(_pool_map(_pretrain_point, jobs, workers))


def _run_grid(spec: SweepSpec, grid: list[tuple[int, int, int]], workers: int) -> list[dict]:
    snaps = _snapshots_for(spec, workers)
    points = [
        (asdict(spec.model), asdict(spec.data), _train_cfg_dict(spec.train),
         b, b_act, seed, None if snaps is None else snaps[seed])
        for b, b_act, seed in grid
    ]
    rows = _pool_map(_sweep_point, points, workers)
    return sorted(rows, key=lambda r: (r["b"], r["b_act"], r["seed"]))


def _train_cfg_dict(cfg: TrainConfig) -> dict:
    d = {k: v for k, v in vars(cfg).items() if k != "quant"}
    return d


def run_bitwidth_sweep(spec: SweepSpec, out_dir=None, workers: int = 1) -> list[dict]:
    """One tiny-model run per (b, seed), widths tied; FP32 rows carry b=0."""
    grid = [(b, b, seed) for b in spec.bits for seed in spec.seeds]
    if spec.include_fp32:
        grid += [(0, 0, seed) for seed in spec.seeds]
    rows = _run_grid(spec, grid, workers)
    if out_dir:
        write_csv(os.path.join(out_dir, "sweep.csv"), SWEEP_HEADER, rows)
        write_meta(out_dir, {"sweep": "bitwidth", "bits": list(spec.bits), "model": asdict(spec.model),
                             "data": asdict(spec.data), "train": _train_cfg_dict(spec.train),
                             "pretrain": None if spec.pretrain is None else _train_cfg_dict(spec.pretrain)},
                   list(spec.seeds))
    return rows


def run_activation_sweep(spec: SweepSpec, out_dir=None, workers: int = 1) -> list[dict]:
    """Activation-width sweep at fixed weight/gradient width (default 8)."""
    acts = spec.act_bits or (8, 10, 12, 14, 16)
    grid = [(spec.fixed_b, b_act, seed) for b_act in acts for seed in spec.seeds]
    rows = _run_grid(spec, grid, workers)
    if out_dir:
        write_csv(os.path.join(out_dir, "activation_sweep.csv"), SWEEP_HEADER, rows)
        write_meta(out_dir, {"sweep": "activation", "fixed_b": spec.fixed_b, "act_bits": list(acts),
                             "model": asdict(spec.model), "data": asdict(spec.data),
                             "train": _train_cfg_dict(spec.train),
                             "pretrain": None if spec.pretrain is None else _train_cfg_dict(spec.pretrain)},
                   list(spec.seeds))
    return rows


# ── mapping error bounds ─────────────────────────────────────────────────


def _sample(dist: str, rng: np.random.Generator, n: int) -> np.ndarray:
    if dist == "uniform":
        return rng.uniform(-1.0, 1.0, n).astype(np.float32)
    if dist == "normal":
        return rng.normal(0.0, 1.0, n).astype(np.float32)
    if dist == "student_t3":
        return rng.standard_t(3, n).astype(np.float32)
    raise ValueError(f"unknown distribution {dist!r}")


@dataclass
class VarianceReport:
    """Accumulated bound-check rows (mapping and gradient kinds)."""

    rows: list[dict]
    violations: int

    def to_csv(self, path) -> None:
        write_csv(path, VARIANCE_HEADER, self.rows)


def verify_mapping_bounds(
    bits: tuple[int, ...] = (4, 8, 12, 16, 24),
    distributions: tuple[str, ...] = DISTRIBUTIONS,
    trials: int = 1_000_000,
    seed: int = 0,
    block: int = 4096,
    raise_on_violation: bool = True,
) -> VarianceReport:
    """Sample, map, and check |delta| <= 2**(e-b+2), var <= 2**(2(e-b+2)).

    Hard inequalities, zero tolerance, both rounding modes; rows are
    grouped by (b, distribution, observed scale).
    """
    rows: dict[tuple, dict] = {}
    total_violations = 0
    worst_sample = None
    for b in bits:
        for dist in distributions:
            rng = np.random.Generator(np.random.Philox(key=derive_stream(seed, "bounds", b, dist)))
            n_tensors = -(-trials // block)
            for i in range(n_tensors):
                f = _sample(dist, rng, block)
                for mode in (Nearest(), Stochastic(derive_stream(seed, "bounds-sr", b, dist, i))):
                    q = map_to_dfp(f, b, mode)
                    stats = quant_error_stats(f, q)
                    bound_abs = 2.0 ** (q.scale - b + 2)
                    bound_var = bound_abs * bound_abs
                    key = (b, dist, q.scale)
                    row = rows.setdefault(key, {
                        "kind": "mapping", "b": b, "dist": dist, "e_scale": q.scale, "n": 0,
                        "max_abs_err": 0.0, "bound_abs": bound_abs, "var_err": 0.0,
                        "bound_var": bound_var, "violations": 0,
                    })
                    row["n"] += f.size
                    row["max_abs_err"] = max(row["max_abs_err"], stats.max_abs_err)
                    row["var_err"] = max(row["var_err"], stats.var_err)
                    if stats.max_abs_err > bound_abs or stats.var_err > bound_var:
                        row["violations"] += 1
                        total_violations += 1
                        worst_sample = (b, dist, mode, f)
    report = VarianceReport(sorted(rows.values(), key=lambda r: (r["b"], r["dist"], r["e_scale"])), total_violations)
    if total_violations and raise_on_violation:
        raise BoundViolation(f"{total_violations} mapping-bound violations", sample=worst_sample)
    return report


# ── gradient-variance inequality ─────────────────────────────────────────


def _batch_stochastic_quantize(f: np.ndarray, b: int, rng: np.random.Generator, chunk: int):
    """Quantize one fixed tensor under `chunk` independent rounding streams.

    Returns (q [chunk, *f.shape] float64 — exact integers, delta at the
    same shape, step). The block scale is set by f alone, so it is shared
    by every stream.
    """
    ref = map_to_dfp(f, b)  # fixes scale and step
    step = 2.0 ** float(ref.step_exponent)
    scaled = f.astype(np.float64) / step
    lo = np.floor(scaled)
    frac = scaled - lo
    qmax = float(ref.qmax)
    u = rng.random((chunk,) + f.shape)
    q = np.clip(lo + (u < frac), -qmax, qmax)
    delta = q * step - f.astype(np.float64)
    return q, delta, step


def verify_gradient_variance(
    dims: tuple[int, int, int] = (64, 64, 64),
    bits: tuple[int, ...] = (8, 12),
    trials: int = 10_000,
    instances: int = 2,
    seed: int = 0,
    chunk: int = 250,
    raise_on_violation: bool = True,
) -> VarianceReport:
    """Monte-Carlo check of the matmul variance-inflation bound.

    For fixed X [N, I] and G [N, J], the variance of each element of
    X^T G over independent rounding streams must stay below
    sG2*|X_col_i|^2 + sX2*|G_col_j|^2 + N*sG2*sX2, where sX2/sG2 are the
    largest per-element delta variances actually measured. Violations
    raise with the offending instance attached.

    The inequality is near-tight for i.i.d. elements, so the estimators
    need a few thousand trials to concentrate inside it; small trial
    counts can flag sampling noise as violations.
    """
    N, I, J = dims
    rows = []
    total_violations = 0
    worst = None
    for b in bits:
        for inst in range(instances):
            rng_data = np.random.Generator(np.random.Philox(key=derive_stream(seed, "gradvar-data", b, inst)))
            X = rng_data.normal(size=(N, I)).astype(np.float32)
            G = rng_data.normal(size=(N, J)).astype(np.float32)
            true_c = X.astype(np.float64).T @ G.astype(np.float64)

            rng = np.random.Generator(np.random.Philox(key=derive_stream(seed, "gradvar-mc", b, inst)))
            sum_c = np.zeros((I, J))
            sumsq_c = np.zeros((I, J))
            sum_dx = np.zeros((N, I))
            sumsq_dx = np.zeros((N, I))
            sum_dg = np.zeros((N, J))
            sumsq_dg = np.zeros((N, J))
            done = 0
            while done < trials:
                m = min(chunk, trials - done)
                xq, dx, _ = _batch_stochastic_quantize(X, b, rng, m)
                gq, dg, _ = _batch_stochastic_quantize(G, b, rng, m)
                # exact: integer magnitudes stay far below 2**26 each
                c = np.einsum("tni,tnj->tij", xq, gq)
                sum_c += c.sum(axis=0)
                sumsq_c += (c * c).sum(axis=0)
                sum_dx += dx.sum(axis=0)
                sumsq_dx += (dx * dx).sum(axis=0)
                sum_dg += dg.sum(axis=0)
                sumsq_dg += (dg * dg).sum(axis=0)
                done += m

            step_x = 2.0 ** float(map_to_dfp(X, b).step_exponent)
            step_g = 2.0 ** float(map_to_dfp(G, b).step_exponent)
            var_c = (sumsq_c - sum_c * sum_c / trials) / (trials - 1)
            var_c *= step_x * step_x * step_g * step_g  # raw ints -> real units
            s_x2 = float(((sumsq_dx - sum_dx * sum_dx / trials) / (trials - 1)).max())
            s_g2 = float(((sumsq_dg - sum_dg * sum_dg / trials) / (trials - 1)).max())

            xnorm2 = (X.astype(np.float64) ** 2).sum(axis=0)  # per column i of X
            gnorm2 = (G.astype(np.float64) ** 2).sum(axis=0)  # per column j of G
            bound = s_g2 * xnorm2[:, None] + s_x2 * gnorm2[None, :] + N * s_x2 * s_g2
            viol = int((var_c > bound).sum())
            total_violations += viol
            if viol and worst is None:
                worst = (b, inst, X, G)
            signal = float(true_c.var())
            rows.append({
                "kind": "gradvar", "b": b, "instance": inst, "rows": N, "n": trials,
                "max_inflation": float(var_c.max()),
                "max_ratio": float((var_c / bound).max()),
                "term_g": float(s_g2 * xnorm2.mean()),
                "term_x": float(s_x2 * gnorm2.mean()),
                "term_cross": float(N * s_x2 * s_g2),
                "signal_var": signal,
                "violations": viol,
            })
    report = VarianceReport(rows, total_violations)
    if total_violations and raise_on_violation:
        raise BoundViolation(f"{total_violations} gradient-variance violations", sample=worst)
    return report


# ── loss trajectories ────────────────────────────────────────────────────


def run_loss_trajectory(
    model: TinyTransformerConfig,
    data_spec: DatasetSpec,
    train_cfg: TrainConfig,
    out_dir=None,
) -> dict[str, RunMetrics]:
    """Paired runs with one shared seed: FP32, 16-bit, 8-bit + 12-bit acts."""
    data = load_dataset(data_spec)
    seed = train_cfg.seed
    configs = {
        "loss_fp32": None,
        "loss_int16": QuantConfig(16, 16, 16, seed=seed),
        "loss_int8a12": QuantConfig(8, 12, 8, seed=seed),
    }
    results: dict[str, RunMetrics] = {}
    for name, quant in configs.items():
        m = build_model(model, quant, seed=seed)
        results[name] = train(m, data, replace(train_cfg, quant=quant))
    if out_dir:
        steps = results["loss_fp32"].steps
        rows = []
        for i, s in enumerate(steps):
            row = {"step": s}
            for name in TRAJECTORY_COLUMNS:
                row[name] = results[name].losses[i]
            rows.append(row)
        write_csv(os.path.join(out_dir, "trajectory.csv"), ["step", *TRAJECTORY_COLUMNS], rows)
        write_meta(out_dir, {"trajectory": True, "model": asdict(model), "data": asdict(data_spec),
                             "train": _train_cfg_dict(train_cfg)}, [seed])
    return results
