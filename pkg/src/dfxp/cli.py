"""Command-line entry point: config handling, dataset ingestion, and
experiment dispatch.

Configs are flat JSON with strict unknown-key rejection (misconfigured
bit widths being the dominant user error); ``--set key=value`` overrides
individual entries. All randomness flows from the single top-level seed.
Every subcommand confines its writes to the output directory. Errors are
reported as one JSON line on stderr: exit 2 for config problems, 1 for
runtime failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .data import DatasetSpec, load_dataset
from .experiments import (
    SweepSpec,
    run_activation_sweep,
    run_bitwidth_sweep,
    run_loss_trajectory,
    verify_gradient_variance,
    verify_mapping_bounds,
    write_csv,
    write_meta,
    VARIANCE_HEADER,
)
from .layers import QuantConfig
from .mapping import Nearest, map_to_dfp, quant_error_stats
from .model import TinyTransformerConfig, build_model
from .train import TrainConfig, train

__all__ = ["main", "DEFAULT_CONFIG"]

DEFAULT_CONFIG: dict = {
    # dataset
    "dataset": "synthetic",
    "task": "majority",
    "data_size": 2048,
    "vocab": 64,
    "seq_len": 16,
    "eval_fraction": 0.125,
    "tsv_path": None,
    "text_col": "text",
    "label_col": "label",
    # model
    "hidden": 32,
    "layers": 2,
    "heads": 2,
    "classes": 2,
    "dropout": 0.0,
    # training
    "lr": 1e-3,
    "batch_size": 16,
    "steps": 500,
    "optimizer": "adamw",
    "weight_decay": 0.01,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "log_interval": 25,
    # quantization
    "fp32": False,
    "bits": 8,
    "act_bits": None,
    "grad_bits": None,
    "chained_activations": False,
    # orchestration
    "seed": 0,
    "sweep_bits": [8, 10, 12, 16],
    "sweep_act_bits": [8, 10, 12, 14, 16],
    "seeds_per_point": 5,
    "workers": 1,
    "trials": 1_000_000,
    "verify_bits": [4, 8, 12, 16, 24],
    "gradvar_bits": [8, 12],
    "gradvar_dims": [64, 64, 64],
    "gradvar_instances": 2,
}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line, machine-parseable
        raise ConfigError(message)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_bits_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok]
    except ValueError:
        raise ConfigError(f"bad bits list {text!r}; expected comma-separated integers") from None


def load_config(path: str | None, overrides: list[str], flags: dict) -> dict:
    cfg = dict(DEFAULT_CONFIG)

    def apply(key: str, value, source: str):
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r} from {source}; known keys: {sorted(cfg)}")
        cfg[key] = value

    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a flat JSON object")
        for k, v in loaded.items():
            apply(k, v, path)
    for pair in overrides:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        apply(k, _parse_value(v), "--set")
    for k, v in flags.items():
        if v is not None:
            apply(k, v, "flag")
    return cfg


def _dataset_spec(cfg: dict) -> DatasetSpec:
    split = (1.0 - cfg["eval_fraction"], cfg["eval_fraction"])
    return DatasetSpec(
        kind=cfg["dataset"],
        seed=cfg["seed"],
        size=cfg["data_size"],
        vocab=cfg["vocab"],
        seq_len=cfg["seq_len"],
        task=cfg["task"],
        path=cfg["tsv_path"],
        text_col=cfg["text_col"],
        label_col=cfg["label_col"],
        split=split,
    )


def _model_cfg(cfg: dict) -> TinyTransformerConfig:
    return TinyTransformerConfig(
        vocab=cfg["vocab"],
        hidden=cfg["hidden"],
        layers=cfg["layers"],
        heads=cfg["heads"],
        max_seq=cfg["seq_len"],
        classes=cfg["classes"],
        dropout=cfg["dropout"],
    )


def _train_cfg(cfg: dict, quant: QuantConfig | None) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        steps=cfg["steps"],
        optimizer=cfg["optimizer"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        adam_eps=cfg["adam_eps"],
        weight_decay=cfg["weight_decay"],
        quant=quant,
        seed=cfg["seed"],
        log_interval=cfg["log_interval"],
    )


def _quant_cfg(cfg: dict) -> QuantConfig | None:
    if cfg["fp32"]:
        return None
    b = cfg["bits"]
    return QuantConfig(
        b_weights=b,
        b_activations=cfg["act_bits"] if cfg["act_bits"] is not None else b,
        b_gradients=cfg["grad_bits"] if cfg["grad_bits"] is not None else b,
        seed=cfg["seed"],
        chained_activations=cfg["chained_activations"],
    )


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ── subcommands ──────────────────────────────────────────────────────────


def _cmd_train(cfg: dict, args) -> int:
    out = _out_dir(args)
    data = load_dataset(_dataset_spec(cfg))
    quant = _quant_cfg(cfg)
    model = build_model(_model_cfg(cfg), quant, seed=cfg["seed"])
    metrics = train(
        model,
        data,
        _train_cfg(cfg, quant),
        metrics_path=os.path.join(out, "metrics.csv"),
        checkpoint_path=os.path.join(out, "checkpoint.bin"),
    )
    write_meta(out, cfg, [cfg["seed"]])
    print(json.dumps({"final_loss": metrics.final_loss, "best_metric": metrics.best_metric,
                      "steps": metrics.steps[-1] if metrics.steps else 0}))
    return 0


def _sweep_spec(cfg: dict) -> SweepSpec:
    return SweepSpec(
        bits=tuple(cfg["sweep_bits"]),
        seeds=tuple(cfg["seed"] + i for i in range(cfg["seeds_per_point"])),
        act_bits=tuple(cfg["sweep_act_bits"]),
        fixed_b=cfg["bits"],
        model=_model_cfg(cfg),
        data=_dataset_spec(cfg),
        train=_train_cfg(cfg, None),
    )


def _cmd_sweep(cfg: dict, args) -> int:
    out = _out_dir(args)
    rows = run_bitwidth_sweep(_sweep_spec(cfg), out_dir=out, workers=cfg["workers"])
    write_meta(out, cfg, sorted({r["seed"] for r in rows}))
    print(json.dumps({"rows": len(rows), "csv": os.path.join(out, "sweep.csv")}))
    return 0


def _cmd_act_sweep(cfg: dict, args) -> int:
    out = _out_dir(args)
    rows = run_activation_sweep(_sweep_spec(cfg), out_dir=out, workers=cfg["workers"])
    write_meta(out, cfg, sorted({r["seed"] for r in rows}))
    print(json.dumps({"rows": len(rows), "csv": os.path.join(out, "activation_sweep.csv")}))
    return 0


def _cmd_verify_bounds(cfg: dict, args) -> int:
    out = _out_dir(args)
    report = verify_mapping_bounds(
        bits=tuple(cfg["verify_bits"]), trials=cfg["trials"], seed=cfg["seed"], raise_on_violation=False
    )
    report.to_csv(os.path.join(out, "variance_report.csv"))
    write_meta(out, cfg, [cfg["seed"]])
    print(json.dumps({"violations": report.violations, "rows": len(report.rows)}))
    if report.violations:
        raise RuntimeError(f"{report.violations} mapping-bound violations; see variance_report.csv")
    return 0


def _cmd_verify_gradvar(cfg: dict, args) -> int:
    out = _out_dir(args)
    report = verify_gradient_variance(
        dims=tuple(cfg["gradvar_dims"]),
        bits=tuple(cfg["gradvar_bits"]),
        trials=cfg["trials"],
        instances=cfg["gradvar_instances"],
        seed=cfg["seed"],
        raise_on_violation=False,
    )
    report.to_csv(os.path.join(out, "variance_report.csv"))
    write_meta(out, cfg, [cfg["seed"]])
    print(json.dumps({"violations": report.violations, "rows": len(report.rows)}))
    if report.violations:
        raise RuntimeError(f"{report.violations} gradient-variance violations; see variance_report.csv")
    return 0


def _cmd_trajectory(cfg: dict, args) -> int:
    out = _out_dir(args)
    run_loss_trajectory(_model_cfg(cfg), _dataset_spec(cfg), _train_cfg(cfg, None), out_dir=out)
    write_meta(out, cfg, [cfg["seed"]])
    print(json.dumps({"csv": os.path.join(out, "trajectory.csv")}))
    return 0


def _cmd_quantize_check(cfg: dict, args) -> int:
    path = args.input
    if not os.path.exists(path):
        raise ConfigError(f"tensor file not found: {path}")
    values = np.load(path) if path.endswith(".npy") else np.loadtxt(path, dtype=np.float64)
    q = map_to_dfp(values.astype(np.float32), cfg["bits"], Nearest())
    stats = quant_error_stats(values.astype(np.float32), q)
    print(json.dumps({
        "bits": cfg["bits"],
        "scale": q.scale,
        "step": stats.step,
        "max_abs_err": stats.max_abs_err,
        "mean_err": stats.mean_err,
        "var_err": stats.var_err,
    }))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "act-sweep": _cmd_act_sweep,
    "verify-bounds": _cmd_verify_bounds,
    "verify-gradvar": _cmd_verify_gradvar,
    "trajectory": _cmd_trajectory,
    "quantize-check": _cmd_quantize_check,
}

# Which config key each subcommand's --bits list lands on.
_BITS_KEY = {
    "train": "bits",
    "sweep": "sweep_bits",
    "act-sweep": "sweep_act_bits",
    "verify-bounds": "verify_bits",
    "verify-gradvar": "gradvar_bits",
}


def build_parser() -> _Parser:
    parser = _Parser(prog="dfxp", description="dynamic fixed-point integer training experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"{name} subcommand")
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", default="out", help="output directory (all writes land here)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--bits", default=None, help="comma-separated bit widths (or one width for train)")
        p.add_argument("--act-bits", dest="act_bits", default=None, help="comma-separated activation widths")
        p.add_argument("-v", "--verbose", action="count", default=0)
        if name == "quantize-check":
            p.add_argument("input", help=".npy or whitespace text tensor file")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        flags: dict = {"seed": args.seed, "trials": args.trials}
        if args.bits is not None:
            vals = _parse_bits_list(args.bits)
            if args.command in ("train", "quantize-check", "act-sweep"):
                if len(vals) != 1:
                    raise ConfigError(f"{args.command} takes one --bits value")
                flags["bits"] = vals[0]
            else:
                flags[_BITS_KEY[args.command]] = vals
        if args.act_bits is not None:
            vals = _parse_bits_list(args.act_bits)
            if args.command == "act-sweep":
                flags["sweep_act_bits"] = vals
            elif args.command == "train":
                flags["act_bits"] = vals[0] if len(vals) == 1 else None
            else:
                raise ConfigError(f"--act-bits is not valid for {args.command}")
        cfg = load_config(args.config, args.overrides, flags)
    except ConfigError as e:
        print(json.dumps({"error": str(e), "code": 2}), file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(json.dumps({"error": str(e), "code": 2}), file=sys.stderr)
        return 2
    except Exception as e:
        print(json.dumps({"error": f"{type(e).__name__}: {e}", "code": 1}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
