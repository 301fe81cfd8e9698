"""Analyzers: bound verifiers, sweep plumbing, CSV stability."""
import os

import numpy as np
import pytest

from dfxp.data import DatasetSpec
from dfxp.experiments import (
    SweepSpec,
    read_csv,
    run_activation_sweep,
    run_bitwidth_sweep,
    run_loss_trajectory,
    verify_gradient_variance,
    verify_mapping_bounds,
    write_csv,
    SWEEP_HEADER,
)
from dfxp.model import TinyTransformerConfig
from dfxp.train import TrainConfig

TINY_MODEL = TinyTransformerConfig(vocab=32, hidden=16, layers=1, heads=2, max_seq=8, classes=2)
TINY_DATA = DatasetSpec(kind="synthetic", seed=3, size=256, vocab=32, seq_len=8, task="keyword")
TINY_TRAIN = TrainConfig(lr=1e-3, batch_size=16, steps=40, seed=0, log_interval=20)


def tiny_spec(**kw):
    base = dict(bits=(8,), seeds=(0,), model=TINY_MODEL, data=TINY_DATA, train=TINY_TRAIN)
    base.update(kw)
    return SweepSpec(**base)


class TestMappingBounds:
    def test_no_violations_small(self):
        report = verify_mapping_bounds(bits=(4, 8), trials=100_000, seed=1)
        assert report.violations == 0
        assert all(r["max_abs_err"] <= r["bound_abs"] for r in report.rows)
        assert all(r["var_err"] <= r["bound_var"] for r in report.rows)

    def test_bound_scaling_in_b(self):
        """At equal scale the b=16 variance bound is 2**-16 of the b=8 one."""
        assert 2.0 ** (2 * (0 - 16 + 2)) == 2.0 ** (2 * (0 - 8 + 2)) * 2.0 ** -16

    def test_exact_multiples_zero_error(self):
        report = verify_mapping_bounds(bits=(8,), distributions=("uniform",), trials=4096, seed=2)
        assert report.violations == 0

    def test_csv_round_trip(self, tmp_path):
        report = verify_mapping_bounds(bits=(8,), trials=20_000, seed=3)
        path = tmp_path / "variance_report.csv"
        report.to_csv(path)
        rows = read_csv(path)
        assert len(rows) == len(report.rows)
        back = [float(r["max_abs_err"]) for r in rows]
        assert back == [r["max_abs_err"] for r in report.rows]


class TestGradientVariance:
    def test_no_violations(self):
        report = verify_gradient_variance(dims=(32, 16, 16), bits=(8,), trials=1500, instances=1, seed=4)
        assert report.violations == 0
        row = report.rows[0]
        assert row["max_ratio"] < 1.0
        assert row["term_g"] > 0 and row["term_x"] > 0 and row["term_cross"] > 0

    def test_high_precision_inflation_negligible(self):
        # 400 trials is too few for the near-tight inequality itself (the
        # acceptance run uses 10**4); here only the inflation size matters.
        report = verify_gradient_variance(
            dims=(16, 8, 8), bits=(26,), trials=400, instances=1, seed=5, raise_on_violation=False
        )
        row = report.rows[0]
        assert row["max_inflation"] < 1e-9 * row["signal_var"]

    def test_cross_term_scales_with_rows(self):
        a = verify_gradient_variance(dims=(16, 8, 8), bits=(8,), trials=800, instances=1, seed=6).rows[0]
        b = verify_gradient_variance(dims=(32, 8, 8), bits=(8,), trials=800, instances=1, seed=6).rows[0]
        ratio = b["term_cross"] / a["term_cross"]
        # N doubles; the per-element variance estimates move only slightly
        assert 1.5 < ratio < 2.7


class TestSweeps:
    def test_single_point_high_precision_matches_fp32(self):
        spec = tiny_spec(bits=(26,), include_fp32=True)
        rows = run_bitwidth_sweep(spec)
        by_b = {r["b"]: r for r in rows}
        assert set(by_b) == {0, 26}
        assert abs(by_b[26]["final_loss"] - by_b[0]["final_loss"]) < 1e-3

    def test_csv_emission_and_schema(self, tmp_path):
        spec = tiny_spec(bits=(8,), include_fp32=False)
        rows = run_bitwidth_sweep(spec, out_dir=tmp_path)
        parsed = read_csv(tmp_path / "sweep.csv")
        assert list(parsed[0]) == SWEEP_HEADER
        assert len(parsed) == len(rows) == 1
        assert os.path.exists(tmp_path / "meta.json")

    def test_activation_sweep_fixed_widths(self, tmp_path):
        spec = tiny_spec(act_bits=(8, 10), fixed_b=8, include_fp32=False)
        rows = run_activation_sweep(spec, out_dir=tmp_path)
        assert [r["b"] for r in rows] == [8, 8]
        assert [r["b_act"] for r in rows] == [8, 10]
        assert os.path.exists(tmp_path / "activation_sweep.csv")

    def test_deterministic_bytes(self, tmp_path):
        spec = tiny_spec(bits=(8,), include_fp32=False)
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        run_bitwidth_sweep(spec, out_dir=a)
        run_bitwidth_sweep(spec, out_dir=b)
        assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()

    def test_worker_pool_matches_serial(self, tmp_path):
        spec = tiny_spec(bits=(4, 8), seeds=(0, 1), include_fp32=False)
        serial = run_bitwidth_sweep(spec, out_dir=None, workers=1)
        parallel = run_bitwidth_sweep(spec, out_dir=None, workers=2)
        assert serial == parallel

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            SweepSpec(bits=(), seeds=(0,))
        with pytest.raises(ValueError):
            SweepSpec(bits=(8,), seeds=())


class TestTrajectory:
    def test_aligned_columns(self, tmp_path):
        results = run_loss_trajectory(TINY_MODEL, TINY_DATA, TINY_TRAIN, out_dir=tmp_path)
        rows = read_csv(tmp_path / "trajectory.csv")
        assert list(rows[0]) == ["step", "loss_fp32", "loss_int16", "loss_int8a12"]
        assert len(rows) == len(results["loss_fp32"].steps)

    def test_fp32_trace_repeatable(self, tmp_path):
        a = run_loss_trajectory(TINY_MODEL, TINY_DATA, TINY_TRAIN, out_dir=None)
        b = run_loss_trajectory(TINY_MODEL, TINY_DATA, TINY_TRAIN, out_dir=None)
        assert a["loss_fp32"].losses == b["loss_fp32"].losses


class TestCsvUtils:
    def test_write_read_round_trip(self, tmp_path):
        rows = [{"a": 1, "b": 2.5, "c": "x"}, {"a": 2, "b": float("inf"), "c": None}]
        path = tmp_path / "t.csv"
        write_csv(path, ["a", "b", "c"], rows)
        back = read_csv(path)
        assert back[0] == {"a": "1", "b": "2.5", "c": "x"}
        assert back[1]["c"] == ""

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        with pytest.raises(ValueError):
            read_csv(p)
