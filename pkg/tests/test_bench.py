"""Experiment config, CSV schemas and the command-line surface."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tiflab.bench import (
    ExperimentConfig,
    choose_rank,
    cmd_curves,
    cmd_gen_world,
    eval_grid,
    glyph_correlation,
    load_config,
    macro_f1,
    main,
    read_result_rows,
    train_bank,
    world_spec,
    write_result_rows,
)
from tiflab.schedule import make_linear_schedule
from tiflab.worldgen import make_world, render, sample_task


def small_config(**task_overrides):
    cfg = ExperimentConfig()
    cfg.seeds = (0,)
    cfg.schedule.T = 100
    cfg.schedule.beta_end = 0.1
    cfg.task.k_way = 3
    cfg.task.shots = (2,)
    cfg.task.test_size = 2
    cfg.denoiser.hidden = (32, 32)
    cfg.denoiser.pretrain_iters = 5
    cfg.denoiser.pool_per_combo = 1
    cfg.lora.iters = 5
    cfg.inference.grid_size = 5
    cfg.inference.n_noise = 1
    for key, value in task_overrides.items():
        setattr(cfg.task, key, value)
    return cfg


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = ExperimentConfig()
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert load_config(path) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown config field"):
            ExperimentConfig.from_dict({"task": {"k_way": 4, "frobnicate": 1}})
        with pytest.raises(ValueError, match="unknown config section"):
            ExperimentConfig.from_dict({"sidecar": {}})
        with pytest.raises(ValueError, match="schema_version"):
            ExperimentConfig.from_dict({"schema_version": 99})

    def test_eval_grid_spans_schedule(self):
        cfg = ExperimentConfig()
        grid = eval_grid(cfg)
        assert grid[0] == 1 and grid[-1] == cfg.schedule.T
        assert len(grid) == cfg.inference.grid_size


class TestMetrics:
    def test_macro_f1_hand_example(self):
        # class 0: precision 1, recall 0.5 -> F1 = 2/3; class 1: p=0.5, r=1 -> 2/3
        y_true = [0, 0, 1]
        y_pred = [0, 1, 1]
        assert abs(macro_f1(y_true, y_pred, [0, 1]) - 2 / 3) < 1e-12

    def test_macro_f1_absent_prediction(self):
        assert macro_f1([0, 1], [0, 0], [0, 1]) == pytest.approx((2 / 3 + 0.0) / 2)

    def test_result_row_io(self, tmp_path):
        rows = [{
            "task_id": "x", "method": "tif", "weight_scheme": "tif", "rank": 8,
            "subset": "last", "K": 4, "N": 4, "rho": 1.0, "test_mode": "anti",
            "seed": 0, "accuracy": 0.75, "macro_f1": 0.7, "wall_time_seconds": 1.5,
        }]
        path = tmp_path / "results.csv"
        write_result_rows(rows, path)
        write_result_rows(rows, path)  # appends without duplicating the header
        loaded = read_result_rows(path)
        assert len(loaded) == 2
        assert loaded[0]["accuracy"] == "0.75"


class TestRankChoice:
    def test_choose_rank_prefers_smallest_adequate(self):
        assert choose_rank({2: 0.90, 8: 0.92, 16: 0.91}) == 2
        assert choose_rank({2: 0.50, 8: 0.92, 16: 0.93}) == 8
        assert choose_rank({2: 0.10, 8: 0.20, 16: 0.90}) == 16

    def test_glyph_correlation_on_clean_render(self):
        spec = make_world(render_noise=0.0)
        img = render(spec, 3, 1, 0)
        assert glyph_correlation(spec, img, 3) > 0.99
        assert glyph_correlation(spec, img, 0) < 0.5


class TestCommands:
    def test_gen_world_reproducible_and_manifest_counts(self, tmp_path):
        cfg = small_config()
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cmd_gen_world(cfg, out1)
        cmd_gen_world(cfg, out2)
        rel = os.path.join("tasks", "seed0_N2")
        names = sorted(os.listdir(out1 / rel))
        expected_rows = cfg.task.k_way * (cfg.task.shots[0] + cfg.task.test_size)
        assert len([n for n in names if n.endswith(".pgm")]) == expected_rows
        for name in names:
            assert (out1 / rel / name).read_bytes() == (out2 / rel / name).read_bytes()
        premise = json.loads((out1 / "world_premise.json").read_text())
        assert premise["fosd_env_over_nuance"] is True

    def test_curves_idempotent_and_monotone(self, tmp_path):
        cfg = small_config()
        cmd_curves(cfg, tmp_path, "err")
        first = (tmp_path / "err_curve.csv").read_text()
        cmd_curves(cfg, tmp_path, "err")
        assert (tmp_path / "err_curve.csv").read_text() == first
        rows = [line.split(",") for line in first.strip().splitlines()[1:]]
        by_distance = {}
        for d, t, err in rows:
            by_distance.setdefault(float(d), []).append((int(t), float(err)))
        for vals in by_distance.values():
            errs = [e for _, e in sorted(vals)]
            assert all(a < b for a, b in zip(errs, errs[1:]))

        cmd_curves(cfg, tmp_path, "weights")
        weight_lines = (tmp_path / "weight_curve.csv").read_text().strip().splitlines()
        assert weight_lines[0] == "t,alpha_bar,gamma,weight_raw,weight_normalized"
        assert len(weight_lines) == 1 + cfg.schedule.T

    def test_cli_exit_codes(self, tmp_path):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(small_config().to_dict()))
        assert main(["curves", "--config", str(cfg_path), "--out", str(tmp_path / "c")]) == 0
        # run before pretrain: missing artifact with a remediation hint
        rc = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "r")])
        assert rc == 1

    def test_cli_error_line_is_machine_parsable(self, tmp_path, capsys):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(small_config().to_dict()))
        main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "r")])
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        assert err[0].startswith("error: FileNotFoundError: missing artifact")
        assert "tiflab pretrain" in err[0]

    def test_cli_subprocess_entrypoint(self, tmp_path):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(small_config().to_dict()))
        proc = subprocess.run(
            [sys.executable, "-m", "tiflab.bench", "curves",
             "--config", str(cfg_path), "--out", str(tmp_path / "out")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert (tmp_path / "out" / "err_curve.csv").exists()
        assert (tmp_path / "out" / "config.json").exists()

    def test_bad_config_rejected_via_cli(self, tmp_path, capsys):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps({"task": {"nope": 1}}))
        assert main(["curves", "--config", str(cfg_path), "--out", str(tmp_path)]) == 1
        assert "unknown config field" in capsys.readouterr().err


class TestThreadInvariance:
    def test_adapter_training_independent_of_pool_size(self, monkeypatch):
        cfg = small_config()
        spec = world_spec(cfg)
        sched = make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
        task = sample_task(spec, 3, 2, 1.0, 2, "anti", seed=[0, 23, 2])
        from tiflab.denoiser import Arch, OptConfig, pretrain_base
        params = pretrain_base(
            Arch(image_shape=spec.shape, hidden=(32, 32)),
            np.stack([im for im, _ in task.train]), sched, OptConfig(iters=3, batch_size=4), seed=0,
        )
        monkeypatch.setenv("TIF_THREADS", "1")
        serial = train_bank(params, task, sched, cfg.lora, seed=0)
        monkeypatch.setenv("TIF_THREADS", "4")
        threaded = train_bank(params, task, sched, cfg.lora, seed=0)
        for c in serial.adapters:
            for (a1, b1), (a2, b2) in zip(
                serial.adapters[c].layers.values(), threaded.adapters[c].layers.values()
            ):
                np.testing.assert_array_equal(a1, a2)
                np.testing.assert_array_equal(b1, b2)
