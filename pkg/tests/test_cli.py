"""End-to-end tests for the command-line driver.

Runs are shrunk to a few iterations on 16-pixel images so each subcommand
can execute for real; byte-level artifact comparisons back the replay
guarantees the comparison workflows rely on.
"""

import json

import numpy as np
import pytest

from irnorm.cli import (
    ConfigError,
    DEFAULTS,
    main,
    merge_config,
    read_config_file,
    resolve_config,
    run_identifier,
)
from irnorm.diagnostics import read_trace
from irnorm.train import aggregate_reports

TINY = (
    "model.embed_dim=8",
    "model.depths=1,1",
    "model.heads=2,2",
    "model.window=2",
    "train.iters=4",
    "train.batch=2",
    "train.patch=4",
    "train.trace_every=2",
    "data.images=2",
    "data.eval_images=1",
    "data.size=16",
)


def set_flags(*pairs):
    flags = []
    for pair in pairs:
        flags.extend(["--set", pair])
    return flags


def tiny_train_argv(out_dir, *extra):
    return ["train", "--out", str(out_dir)] + set_flags(*TINY, *extra)


class TestConfigParsing:
    def test_defaults_resolve(self):
        cfg = resolve_config(merge_config())
        assert cfg["model.embed_dim"] == 16
        assert cfg["model.depths"] == (2, 2)
        assert cfg["train.betas"] == (0.9, 0.99)
        assert cfg["model.scale"] == 2  # follows the sr2 default task

    def test_file_with_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# a comment\n"
            "\n"
            "model.embed_dim = 8\n"
            "data.task = dn15  # trailing note\n"
        )
        raw = read_config_file(path)
        assert raw == {"model.embed_dim": "8", "data.task": "dn15"}
        cfg = resolve_config(merge_config(path))
        assert cfg["model.embed_dim"] == 8
        assert cfg["model.scale"] == 1

    def test_set_overrides_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.iters = 100\n")
        merged = merge_config(path, ["train.iters=7"])
        assert merged["train.iters"] == "7"

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown config key"):
            merge_config(None, ["train.momentum=0.9"])
        path = tmp_path / "bad.cfg"
        path.write_text("optimizer = sgd\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            merge_config(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("just some words\n")
        with pytest.raises(ConfigError, match="key = value"):
            read_config_file(path)

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="train.iters"):
            resolve_config(merge_config(None, ["train.iters=many"]))
        with pytest.raises(ConfigError, match="norm.kind"):
            resolve_config(merge_config(None, ["norm.kind=GroupNorm"]))

    def test_scale_task_cross_checks(self):
        cfg = resolve_config(merge_config(None, ["data.task=sr4", "data.size=96", "train.patch=16"]))
        assert cfg["model.scale"] == 4
        ok = resolve_config(merge_config(None, ["model.scale=2"]))
        assert ok["model.scale"] == 2
        with pytest.raises(ConfigError, match="conflicts"):
            resolve_config(merge_config(None, ["model.scale=4"]))

    def test_patch_and_window_cross_checks(self):
        with pytest.raises(ConfigError, match="exceeds"):
            resolve_config(merge_config(None, ["data.task=sr4", "data.size=96"]))
        with pytest.raises(ConfigError, match="divisible"):
            resolve_config(merge_config(None, ["train.patch=30"]))

    def test_every_default_parses(self):
        # guards against a typo in the defaults table itself
        resolved = resolve_config({k: d for k, (d, _) in DEFAULTS.items()})
        assert len(resolved) == len(DEFAULTS)


class TestRunIdentifier:
    def test_deterministic_and_descriptive(self):
        strings = merge_config(None, list(TINY))
        a = run_identifier(strings)
        b = run_identifier(merge_config(None, list(TINY)))
        assert a == b
        assert a.startswith("sr2-LN-s0-")
        assert len(a.rsplit("-", 1)[1]) == 8

    def test_sensitive_to_any_key(self):
        base = run_identifier(merge_config(None, list(TINY)))
        other = run_identifier(merge_config(None, list(TINY) + ["train.lr=1e-3"]))
        assert base != other

    def test_names_norm_kind_and_seed(self):
        strings = merge_config(None, list(TINY) + ["norm.kind=iLN", "train.seed=5"])
        assert run_identifier(strings).startswith("sr2-iLN-s5-")


class TestTrainCommand:
    def test_writes_all_artifacts(self, tmp_path, capsys):
        code = main(tiny_train_argv(tmp_path / "runs"))
        assert code == 0
        out = capsys.readouterr().out
        assert "status=ok" in out

        run_dirs = list((tmp_path / "runs").iterdir())
        assert len(run_dirs) == 1
        run_dir = run_dirs[0]
        for name in ("manifest.json", "checkpoint.irln", "trace.csv", "report.json"):
            assert (run_dir / name).is_file(), name
        assert list((run_dir / "rpe").glob("*.pgm"))
        assert list((run_dir / "rpe").glob("*.csv"))

        report = json.loads((run_dir / "report.json").read_text())
        assert report["status"] == "ok"
        assert report["task"] == "sr2"
        assert report["nonfinite_count"] == 0
        assert isinstance(report["psnr"], float)

        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["run_id"] == report["run_id"]
        assert manifest["config"]["train.iters"] == "4"

        records = read_trace(run_dir / "trace.csv")
        assert {r.metric for r in records} == {"sqmean", "entropy"}
        assert sorted({r.iteration for r in records}) == [0, 2]

    def test_identical_configs_replay_byte_for_byte(self, tmp_path):
        assert main(tiny_train_argv(tmp_path / "a")) == 0
        assert main(tiny_train_argv(tmp_path / "b")) == 0
        dir_a = next((tmp_path / "a").iterdir())
        dir_b = next((tmp_path / "b").iterdir())
        assert dir_a.name == dir_b.name
        for name in ("trace.csv", "checkpoint.irln", "report.json"):
            assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes(), name

    def test_divergence_exits_three(self, tmp_path, capsys):
        code = main(tiny_train_argv(tmp_path / "runs", "train.lr=1e308"))
        assert code == 3
        assert "status=diverged" in capsys.readouterr().out
        report = json.loads(
            next((tmp_path / "runs").iterdir()).joinpath("report.json").read_text()
        )
        assert report["status"] == "diverged"
        assert report["psnr"] is None

    def test_config_error_exits_two(self, capsys):
        assert main(["train", "--set", "nope=1"]) == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_rpe_disabled_skips_export(self, tmp_path):
        assert main(tiny_train_argv(tmp_path / "runs", "model.rpe=false")) == 0
        run_dir = next((tmp_path / "runs").iterdir())
        assert not (run_dir / "rpe").exists()


class TestCompareCommand:
    def test_table_and_summary(self, tmp_path, capsys):
        argv = ["compare", "--out", str(tmp_path / "runs"), "--kinds", "LN,ReZero"]
        argv += set_flags(*TINY, "train.iters=2")
        assert main(argv) == 0
        out = capsys.readouterr().out
        assert "LN" in out and "ReZero" in out
        summary = json.loads((tmp_path / "runs" / "compare.json").read_text())
        assert set(summary) == {"LN", "ReZero"}
        assert summary["LN"]["status"] == "ok"

    def test_unknown_kind_exits_two(self, tmp_path):
        argv = ["compare", "--out", str(tmp_path), "--kinds", "LN,FancyNorm"]
        assert main(argv) == 2


class TestDiagnoseCommand:
    def test_reports_per_block(self, tmp_path, capsys):
        assert main(tiny_train_argv(tmp_path / "runs", "norm.kind=iLN")) == 0
        checkpoint = next((tmp_path / "runs").iterdir()) / "checkpoint.irln"
        capsys.readouterr()

        argv = ["diagnose", "--checkpoint", str(checkpoint)]
        argv += set_flags(*TINY, "norm.kind=iLN")
        assert main(argv) == 0
        out = capsys.readouterr().out
        assert "norm kind: iLN" in out
        assert "block 0:" in out and "block 1:" in out
        assert "sqmean=" in out and "entropy=" in out

    def test_wrong_architecture_exits_two(self, tmp_path, capsys):
        assert main(tiny_train_argv(tmp_path / "runs")) == 0
        checkpoint = next((tmp_path / "runs").iterdir()) / "checkpoint.irln"
        argv = ["diagnose", "--checkpoint", str(checkpoint)]
        argv += set_flags(*TINY, "model.embed_dim=16")
        assert main(argv) == 2


class TestQuantEvalCommand:
    def test_json_summary(self, tmp_path, capsys):
        assert main(tiny_train_argv(tmp_path / "runs", "norm.kind=iLN")) == 0
        checkpoint = next((tmp_path / "runs").iterdir()) / "checkpoint.irln"
        capsys.readouterr()

        argv = ["quant-eval", "--checkpoint", str(checkpoint), "--bits", "8", "--features", "f16"]
        argv += set_flags(*TINY, "norm.kind=iLN")
        assert main(argv) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["bits"] == "8"
        assert summary["features"] == "f16"
        assert summary["psnr"] > 0
        assert summary["nonfinite_count"] >= 0
        assert "psnr_drop" in summary


class TestMultirunCommand:
    def test_aggregate_matches_recomputation(self, tmp_path, capsys):
        argv = ["multirun", "--out", str(tmp_path / "runs"), "--seeds", "0,1"]
        argv += set_flags(*TINY, "train.iters=2")
        assert main(argv) == 0
        payload = json.loads((tmp_path / "runs" / "multirun.json").read_text())
        assert payload["seeds"] == [0, 1]
        assert len(payload["reports"]) == 2
        recomputed = aggregate_reports(payload["reports"])
        for key, value in payload["aggregate"].items():
            assert recomputed[key] == pytest.approx(value, abs=1e-12)
        # one run directory per seed, named apart by the seed and hash
        run_dirs = [p for p in (tmp_path / "runs").iterdir() if p.is_dir()]
        assert len(run_dirs) == 2

    def test_parallel_workers_agree_with_serial(self, tmp_path, monkeypatch):
        argv_serial = ["multirun", "--out", str(tmp_path / "serial"), "--seeds", "0,1"]
        argv_serial += set_flags(*TINY, "train.iters=1")
        assert main(argv_serial) == 0

        monkeypatch.setenv("IRNORM_THREADS", "2")
        argv_par = ["multirun", "--out", str(tmp_path / "par"), "--seeds", "0,1"]
        argv_par += set_flags(*TINY, "train.iters=1")
        assert main(argv_par) == 0

        serial = json.loads((tmp_path / "serial" / "multirun.json").read_text())
        parallel = json.loads((tmp_path / "par" / "multirun.json").read_text())
        assert serial["reports"] == parallel["reports"]
        assert serial["aggregate"] == parallel["aggregate"]

    def test_bad_seed_list_exits_two(self, tmp_path):
        argv = ["multirun", "--out", str(tmp_path), "--seeds", "0,x"]
        assert main(argv) == 2


class TestArgparseBehaviour:
    def test_unknown_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as err:
            main(["paint"])
        assert err.value.code == 2

    def test_missing_required_checkpoint_exits_two(self):
        with pytest.raises(SystemExit) as err:
            main(["diagnose"])
        assert err.value.code == 2
