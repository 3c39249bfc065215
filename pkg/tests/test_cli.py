"""
End-to-end runs of run_mseg.py as a subprocess.
"""

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from core.volumes import read_subject, read_volume

ROOT = Path(__file__).resolve().parents[1]

SMALL_CONFIG = {
    "patch_size": 8,
    "pretrain_epochs": 1,
    "joint_epochs": 1,
    "steps_per_epoch": 2,
    "augment_magnitude": 1.0,
    "arch": {"base_channels": 2, "depth": 1, "num_partial_classes": 2, "num_full_classes": 3},
}

PHANTOM_FLAGS = ["--size", "16", "--structures", "2", "--partial", "1"]


def run_cli(*args, tmp_path):
    env = dict(os.environ, MSEG_OUTPUT_DIR=str(tmp_path / "runs"), MSEG_THREADS="1")
    env.pop("MSEG_RECORD_WALL_TIME", None)
    return subprocess.run([sys.executable, str(ROOT / "run_mseg.py"), *[str(a) for a in args]],
                          capture_output=True, text=True, cwd=ROOT, env=env)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


class TestPhantomCommand:
    def test_zero_count_writes_only_manifest(self, tmp_path):
        out = tmp_path / "empty"
        result = run_cli("phantom", "--count", 0, "--out", out, tmp_path=tmp_path)
        assert result.returncode == 0, result.stdout + result.stderr
        assert [p.name for p in out.iterdir()] == ["manifest.json"]

    def test_rerun_is_byte_identical(self, tmp_path):
        out = tmp_path / "data"
        args = ["phantom", "--count", 2, *PHANTOM_FLAGS, "--seed", 3, "--out", out]
        assert run_cli(*args, tmp_path=tmp_path).returncode == 0
        first = {p: p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
        assert run_cli(*args, tmp_path=tmp_path).returncode == 0
        second = {p: p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
        assert first == second

    def test_written_subjects_are_readable(self, tmp_path):
        out = tmp_path / "data"
        assert run_cli("phantom", "--count", 3, *PHANTOM_FLAGS, "--out", out, tmp_path=tmp_path).returncode == 0
        for i in range(3):
            subject = read_subject(out / f"subject_{i:03d}")
            assert subject.image.dims == subject.labels.dims == (16, 16, 16)
            assert subject.label_map.num_partial == 1

    def test_invalid_structure_counts_fail(self, tmp_path):
        result = run_cli("phantom", "--count", 1, "--structures", 1, "--partial", 2, "--out", tmp_path / "x",
                         tmp_path=tmp_path)
        assert result.returncode != 0


class TestTrainingCommands:
    def test_pretrain_missing_data_dir(self, tmp_path):
        missing = tmp_path / "nowhere"
        result = run_cli("pretrain", "--data", missing, "--out", tmp_path / "s1.ckpt", tmp_path=tmp_path)
        assert result.returncode != 0
        assert str(missing) in result.stdout

    def test_two_stage_pipeline(self, tmp_path, config_file):
        pre = tmp_path / "pre"
        joint = tmp_path / "joint"
        assert run_cli("phantom", "--count", 2, *PHANTOM_FLAGS, "--partial-only", "--out", pre,
                       tmp_path=tmp_path).returncode == 0
        assert run_cli("phantom", "--count", 2, *PHANTOM_FLAGS, "--seed", 1, "--out", joint,
                       tmp_path=tmp_path).returncode == 0

        stage1 = tmp_path / "stage1.ckpt"
        result = run_cli("pretrain", "--data", pre, "--config", config_file, "--out", stage1, tmp_path=tmp_path)
        assert result.returncode == 0, result.stdout + result.stderr
        assert (tmp_path / "stage1_log.csv").exists()
        assert (tmp_path / "stage1.manifest.json").exists()

        stage2 = tmp_path / "stage2.ckpt"
        result = run_cli("jointtrain", "--data", joint, "--init", stage1, "--config", config_file,
                         "--out", stage2, tmp_path=tmp_path)
        assert result.returncode == 0, result.stdout + result.stderr
        assert str(stage1) in result.stdout
        transfer = json.loads((tmp_path / "stage2_transfer.json").read_text())
        assert transfer["skipped"] == ["decoder_s.classifier.weight", "decoder_s.classifier.bias"]

        scratch = tmp_path / "scratch.ckpt"
        result = run_cli("jointtrain", "--data", joint, "--init", "none", "--config", config_file,
                         "--out", scratch, tmp_path=tmp_path)
        assert result.returncode == 0, result.stdout + result.stderr
        assert "Initialized from: none" in result.stdout

        image = joint / "subject_000" / "image.msegvol"
        seg_path = tmp_path / "seg.msegvol"
        result = run_cli("infer", "--ckpt", stage2, "--input", image, "--head", "s", "--patch-size", 8,
                         "--out", seg_path, tmp_path=tmp_path)
        assert result.returncode == 0, result.stdout + result.stderr
        seg = read_volume(seg_path, as_labels=True)
        assert seg.dims == read_volume(image).dims
        assert int(seg.data.max()) < 3

        result = run_cli("infer", "--ckpt", stage1, "--input", image, "--head", "s", "--patch-size", 8,
                         "--out", tmp_path / "bad.msegvol", tmp_path=tmp_path)
        assert result.returncode != 0


class TestEvaluateCommand:
    def test_self_evaluation_is_perfect_and_stable(self, tmp_path):
        data = tmp_path / "data"
        assert run_cli("phantom", "--count", 2, *PHANTOM_FLAGS, "--out", data, tmp_path=tmp_path).returncode == 0
        report = tmp_path / "dice.csv"
        args = ["evaluate", "--pred", data, "--truth", data, "--out", report]
        result = run_cli(*args, tmp_path=tmp_path)
        assert result.returncode == 0, result.stdout + result.stderr

        rows = report.read_text().splitlines()
        assert rows[0] == "subject,structure,dice"
        assert len(rows) == 1 + 2 * 2
        assert all(float(row.split(",")[2]) == 1.0 for row in rows[1:])
        summary = json.loads((tmp_path / "dice.json").read_text())
        assert summary["mean"] == 1.0 and summary["std"] == 0.0

        first = report.read_bytes()
        assert run_cli(*args, tmp_path=tmp_path).returncode == 0
        assert report.read_bytes() == first

    def test_partial_task_with_map(self, tmp_path):
        data = tmp_path / "data"
        assert run_cli("phantom", "--count", 1, *PHANTOM_FLAGS, "--out", data, tmp_path=tmp_path).returncode == 0
        result = run_cli("evaluate", "--pred", data, "--truth", data, "--map", data / "subject_000" / "labels.map",
                         "--structures", "1", "--out", tmp_path / "partial.csv", tmp_path=tmp_path)
        assert result.returncode == 0, result.stdout + result.stderr
        assert json.loads((tmp_path / "partial.json").read_text())["task"] == "partial"


class TestGradcheckCommand:
    def test_passes(self, tmp_path):
        out = tmp_path / "grad.json"
        result = run_cli("gradcheck", "--size", 4, "--out", out, tmp_path=tmp_path)
        assert result.returncode == 0, result.stdout + result.stderr
        assert "max relative error" in result.stdout
        assert json.loads(out.read_text())["passed"] is True

    def test_injected_fault_fails(self, tmp_path):
        result = run_cli("gradcheck", "--size", 4, "--inject-fault", "conv3d", tmp_path=tmp_path)
        assert result.returncode != 0
        assert "FAIL" in result.stdout

    def test_unknown_fault_fails(self, tmp_path):
        result = run_cli("gradcheck", "--size", 4, "--inject-fault", "dropout", tmp_path=tmp_path)
        assert result.returncode != 0


class TestCompareArguments:
    def test_base_seed_flag(self):
        from run_mseg import parse_arguments

        args = parse_arguments(["compare", "--seeds", "2", "--seed", "3"])
        assert (args.seeds, args.seed) == (2, 3)
        assert parse_arguments(["compare"]).seed == 0
