import json

import numpy as np
import pandas as pd
import pytest

from core.config import ArchConfig
from core.evaluation import aggregate
from core.exceptions import DataError
from core.models import DiceRecord, RunState, Task, TrainLog, TrainRecord
from core.networks import build_monet
from core.output import OutputPipeline, sha256_file
from core.pipeline import (
    METHOD_FINETUNE, METHOD_MONET, METHOD_SCRATCH, METHODS, CohortSpec, ComparisonResult, ExperimentPipeline,
    comparison_seeds, evaluate_params, make_cohort, save_comparison, subject_name,
)


@pytest.fixture
def tiny_cohort():
    return CohortSpec(pretrain_count=2, joint_count=2, heldout_count=1, size=16, num_structures=2,
                      partial_size=1)


class TestCohorts:
    def test_names_and_determinism(self, tiny_cohort):
        a = make_cohort(tiny_cohort, 3, seed=5, cohort="joint")
        b = make_cohort(tiny_cohort, 3, seed=5, cohort="joint")
        assert [s.subject_id for s in a] == [subject_name(i) for i in range(3)] == [
            "subject_000", "subject_001", "subject_002"]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image.data, y.image.data)

    def test_cohort_shares_one_label_map(self, tiny_cohort):
        subjects = make_cohort(tiny_cohort, 3, seed=5)
        assert len({tuple(sorted(s.label_map.mapping.items())) for s in subjects}) == 1
        assert not np.array_equal(subjects[0].image.data, subjects[1].image.data)

    def test_named_cohorts_are_disjoint(self, tiny_cohort):
        joint = make_cohort(tiny_cohort, 1, seed=5, cohort="joint")[0]
        heldout = make_cohort(tiny_cohort, 1, seed=5, cohort="heldout")[0]
        assert not np.array_equal(joint.image.data, heldout.image.data)

    def test_partial_only(self, tiny_cohort):
        subjects = make_cohort(tiny_cohort, 2, seed=1, partial_only=True)
        assert all(s.labels is None and s.partial is not None for s in subjects)

    def test_zero_count(self, tiny_cohort):
        assert make_cohort(tiny_cohort, 0, seed=1) == []


class TestEvaluateParams:
    def test_scores_every_structure(self, tiny_arch, small_subjects):
        report, predictions = evaluate_params(build_monet(tiny_arch, 0), small_subjects, 8, Task.FULL)
        assert sorted(predictions) == ["subject_000", "subject_001"]
        assert len(report.rows) == 2 * (tiny_arch.num_full_classes - 1)
        assert 0.0 <= report.mean <= 1.0

    def test_partial_task_uses_mapped_truth(self, tiny_arch, small_subjects):
        report, predictions = evaluate_params(build_monet(tiny_arch, 0), small_subjects, 8, Task.PARTIAL)
        assert report.task is Task.PARTIAL
        assert {r.structure for r in report.rows} == {1}
        assert all(p.num_classes == tiny_arch.num_partial_classes for p in predictions.values())


class TestOutputPipeline:
    def test_train_log_csv_header(self, tmp_path):
        log = TrainLog()
        log.append(TrainRecord(step=0, stage="joint", loss_total=1.0, loss_w=0.5, loss_s=1.5))
        output = OutputPipeline("test")
        path = output.csv.save_train_log(log, tmp_path / "log.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "step,stage,loss_total,loss_w,loss_s,wall_ms"
        assert len(lines) == 2

    def test_manifest_checksums(self, tmp_path):
        output = OutputPipeline("test", seed=3)
        path = output.json.save({"a": 1}, tmp_path / "a.json")
        manifest_path = output.finalize(tmp_path)
        manifest = json.loads(manifest_path.read_text())
        assert manifest["command"] == "test"
        assert manifest["seed"] == 3
        assert manifest["outputs"] == [str(path)]
        assert manifest["checksums"][str(path)] == sha256_file(path)
        assert manifest["wall_time_s"] is None

    def test_finalize_detects_tampering(self, tmp_path):
        output = OutputPipeline("test")
        path = output.json.save({"a": 1}, tmp_path / "a.json")
        path.write_text("{}")
        with pytest.raises(OSError):
            output.finalize(tmp_path)

    def test_dice_report_files(self, tmp_path):
        report = aggregate([DiceRecord("a", 1, 0.6), DiceRecord("b", 1, 0.8)])
        output = OutputPipeline("test")
        csv_path, summary_path = output.save_dice_report(report, tmp_path / "dice.csv")
        frame = pd.read_csv(csv_path)
        assert list(frame.columns) == ["subject", "structure", "dice"]
        summary = json.loads(summary_path.read_text())
        assert summary["task"] == "full"
        assert summary["n_subjects"] == 2
        assert summary["mean"] == pytest.approx(0.7)

    def test_operations_log(self, tmp_path):
        ops = tmp_path / "ops.jsonl"
        output = OutputPipeline("test", operations_log=ops)
        output.json.save({"a": 1}, tmp_path / "a.json")
        entry = json.loads(ops.read_text().splitlines()[0])
        assert entry["operation"] == "write"
        assert entry["success"] is True


class TestExperimentPipeline:
    def test_run_experiment_writes_artifacts(self, tmp_path, small_train_config, tiny_cohort):
        output = OutputPipeline("experiment", seed=small_train_config.seed)
        pipeline = ExperimentPipeline(small_train_config, tiny_cohort)
        result = pipeline.run_experiment(tmp_path, output)
        output.finalize(tmp_path)

        assert pipeline.get_status().state is RunState.COMPLETED
        for name in ("stage1.ckpt", "stage2.ckpt", "stage1_log.csv", "stage2_log.csv", "transfer.json",
                     "dice_full.csv", "dice_full.json", "dice_partial.csv", "manifest.json"):
            assert (tmp_path / name).exists(), name
        assert set(result.reports) == {Task.FULL, Task.PARTIAL}
        assert result.stage2.manifest.skipped == ["decoder_s.classifier.weight", "decoder_s.classifier.bias"]
        assert (tmp_path / "data" / "pretrain" / "subject_001" / "partial.msegvol").exists()

    def test_failure_is_recorded(self, tmp_path, small_train_config):
        bad_cohort = CohortSpec(pretrain_count=0, joint_count=1, heldout_count=1, size=16,
                                num_structures=2, partial_size=1)
        pipeline = ExperimentPipeline(small_train_config, bad_cohort)
        with pytest.raises(DataError):
            pipeline.run_experiment(tmp_path, OutputPipeline("experiment"))
        status = pipeline.get_status()
        assert status.state is RunState.FAILED
        assert status.stage == "pretrain"
        assert status.to_dict()["error_message"]

    def test_compare_covers_every_method(self, tmp_path, small_train_config, tiny_cohort):
        result = ExperimentPipeline(small_train_config, tiny_cohort).compare([0])
        table = result.table()
        assert sorted(table["method"]) == sorted(METHODS)
        assert set(result.medians()) == set(METHODS)

        output = OutputPipeline("compare")
        lines = save_comparison(result, tmp_path, output)
        assert (tmp_path / "comparison.csv").exists()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["seeds"] == [0]
        assert isinstance(summary["pretrained_beats_scratch"], bool)
        assert len(lines) == 1 + len(METHODS)


class TestComparisonResult:
    def _result(self, per_seed):
        result = ComparisonResult()
        for seed, values in enumerate(per_seed):
            for method, value in zip(METHODS, values):
                result.reports[(seed, method)] = aggregate([DiceRecord(f"s{seed}", 1, value)])
        return result

    def test_medians_per_method(self):
        result = self._result([(0.9, 0.5, 0.7), (0.7, 0.6, 0.8), (0.8, 0.1, 0.6)])
        medians = result.medians()
        assert list(medians) == list(METHODS)
        assert medians == pytest.approx({METHOD_MONET: 0.8, METHOD_SCRATCH: 0.5, METHOD_FINETUNE: 0.7})
        assert result.pretrained_beats_scratch()

    def test_tie_is_not_a_win(self):
        result = self._result([(0.5, 0.5, 0.5)])
        assert not result.pretrained_beats_scratch()

    def test_empty(self):
        assert ComparisonResult().medians() == {}


class TestComparisonSeeds:
    def test_derived_from_base_seed(self):
        seeds = comparison_seeds(3, 4)
        assert seeds == comparison_seeds(3, 4)
        assert len(set(seeds)) == 4
        assert seeds != comparison_seeds(4, 4)
        assert comparison_seeds(3, 2) == seeds[:2]

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            comparison_seeds(0, -1)


def test_default_architecture_matches_default_phantom():
    arch = ArchConfig()
    cohort = CohortSpec()
    assert arch.num_partial_classes == cohort.partial_size + 1
    assert arch.num_full_classes == cohort.num_structures + 1
