"""Tests for runner module."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from orthounlearn.config import ExperimentConfig, config_from_mapping
from orthounlearn.engine import ExperimentResult, UnlearnStatus
from orthounlearn.errors import ConfigurationError, ExperimentAborted, NumericalError
from orthounlearn.metrics import RoundRecord
from orthounlearn.runner import ExperimentRunner, build_world, error_payload, summarize_job
from orthounlearn.store import ResultStore
from orthounlearn.strategies import get_algorithm


def _record(round_index: int, stage: str, dist: float) -> RoundRecord:
    return RoundRecord(
        round=round_index,
        stage=stage,
        asr=0.5,
        r_acc_mean=0.6,
        r_acc_std=0.0,
        r_acc_worst=0.6,
        r_acc_best=0.6,
        dist_origin=dist,
        nc=0,
        target_uce_loss=0.3,
        mean_remaining_ce_loss=1.0,
        lr=0.5,
    )


def _result(stages: list[tuple[str, float]], unlearn_rounds: int, pretrain: int) -> ExperimentResult:
    records = [_record(i + 1, stage, dist) for i, (stage, dist) in enumerate(stages)]
    return ExperimentResult(
        records=records,
        checkpoints={},
        status=UnlearnStatus.COMPLETED,
        unlearn_rounds=unlearn_rounds,
        pretrain_rounds=pretrain,
    )


class TestBuildWorld:
    """Tests for build_world."""

    def test_clients_and_trigger(self, small_config: ExperimentConfig) -> None:
        """Test the world holds every client with the target poisoned."""
        world = build_world(small_config, 0)
        assert [c.client_id for c in world.clients] == [0, 1, 2, 3]
        assert world.target_id == 0
        assert world.n_classes == 4
        assert world.clients[0].poisoned_mask.all()
        assert not any(c.poisoned_mask.any() for c in world.clients[1:])
        assert len(world.trigger) == len(world.clients[0].test)
        assert len(world.evaluation.remaining_tests) == 3

    def test_deterministic_per_seed(self, small_config: ExperimentConfig) -> None:
        """Test the same seed builds the same world and another seed a different one."""
        first, again, other = (build_world(small_config, s) for s in (0, 0, 1))
        np.testing.assert_array_equal(first.clients[1].train.features, again.clients[1].train.features)
        assert not np.array_equal(first.clients[1].train.features, other.clients[1].train.features)

    def test_infeasible_partition(self, small_config_data: dict[str, Any]) -> None:
        """Test a Pat-10 partition with clients != classes is rejected."""
        small_config_data["partition"] = {"scheme": "pat", "percent": 10, "clients": 3, "target": 0}
        config = config_from_mapping(small_config_data)
        with pytest.raises(ConfigurationError):
            build_world(config, 0)


class TestSummarizeJob:
    """Tests for summarize_job."""

    def test_boundaries_and_ratio(self) -> None:
        """Test boundary records and the reverting ratio."""
        result = _result(
            [("pretrain", 1.0), ("pretrain", 2.0), ("unlearn", 3.0), ("unlearn", 4.0),
             ("posttrain", 3.0), ("posttrain", 5.0)],
            unlearn_rounds=2,
            pretrain=2,
        )
        job = summarize_job(get_algorithm("osd"), 0, result)
        assert job.origin.round == 2
        assert job.unlearned.round == 4
        assert job.final.round == 6
        assert job.reverting_ratio == pytest.approx(0.75)
        assert job.status == "completed"

    def test_rebuild_has_no_ratio(self) -> None:
        """Test retraining reports its last round as unlearned and final."""
        result = _result([("pretrain", 1.0), ("retrain", 2.0)], unlearn_rounds=0, pretrain=1)
        job = summarize_job(get_algorithm("retrain"), 0, result)
        assert job.unlearned == job.final
        assert job.reverting_ratio is None

    def test_zero_distance_has_no_ratio(self) -> None:
        """Test a model that never left the origin has no ratio."""
        result = _result(
            [("pretrain", 1.0), ("unlearn", 0.0), ("posttrain", 0.5)], unlearn_rounds=1, pretrain=1
        )
        assert summarize_job(get_algorithm("osd"), 0, result).reverting_ratio is None


class TestErrorPayload:
    """Tests for error_payload."""

    def test_aborted_job(self) -> None:
        """Test an aborted job reports its cause and location."""
        error = ExperimentAborted(
            NumericalError("did not converge"), algorithm="osd", seed=2, stage="unlearn",
            round_index=7,
        )
        payload = error_payload(error)
        assert payload["error"] == "NumericalError"
        assert payload["exit_code"] == 3
        assert (payload["algorithm"], payload["seed"], payload["stage"], payload["round"]) == (
            "osd", 2, "unlearn", 7,
        )
        json.dumps(payload)

    def test_plain_error(self) -> None:
        """Test errors outside a job leave the location empty."""
        payload = error_payload(ConfigurationError("bad", "partition"))
        assert payload["error"] == "ConfigurationError"
        assert payload["exit_code"] == 2
        assert payload["stage"] is None

    def test_os_error(self) -> None:
        """Test file system errors map to the I/O exit code."""
        payload = error_payload(OSError("disk full"))
        assert payload["error"] == "OSError"
        assert payload["exit_code"] == 4
        json.dumps(payload)


class TestExperimentRunner:
    """Tests for ExperimentRunner."""

    def test_calls_sink_in_order(self, small_config: ExperimentConfig, mock_store: MagicMock) -> None:
        """Test the runner prepares, echoes config, writes each job and the summary."""
        summary = ExperimentRunner.create(mock_store).run(small_config, force=True)

        mock_store.prepare.assert_called_once_with(force=True)
        mock_store.write_config.assert_called_once()
        assert mock_store.write_job.call_count == 1
        job, records, checkpoints = mock_store.write_job.call_args.args
        assert job.algorithm == "osd"
        assert len(records) == 20 + 10
        assert set(checkpoints) == {"origin", "unlearned", "final"}
        mock_store.write_summary.assert_called_once_with(summary)
        mock_store.write_error.assert_not_called()

    def test_failure_writes_error(self, small_config: ExperimentConfig, mock_store: MagicMock) -> None:
        """Test a failing job writes an error report and re-raises."""
        error = ExperimentAborted(
            NumericalError("boom"), algorithm="osd", seed=0, stage="unlearn", round_index=21
        )
        with (
            patch("orthounlearn.runner.FederatedEngine.run_experiment", side_effect=error),
            pytest.raises(ExperimentAborted),
        ):
            ExperimentRunner.create(mock_store).run(small_config)

        payload = mock_store.write_error.call_args.args[0]
        assert payload["round"] == 21
        mock_store.write_summary.assert_not_called()

    def test_write_failure_writes_error(self, small_config: ExperimentConfig) -> None:
        """Test a full disk while writing a job leaves error.json with the I/O exit code."""
        store = ResultStore.create(small_config.output_dir)
        with (
            patch.object(ResultStore, "write_job", side_effect=OSError("disk full")),
            pytest.raises(OSError, match="disk full"),
        ):
            ExperimentRunner.create(store).run(small_config)

        payload = json.loads(store.error_file.read_text(encoding="utf-8"))
        assert payload["error"] == "OSError"
        assert payload["exit_code"] == 4
        assert "disk full" in payload["message"]
        assert not store.summary_file.exists()

    def test_unwritable_error_report_keeps_original(
        self, small_config: ExperimentConfig, mock_store: MagicMock
    ) -> None:
        """Test a failing error report does not mask the original failure."""
        mock_store.write_job.side_effect = OSError("disk full")
        mock_store.write_error.side_effect = OSError("still full")
        with pytest.raises(OSError, match="disk full"):
            ExperimentRunner.create(mock_store).run(small_config)
        mock_store.write_error.assert_called_once()

    def test_seeds_and_algorithms(self, small_config_data: dict[str, Any], tmp_path: Path) -> None:
        """Test every (algorithm, seed) pair gets its own directory."""
        small_config_data["algorithms"] = ["osd", "retrain"]
        small_config_data["seeds"] = [0, 3]
        config = config_from_mapping(small_config_data)
        store = ResultStore.create(config.output_dir)

        summary = ExperimentRunner.create(store).run(config)

        assert [(j.algorithm, j.seed) for j in summary.jobs] == [
            ("osd", 0), ("retrain", 0), ("osd", 3), ("retrain", 3),
        ]
        for algorithm in ("osd", "retrain"):
            for seed in (0, 3):
                assert (store.job_dir(algorithm, seed) / "records.csv").is_file()
        assert store.summary_file.is_file()
        assert store.config_file.is_file()

    def test_reruns_are_byte_identical(self, small_config_data: dict[str, Any], tmp_path: Path) -> None:
        """Test the same configuration produces identical records."""
        outputs = []
        for name in ("a", "b"):
            small_config_data["output_dir"] = str(tmp_path / name)
            config = config_from_mapping(small_config_data)
            store = ResultStore.create(config.output_dir)
            ExperimentRunner.create(store).run(config)
            outputs.append((store.job_dir("osd", 0) / "records.csv").read_bytes())
        assert outputs[0] == outputs[1]
