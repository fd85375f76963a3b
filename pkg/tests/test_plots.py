"""Tests for plots module."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from orthounlearn.errors import IngestionError
from orthounlearn.metrics import RoundRecord, write_records
from orthounlearn.plots import emit_plots, load_curve


def _run(asr_values: list[float], unlearn: int, pretrain: int = 2) -> list[RoundRecord]:
    records = []
    for index in range(pretrain + len(asr_values)):
        offset = index - pretrain
        if offset < 0:
            stage, asr = "pretrain", 0.9
        else:
            stage = "unlearn" if offset < unlearn else "posttrain"
            asr = asr_values[offset]
        records.append(
            RoundRecord(
                round=index + 1,
                stage=stage,
                asr=asr,
                r_acc_mean=0.8,
                r_acc_std=0.0,
                r_acc_worst=0.8,
                r_acc_best=0.8,
                dist_origin=0.1 * max(offset, 0),
                nc=0,
                target_uce_loss=0.2,
                mean_remaining_ce_loss=0.5,
                lr=0.5,
            )
        )
    return records


@pytest.fixture
def run_dir(tmp_path: Path) -> Path:
    """Run directory with two algorithms, the first over two seeds."""
    root = tmp_path / "run"
    write_records(_run([0.6, 0.2, 0.1, 0.1], unlearn=2), root / "osd" / "0" / "records.csv")
    write_records(_run([0.4, 0.0, 0.1, 0.3], unlearn=2), root / "osd" / "1" / "records.csv")
    write_records(_run([0.8, 0.7, 0.6, 0.5], unlearn=3), root / "neg-grad" / "0" / "records.csv")
    return root


class TestLoadCurve:
    """Tests for load_curve."""

    def test_mean_over_seeds(self, run_dir: Path) -> None:
        """Test seeds are averaged and rounds count from the end of pretraining."""
        files = [run_dir / "osd" / seed / "records.csv" for seed in ("0", "1")]
        curve = load_curve("osd", files)
        np.testing.assert_array_equal(curve.rounds, [1, 2, 3, 4])
        np.testing.assert_allclose(curve.series["asr.svg"], [0.5, 0.1, 0.1, 0.2])
        assert curve.unlearn_end == 2

    def test_mismatched_seed_dropped(
        self, tmp_path: Path, caplog: pytest.LogCaptureFixture
    ) -> None:
        """Test a seed with a different length is left out of the mean."""
        first = write_records(_run([0.6, 0.2, 0.1], unlearn=2), tmp_path / "a.csv")
        second = write_records(_run([0.4, 0.0], unlearn=1), tmp_path / "b.csv")
        with caplog.at_level("WARNING"):
            curve = load_curve("osd", [first, second])
        np.testing.assert_allclose(curve.series["asr.svg"], [0.6, 0.2, 0.1])
        assert "not averaged" in caplog.text

    def test_pretrain_only(self, tmp_path: Path) -> None:
        """Test records without later stages give no curve."""
        path = write_records(_run([], unlearn=0), tmp_path / "records.csv")
        assert load_curve("osd", [path]) is None


class TestEmitPlots:
    """Tests for emit_plots."""

    def test_writes_three_charts(self, run_dir: Path) -> None:
        """Test asr, racc and dist charts are written with every algorithm."""
        written = emit_plots(run_dir)
        assert [p.name for p in written] == ["asr.svg", "racc.svg", "dist.svg"]
        for path in written:
            text = path.read_text(encoding="utf-8")
            assert text.lstrip().startswith("<?xml")
            assert "osd" in text
            assert "neg-grad" in text

    def test_rerun_is_byte_identical(self, run_dir: Path, tmp_path: Path) -> None:
        """Test charts depend only on the records."""
        first = [p.read_bytes() for p in emit_plots(run_dir, tmp_path / "first")]
        second = [p.read_bytes() for p in emit_plots(run_dir, tmp_path / "second")]
        assert first == second

    def test_custom_output_dir(self, run_dir: Path, tmp_path: Path) -> None:
        """Test charts can be written outside the run directory."""
        written = emit_plots(run_dir, tmp_path / "charts")
        assert all(p.parent == tmp_path / "charts" for p in written)
        assert not (run_dir / "asr.svg").exists()

    def test_empty_directory(self, tmp_path: Path) -> None:
        """Test a directory without records raises."""
        with pytest.raises(IngestionError) as exc_info:
            emit_plots(tmp_path)
        assert exc_info.value.field == "records"
