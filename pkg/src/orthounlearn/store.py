"""Output directory layout for experiment runs.

::

    <output_dir>/config.yaml
    <output_dir>/summary.json
    <output_dir>/error.json            (only after a failure)
    <output_dir>/<algorithm>/<seed>/records.csv
    <output_dir>/<algorithm>/<seed>/summary.json
    <output_dir>/<algorithm>/<seed>/{origin,unlearned,final}.ckpt
"""

from __future__ import annotations

import json
import logging
import shutil
from pathlib import Path
from typing import Any

import yaml

from orthounlearn.checkpoint import save_checkpoint
from orthounlearn.errors import ConfigurationError
from orthounlearn.metrics import JobSummary, RoundRecord, RunSummary, write_records, write_summary
from orthounlearn.nn_core import ModelParams
from orthounlearn.strategies import ALGORITHMS

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"
SUMMARY_FILE = "summary.json"
ERROR_FILE = "error.json"
RECORDS_FILE = "records.csv"
CHECKPOINT_SUFFIX = ".ckpt"
PLOT_FILES = ("asr.svg", "racc.svg", "dist.svg")


class ResultStore:
    """Reads and writes one run's output directory."""

    def __init__(self, output_dir: Path) -> None:
        """Initialize the store.

        Args:
            output_dir: Run directory.

        Note:
            Prefer using the factory method `create()` for construction.
        """
        self.output_dir = output_dir
        self.config_file = output_dir / CONFIG_FILE
        self.summary_file = output_dir / SUMMARY_FILE
        self.error_file = output_dir / ERROR_FILE

    @classmethod
    def create(cls, output_dir: Path) -> ResultStore:
        """Create a store rooted at ``output_dir``.

        Args:
            output_dir: Run directory.

        Returns:
            Configured ResultStore instance.
        """
        return cls(output_dir=output_dir)

    def job_dir(self, algorithm: str, seed: int) -> Path:
        """Directory owned by one (algorithm, seed) job."""
        return self.output_dir / algorithm / str(seed)

    def _owned_entries(self) -> list[Path]:
        """Entries of the output directory this store produces."""
        if not self.output_dir.is_dir():
            return []
        names = {CONFIG_FILE, SUMMARY_FILE, ERROR_FILE, *PLOT_FILES, *ALGORITHMS}
        return sorted(p for p in self.output_dir.iterdir() if p.name in names)

    def has_results(self) -> bool:
        """True if a previous run left outputs behind."""
        return bool(self._owned_entries())

    def prepare(self, force: bool = False) -> None:
        """Create the output directory, refusing to overwrite previous results.

        Args:
            force: Remove previous results first.

        Raises:
            ConfigurationError: If results exist and ``force`` is not set.
        """
        entries = self._owned_entries()
        if entries and not force:
            raise ConfigurationError(
                f"{self.output_dir} already contains results; pass --force to overwrite",
                "output_dir",
            )
        for entry in entries:
            logger.info("removing previous result %s", entry)
            if entry.is_dir():
                shutil.rmtree(entry)
            else:
                entry.unlink()
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def write_config(self, resolved: dict[str, Any]) -> Path:
        """Echo the resolved configuration as YAML."""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config_file.write_text(yaml.safe_dump(resolved, sort_keys=False), encoding="utf-8")
        return self.config_file

    def write_job(
        self,
        job: JobSummary,
        records: list[RoundRecord],
        checkpoints: dict[str, ModelParams],
    ) -> Path:
        """Write records, job summary and checkpoints for one job."""
        job_dir = self.job_dir(job.algorithm, job.seed)
        job_dir.mkdir(parents=True, exist_ok=True)
        write_records(records, job_dir / RECORDS_FILE)
        (job_dir / SUMMARY_FILE).write_text(job.model_dump_json(indent=2) + "\n", encoding="utf-8")
        for name, model in checkpoints.items():
            save_checkpoint(model, job_dir / f"{name}{CHECKPOINT_SUFFIX}")
        logger.debug("wrote job %s seed %d to %s", job.algorithm, job.seed, job_dir)
        return job_dir

    def write_summary(self, summary: RunSummary) -> Path:
        """Write the run-level summary."""
        return write_summary(summary, self.summary_file)

    def write_error(self, payload: dict[str, Any]) -> Path:
        """Write a machine-readable error report."""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.error_file.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return self.error_file

    def records_files(self) -> dict[str, list[Path]]:
        """Records CSVs grouped by algorithm, seeds in ascending order."""
        found: dict[str, list[Path]] = {}
        if not self.output_dir.is_dir():
            return found
        for algo_dir in sorted(p for p in self.output_dir.iterdir() if p.is_dir()):
            seed_dirs = [p for p in algo_dir.iterdir() if p.is_dir() and p.name.isdigit()]
            files = [
                d / RECORDS_FILE
                for d in sorted(seed_dirs, key=lambda p: int(p.name))
                if (d / RECORDS_FILE).is_file()
            ]
            if files:
                found[algo_dir.name] = files
        return found
