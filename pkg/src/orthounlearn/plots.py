"""SVG charts of ASR, retained accuracy and distance to the origin."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from orthounlearn.errors import IngestionError
from orthounlearn.metrics import RoundRecord, read_records
from orthounlearn.store import ResultStore

logger = logging.getLogger(__name__)

SVG_RC = {
    "svg.hashsalt": "orthounlearn",
    "svg.fonttype": "none",
    "path.simplify": False,
}


@dataclass(frozen=True)
class ChartSpec:
    """One chart: file name, y label and the record field it plots."""

    filename: str
    ylabel: str
    value: Callable[[RoundRecord], float]


CHARTS = (
    ChartSpec("asr.svg", "attack success rate", lambda r: r.asr),
    ChartSpec("racc.svg", "mean retained accuracy", lambda r: r.r_acc_mean),
    ChartSpec("dist.svg", "distance to origin", lambda r: r.dist_origin),
)


@dataclass(frozen=True, eq=False)
class Curve:
    """Post-pretraining trajectory of one algorithm, averaged over seeds."""

    algorithm: str
    rounds: np.ndarray
    series: dict[str, np.ndarray]
    unlearn_end: int | None


def _after_pretraining(records: Sequence[RoundRecord]) -> list[RoundRecord]:
    return [r for r in records if r.stage != "pretrain"]


def load_curve(algorithm: str, files: Sequence[Path]) -> Curve | None:
    """Average the seeds of one algorithm; seeds of a different length are dropped."""
    runs = [_after_pretraining(read_records(path)) for path in files]
    runs = [run for run in runs if run]
    if not runs:
        return None
    reference = runs[0]
    kept = [run for run in runs if len(run) == len(reference)]
    if len(kept) < len(runs):
        logger.warning(
            "%s: %d seed(s) ended unlearning at a different round and are not averaged",
            algorithm,
            len(runs) - len(kept),
        )
    offset = reference[0].round - 1
    unlearn = [r.round for r in reference if r.stage == "unlearn"]
    return Curve(
        algorithm=algorithm,
        rounds=np.array([r.round - offset for r in reference]),
        series={
            chart.filename: np.mean([[chart.value(r) for r in run] for run in kept], axis=0)
            for chart in CHARTS
        },
        unlearn_end=unlearn[-1] - offset if unlearn else None,
    )


def _render(chart: ChartSpec, curves: Sequence[Curve], path: Path) -> Path:
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.add_subplot()
    colors = matplotlib.colormaps["tab10"].colors
    for index, curve in enumerate(curves):
        color = colors[index % len(colors)]
        ax.plot(curve.rounds, curve.series[chart.filename], label=curve.algorithm, color=color)
        if curve.unlearn_end is not None:
            ax.axvline(curve.unlearn_end, color=color, linestyle=":", linewidth=1.0)
    ax.set_xlabel("round after pretraining")
    ax.set_ylabel(chart.ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize="small")
    with matplotlib.rc_context(SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def emit_plots(records_dir: Path, out_dir: Path | None = None) -> list[Path]:
    """Render asr.svg, racc.svg and dist.svg from a run directory.

    Each chart has one polyline per algorithm; a dotted vertical line marks
    where that algorithm's unlearning stage ended. Output depends only on the
    records CSVs.

    Args:
        records_dir: Run output directory.
        out_dir: Where to write the SVGs; defaults to ``records_dir``.

    Returns:
        Paths of the written charts.

    Raises:
        IngestionError: If the directory holds no records.
    """
    store = ResultStore.create(records_dir)
    curves = [
        curve
        for name, files in sorted(store.records_files().items())
        if (curve := load_curve(name, files)) is not None
    ]
    if not curves:
        raise IngestionError(f"no records found under {records_dir}", "records")

    target = out_dir or records_dir
    target.mkdir(parents=True, exist_ok=True)
    written = [_render(chart, curves, target / chart.filename) for chart in CHARTS]
    logger.info("wrote %d charts to %s", len(written), target)
    return written
