"""Sweep plots. The CSV written next to each figure is the source of truth."""

import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from src.models.reports import EvalReport
from src.utils.artifacts import write_csv
from src.utils.errors import ConfigurationError, PreconditionError

logger = logging.getLogger(__name__)

PLOT_KINDS = {
    "lambda_sweep": ("lambda",),
    "size_sweep": ("surrogate_size",),
    "defense_sweep": ("top_k", "rounding", "poison_eps"),
    "axis_sweep": ("metric", "augmentation", "stolen_arch", "algo"),
}

AXIS_LABELS = {
    "lambda": "lambda",
    "surrogate_size": "surrogate dataset size",
    "top_k": "k",
    "rounding": "m (decimals)",
    "poison_eps": "epsilon",
}

CSV_FIELDS = ["kind", "axis", "axis_value", "label", "task", "ta", "sa", "ratio_percent", "queries_attack"]


def kind_for_axis(axis: str) -> str:
    for kind, axes in PLOT_KINDS.items():
        if axis in axes:
            return kind
    raise ConfigurationError(f"No plot kind for sweep axis '{axis}'")


def sweep_rows(reports: Sequence[EvalReport], kind: str) -> List[Dict]:
    """Flatten reports into one row per (report, task), checking they share an axis."""
    if kind not in PLOT_KINDS:
        raise ConfigurationError(f"Unknown plot kind '{kind}', expected one of {sorted(PLOT_KINDS)}")
    if not reports:
        raise PreconditionError("no reports to plot")
    axes = {item.axis for item in reports}
    if len(axes) != 1:
        raise PreconditionError(f"reports do not share one axis: {sorted(str(a) for a in axes)}")
    axis = axes.pop()
    if axis is not None and axis not in PLOT_KINDS[kind]:
        raise PreconditionError(f"{kind} cannot plot axis '{axis}'")

    rows = []
    for item in reports:
        for task in item.tasks:
            rows.append({
                "kind": kind,
                "axis": axis,
                "axis_value": item.axis_value,
                "label": item.label,
                "task": task.task,
                "ta": task.ta,
                "sa": task.sa,
                "ratio_percent": task.ratio_percent,
                "queries_attack": task.queries_attack,
            })
    return rows


def _sort_key(value):
    try:
        return (0, float(value), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(value))


def emit_plots(
    reports: Sequence[EvalReport],
    kind: str,
    out_dir: Union[str, Path],
    name: Optional[str] = None,
) -> Dict[str, Path]:
    """
    Write <name>.csv and, when there is more than one sweep point, <name>.png.

    lambda_sweep and size_sweep plot SA per task against the axis;
    defense_sweep plots TA and SA side by side.

    Returns:
        {"csv": path} plus {"png": path} when a figure was drawn
    """
    rows = sweep_rows(reports, kind)
    out_dir = Path(out_dir)
    name = name or kind
    csv_path = out_dir / f"{name}.csv"
    write_csv(csv_path, rows, CSV_FIELDS)
    outputs = {"csv": csv_path}

    points = {row["axis_value"] for row in rows}
    if len(reports) < 2 or len(points) < 2:
        logger.info(f"{name}: only one sweep point, wrote CSV and skipped the figure")
        return outputs

    series = defaultdict(list)
    for row in rows:
        series[(row["label"], row["task"])].append(row)

    axis = rows[0]["axis"]
    categorical = kind == "axis_sweep"
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (label, task), items in sorted(series.items()):
        items = sorted(items, key=lambda r: _sort_key(r["axis_value"]))
        xs = [str(r["axis_value"]) if categorical else float(r["axis_value"]) for r in items]
        if kind == "defense_sweep":
            ax.plot(xs, [r["ta"] for r in items], marker="o", linestyle="--", label=f"TA {task}")
        ax.plot(xs, [r["sa"] for r in items], marker="o", label=f"SA {task} ({label})")

    if kind == "lambda_sweep":
        ax.set_xscale("symlog", linthresh=0.1)
    ax.set_xlabel(AXIS_LABELS.get(axis, str(axis)))
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()

    png_path = out_dir / f"{name}.png"
    png_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    outputs["png"] = png_path
    logger.info(f"Wrote {png_path} ({len(points)} points, {len(series)} series)")
    return outputs
