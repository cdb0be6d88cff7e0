"""
Text and SVG renderings plus the CSV/JSON artifacts of ``report``.

CSV and JSON are the primary outputs; SVG plots are presentation only.
"""

import csv
import json
from pathlib import Path
from typing import List, Sequence, Tuple

from jinja2 import Environment, FileSystemLoader, StrictUndefined, select_autoescape
from pydantic import BaseModel

from core.budget import BudgetReport
from core.dataset import SplitStats
from core.metrics import MetricReport, PredictionSet
from core.ranking import Leaderboard
from shared.models import LogEntry

_TEMPLATES = Environment(
    loader=FileSystemLoader(Path(__file__).parent / "templates"),
    autoescape=select_autoescape(["svg.j2"]),
    keep_trailing_newline=True,
    undefined=StrictUndefined,
)

_SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


class LeaderboardRowTemplateData(BaseModel):
    position: int
    team: str
    mae: float
    rmse: float
    plcc: float
    srcc: float
    krcc: float
    score: float
    tied: bool


class PlotFrame(BaseModel):
    width: int = 480
    height: int = 360
    left: int = 48
    top: int = 16
    right: int = 16
    bottom: int = 40

    @property
    def plot_w(self) -> int:
        return self.width - self.left - self.right

    @property
    def plot_h(self) -> int:
        return self.height - self.top - self.bottom

    def project(
        self, points: Sequence[Tuple[float, float]], x_range: Tuple[float, float], y_range: Tuple[float, float]
    ) -> List[Tuple[float, float]]:
        (x0, x1), (y0, y1) = x_range, y_range
        sx = self.plot_w / (x1 - x0) if x1 > x0 else 0.0
        sy = self.plot_h / (y1 - y0) if y1 > y0 else 0.0
        return [
            (self.left + (x - x0) * sx, self.top + self.plot_h - (y - y0) * sy)
            for x, y in points
        ]

    def context(self, title: str) -> dict:
        return {
            "title": title,
            "width": self.width,
            "height": self.height,
            "left": self.left,
            "top": self.top,
            "plot_w": self.plot_w,
            "plot_h": self.plot_h,
        }


def render_leaderboard(board: Leaderboard) -> str:
    rows = [
        LeaderboardRowTemplateData(
            position=row.position,
            team=row.team,
            mae=row.report.mae,
            rmse=row.report.rmse,
            plcc=row.report.plcc,
            srcc=row.report.srcc,
            krcc=row.report.krcc,
            score=row.score,
            tied=row.tied,
        )
        for row in board.rows
    ]
    return _TEMPLATES.get_template("leaderboard.txt.j2").render(rows=rows, excluded=board.excluded)


def render_metrics(report: MetricReport, label: str = "metrics") -> str:
    values = [(name.upper(), getattr(report, name)) for name in ("mae", "rmse", "plcc", "srcc", "krcc")]
    return _TEMPLATES.get_template("metrics.txt.j2").render(label=label, n=report.n, values=values)


def render_budget(report: BudgetReport) -> str:
    return _TEMPLATES.get_template("budget.txt.j2").render(
        name=report.name,
        layers=report.layers,
        total_gmacs=report.total_gmacs,
        budget_gmacs=report.budget / 1e9,
        strict=report.strict,
        passed=report.passed,
    )


def render_history(entries: Sequence[LogEntry]) -> str:
    rows = [
        {
            "entry_id": entry.entry_id,
            "timestamp": entry.timestamp.isoformat(),
            "severity": entry.severity.value,
            "message": entry.message,
        }
        for entry in entries
    ]
    return _TEMPLATES.get_template("history.txt.j2").render(entries=rows)


def _padded_range(values: Sequence[float]) -> Tuple[float, float]:
    lo, hi = min(values), max(values)
    pad = (hi - lo) * 0.05 or 0.5
    return lo - pad, hi + pad


def scatter_svg(
    ps: PredictionSet, curve: Sequence[Tuple[float, float]], title: str = "prediction vs MOS"
) -> str:
    frame = PlotFrame()
    points = list(zip(ps.ground_truth, ps.predicted))
    x_range = _padded_range([x for x, _ in points] + [x for x, _ in curve])
    y_range = _padded_range([y for _, y in points] + [y for _, y in curve])
    return _TEMPLATES.get_template("scatter.svg.j2").render(
        **frame.context(title),
        points=frame.project(points, x_range, y_range),
        curve=frame.project(curve, x_range, y_range),
    )


def density_svg(stats: SplitStats, title: str = "MOS density") -> str:
    frame = PlotFrame()
    all_points = [(b.bin_center, b.density) for bins in stats.densities.values() for b in bins]
    x_range = _padded_range([x for x, _ in all_points])
    y_range = (0.0, max(y for _, y in all_points) * 1.05 or 1.0)
    all_series = [
        {
            "name": name,
            "color": _SERIES_COLORS[i % len(_SERIES_COLORS)],
            "points": frame.project([(b.bin_center, b.density) for b in bins], x_range, y_range),
        }
        for i, (name, bins) in enumerate(stats.densities.items())
    ]
    return _TEMPLATES.get_template("density.svg.j2").render(**frame.context(title), all_series=all_series)


def write_points_csv(ps: PredictionSet, path: Path | str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_id", "mos", "prediction"])
        for image_id, q, p in zip(ps.ids, ps.ground_truth, ps.predicted):
            writer.writerow([image_id, repr(q), repr(p)])


def write_curve_csv(curve: Sequence[Tuple[float, float]], path: Path | str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["mos", "fitted"])
        for q, p in curve:
            writer.writerow([repr(q), repr(p)])


def write_json(document: BaseModel | dict, path: Path | str) -> None:
    payload = document.model_dump(mode="json") if isinstance(document, BaseModel) else document
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
