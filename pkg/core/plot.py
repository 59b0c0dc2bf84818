"""SVG figures rendered from jinja2 templates, plus the CSV of every plotted point."""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from jinja2 import Environment, FileSystemLoader, StrictUndefined, select_autoescape

# Set up logging
logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"
POINT_COLUMNS = ["figure", "series", "x", "y"]
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]

WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 70, "right": 170, "top": 40, "bottom": 55}

templates = Environment(
    loader=FileSystemLoader(str(TEMPLATE_DIR)),
    autoescape=select_autoescape(["svg", "j2"]),
    undefined=StrictUndefined,
    trim_blocks=True,
    lstrip_blocks=True,
)


@dataclass
class Series:
    label: str
    points: List[Tuple[float, float]]


@dataclass
class Figure:
    name: str
    title: str
    kind: str
    x_label: str
    y_label: str
    series: List[Series] = field(default_factory=list)
    categories: List[str] = field(default_factory=list)


def line_figure(name: str, title: str, x_label: str, y_label: str, series: Sequence[Series]) -> Figure:
    return Figure(name, title, "line", x_label, y_label, list(series))


def bar_figure(name: str, title: str, y_label: str, categories: Sequence[str], stacks: Dict[str, Sequence[float]]) -> Figure:
    """Stacked bars; stack `k` contributes the point (category index, value) to series `k`."""
    series = [Series(label, [(float(i), float(v)) for i, v in enumerate(values)]) for label, values in stacks.items()]
    return Figure(name, title, "bar", "", y_label, series, list(categories))


def nice_ticks(lo: float, hi: float, count: int = 5) -> List[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(count, 1)
    magnitude = 10 ** math.floor(math.log10(raw))
    step = next(m * magnitude for m in (1, 2, 2.5, 5, 10) if m * magnitude >= raw)
    start = math.ceil(lo / step) * step
    return [round(v, 12) for v in np.arange(start, hi + step * 1e-9, step)]


def _finite(values) -> List[float]:
    return [v for v in values if math.isfinite(v)]


def _extent(values: List[float]) -> Tuple[float, float]:
    if not values:
        return 0.0, 1.0
    lo, hi = min(values), max(values)
    if hi == lo:
        pad = abs(lo) * 0.05 or 0.5
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


class _Scale:
    def __init__(self, lo: float, hi: float, px_lo: float, px_hi: float):
        self.lo, self.hi, self.px_lo, self.px_hi = lo, hi, px_lo, px_hi

    def __call__(self, v: float) -> float:
        return self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)


def _line_context(figure: Figure) -> dict:
    xs = _finite(x for s in figure.series for x, _ in s.points)
    ys = _finite(y for s in figure.series for _, y in s.points)
    x_lo, x_hi = _extent(xs)
    y_lo, y_hi = _extent(ys)
    sx = _Scale(x_lo, x_hi, MARGIN["left"], WIDTH - MARGIN["right"])
    sy = _Scale(y_lo, y_hi, HEIGHT - MARGIN["bottom"], MARGIN["top"])
    series = []
    for i, s in enumerate(figure.series):
        points = [
            {"x": x, "y": y, "px": round(sx(x), 2), "py": round(sy(y), 2)}
            for x, y in s.points if math.isfinite(x) and math.isfinite(y)
        ]
        series.append({"label": s.label, "color": PALETTE[i % len(PALETTE)], "points": points})
    return {
        "x_ticks": [{"value": v, "px": round(sx(v), 2)} for v in nice_ticks(x_lo, x_hi)],
        "y_ticks": [{"value": v, "px": round(sy(v), 2)} for v in nice_ticks(y_lo, y_hi)],
        "series": series,
    }


def _bar_context(figure: Figure) -> dict:
    n = len(figure.categories)
    totals = [sum(max(s.points[i][1], 0.0) for s in figure.series) for i in range(n)]
    y_hi = max(totals) * 1.05 if totals and max(totals) > 0 else 1.0
    sy = _Scale(0.0, y_hi, HEIGHT - MARGIN["bottom"], MARGIN["top"])
    plot_width = WIDTH - MARGIN["left"] - MARGIN["right"]
    slot = plot_width / max(n, 1)
    bars = []
    for i, category in enumerate(figure.categories):
        base = 0.0
        segments = []
        for j, s in enumerate(figure.series):
            value = s.points[i][1]
            top = base + max(value, 0.0)
            segments.append({
                "label": s.label, "value": value, "color": PALETTE[j % len(PALETTE)],
                "py": round(sy(top), 2), "height": round(sy(base) - sy(top), 2),
            })
            base = top
        bars.append({"category": category, "px": round(MARGIN["left"] + i * slot + slot * 0.15, 2),
                     "width": round(slot * 0.7, 2), "center": round(MARGIN["left"] + (i + 0.5) * slot, 2),
                     "segments": segments})
    return {
        "y_ticks": [{"value": v, "px": round(sy(v), 2)} for v in nice_ticks(0.0, y_hi)],
        "bars": bars,
        "legend": [{"label": s.label, "color": PALETTE[j % len(PALETTE)]} for j, s in enumerate(figure.series)],
    }


def render_svg(figure: Figure) -> str:
    context = _line_context(figure) if figure.kind == "line" else _bar_context(figure)
    template = templates.get_template(f"{figure.kind}_chart.svg.j2")
    return template.render(figure=figure, width=WIDTH, height=HEIGHT, margin=MARGIN, **context)


def write_svg(figure: Figure, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(figure), encoding="utf-8")
    logger.info(f"Wrote figure {path}")
    return path


def write_points_csv(figures: Sequence[Figure], path: Union[str, Path]) -> Path:
    """One row per plotted point, values written exactly as they appear in the source table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(POINT_COLUMNS)
        for figure in figures:
            for s in figure.series:
                for x, y in s.points:
                    writer.writerow([figure.name, s.label, repr(float(x)), repr(float(y))])
    logger.info(f"Wrote plotted points to {path}")
    return path
