"""Evaluation report emission: CSV tables, metric map grids, line charts.

Tables put methods in rows and levels in columns.  Charts are minimal static
SVG line plots (axes, ticks, series, reference line); they are hand-assembled
with fixed-precision coordinates so identical inputs yield byte-identical
files.
"""

from __future__ import annotations

from pathlib import Path

from .levels import LevelScheme, level_key
from .metrics import MetricReport
from .storage import write_grid, write_json

_SERIES_COLORS = ("#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085")

_CHART_W = 640
_CHART_H = 420
_MARGIN_L = 64
_MARGIN_R = 160
_MARGIN_T = 32
_MARGIN_B = 48


def _fmt(value: float) -> str:
    """Full-precision, round-trippable cell text."""
    return repr(float(value))


def save_metric_grids(directory, report: MetricReport) -> None:
    """Per-level coverage and width maps as CGF1 grids."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, level in enumerate(report.coverage_levels):
        key = level_key(level)
        write_grid(directory / f"picp_{key}.cgf", report.picp_grids[i], report.mask)
        write_grid(directory / f"iw_{key}.cgf", report.iw_grids[i], report.mask)


def sanitize_json(obj):
    """Replace non-finite floats with None so JSON output stays strict."""
    if isinstance(obj, float):
        return obj if obj == obj and abs(obj) != float("inf") else None
    if isinstance(obj, dict):
        return {k: sanitize_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize_json(v) for v in obj]
    return obj


def save_summary_json(path, method: str, summary: dict, extra: dict | None = None) -> None:
    payload = {"method": method, "metrics": sanitize_json(summary)}
    if extra:
        payload.update(sanitize_json(extra))
    write_json(path, payload)


def _coverage_row(summary: dict, scheme: LevelScheme, field: str) -> list:
    table = summary["coverage"]
    return [table[level_key(cov)][field] for cov in scheme.coverage_levels]


def _quantile_row(summary: dict, scheme: LevelScheme) -> list:
    table = summary["quantile_score"]
    return [table[level_key(g)] for g in scheme.quantile_levels]


def write_level_table(path, header_levels, rows: list[tuple[str, list]]) -> None:
    """CSV with methods as rows and one column per level."""
    lines = ["method," + ",".join(level_key(lv) for lv in header_levels)]
    for method, cells in rows:
        lines.append(method + "," + ",".join(_fmt(c) if c is not None else "" for c in cells))
    Path(path).write_text("\n".join(lines) + "\n")


def save_report_tables(directory, entries: list[tuple[str, dict]],
                       scheme: LevelScheme) -> None:
    """The four comparison tables for a set of per-method summaries."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cov_levels = scheme.coverage_levels
    write_level_table(
        directory / "interval_score.csv", cov_levels,
        [(m, _coverage_row(s, scheme, "mean_interval_score")) for m, s in entries],
    )
    write_level_table(
        directory / "interval_width.csv", cov_levels,
        [(m, _coverage_row(s, scheme, "mean_interval_width")) for m, s in entries],
    )
    write_level_table(
        directory / "picp.csv", cov_levels,
        [(m, _coverage_row(s, scheme, "picp")) for m, s in entries],
    )
    write_level_table(
        directory / "pct_deviation.csv", cov_levels,
        [(m, _coverage_row(s, scheme, "pct_deviation")) for m, s in entries],
    )
    write_level_table(
        directory / "quantile_score.csv", scheme.quantile_levels,
        [(m, _quantile_row(s, scheme)) for m, s in entries],
    )


def _px(value: float) -> str:
    return f"{value:.2f}"


class _Frame:
    """Maps data coordinates onto the SVG plot rectangle."""

    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.left = _MARGIN_L
        self.right = _CHART_W - _MARGIN_R
        self.top = _MARGIN_T
        self.bottom = _CHART_H - _MARGIN_B

    def x(self, v: float) -> float:
        span = self.x1 - self.x0
        frac = 0.5 if span == 0 else (v - self.x0) / span
        return self.left + frac * (self.right - self.left)

    def y(self, v: float) -> float:
        span = self.y1 - self.y0
        frac = 0.5 if span == 0 else (v - self.y0) / span
        return self.bottom - frac * (self.bottom - self.top)


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / (count - 1)
    return [lo + i * step for i in range(count)]


def line_chart_svg(series: list[tuple[str, list[float], list[float]]],
                   x_label: str, y_label: str,
                   y_range: tuple[float, float] | None = None,
                   x_ticks: list[float] | None = None,
                   reference: str | None = None) -> str:
    """Static line chart; ``reference`` draws either "diagonal" or "zero"."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if y == y]
    x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    if y_range is None:
        y_lo, y_hi = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
        if reference == "zero":
            y_lo, y_hi = min(y_lo, 0.0), max(y_hi, 0.0)
        pad = 0.05 * (y_hi - y_lo) or 1.0
        y_lo, y_hi = y_lo - pad, y_hi + pad
    else:
        y_lo, y_hi = y_range
    frame = _Frame((x_lo, x_hi), (y_lo, y_hi))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_CHART_W}" height="{_CHART_H}"'
        f' viewBox="0 0 {_CHART_W} {_CHART_H}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{_CHART_W}" height="{_CHART_H}" fill="white"/>',
        f'<rect x="{frame.left}" y="{frame.top}" width="{frame.right - frame.left}"'
        f' height="{frame.bottom - frame.top}" fill="none" stroke="#444444"/>',
    ]
    for tick in (x_ticks if x_ticks is not None else _nice_ticks(x_lo, x_hi)):
        px = frame.x(tick)
        parts.append(
            f'<line x1="{_px(px)}" y1="{frame.bottom}" x2="{_px(px)}"'
            f' y2="{frame.bottom + 5}" stroke="#444444"/>'
        )
        parts.append(
            f'<text x="{_px(px)}" y="{frame.bottom + 18}" text-anchor="middle">'
            f'{tick:.6g}</text>'
        )
    for tick in _nice_ticks(y_lo, y_hi):
        py = frame.y(tick)
        parts.append(
            f'<line x1="{frame.left - 5}" y1="{_px(py)}" x2="{frame.left}"'
            f' y2="{_px(py)}" stroke="#444444"/>'
        )
        parts.append(
            f'<text x="{frame.left - 8}" y="{_px(py + 4)}" text-anchor="end">'
            f'{tick:.6g}</text>'
        )
    parts.append(
        f'<text x="{(frame.left + frame.right) // 2}" y="{_CHART_H - 10}"'
        f' text-anchor="middle">{x_label}</text>'
    )
    parts.append(
        f'<text x="16" y="{(frame.top + frame.bottom) // 2}" text-anchor="middle"'
        f' transform="rotate(-90 16 {(frame.top + frame.bottom) // 2})">{y_label}</text>'
    )
    if reference == "diagonal":
        parts.append(
            f'<line x1="{_px(frame.x(x_lo))}" y1="{_px(frame.y(x_lo))}"'
            f' x2="{_px(frame.x(x_hi))}" y2="{_px(frame.y(x_hi))}"'
            f' stroke="#999999" stroke-dasharray="4 3"/>'
        )
    elif reference == "zero" and y_lo <= 0.0 <= y_hi:
        parts.append(
            f'<line x1="{frame.left}" y1="{_px(frame.y(0.0))}" x2="{frame.right}"'
            f' y2="{_px(frame.y(0.0))}" stroke="#999999" stroke-dasharray="4 3"/>'
        )
    for i, (name, xs, ys) in enumerate(series):
        color = _SERIES_COLORS[i % len(_SERIES_COLORS)]
        points = " ".join(
            f"{_px(frame.x(x))},{_px(frame.y(y))}" for x, y in zip(xs, ys) if y == y
        )
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        for x, y in zip(xs, ys):
            if y == y:
                parts.append(
                    f'<circle cx="{_px(frame.x(x))}" cy="{_px(frame.y(y))}" r="2.5"'
                    f' fill="{color}"/>'
                )
        ly = frame.top + 16 * i + 8
        lx = frame.right + 12
        parts.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}"'
            f' stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{lx + 26}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def save_report_charts(directory, entries: list[tuple[str, dict]],
                       scheme: LevelScheme) -> None:
    """PICP and percentage-deviation line charts versus nominal coverage."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    xs = [float(cov) for cov in scheme.coverage_levels]
    picp_series = []
    dev_series = []
    for method, summary in entries:
        ys = [float("nan") if v is None else float(v)
              for v in _coverage_row(summary, scheme, "picp")]
        picp_series.append((method, xs, ys))
        dev = [float("nan") if v is None else float(v)
               for v in _coverage_row(summary, scheme, "pct_deviation")]
        dev_series.append((method, xs, dev))
    picp_svg = line_chart_svg(
        picp_series, "nominal coverage", "mean PICP",
        y_range=(0.0, 1.0), x_ticks=xs, reference="diagonal",
    )
    (directory / "picp_chart.svg").write_text(picp_svg)
    dev_svg = line_chart_svg(
        dev_series, "nominal coverage", "PICP deviation (%)",
        x_ticks=xs, reference="zero",
    )
    (directory / "deviation_chart.svg").write_text(dev_svg)
