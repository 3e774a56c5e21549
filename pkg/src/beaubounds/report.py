"""Tables, checks and charts produced by experiments, and their files on disk."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from gmpy2 import mpfr

CSV_DIGITS = 20


def cell(value: Any) -> str:
    """CSV text of one value; big floats are rounded to a fixed number of digits."""
    if isinstance(value, mpfr):
        return format(value, f".{CSV_DIGITS}g")
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    return str(value)


def as_float(value: Any) -> float | None:
    if value is None or value == "":
        return None
    return float(value)


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def add(self, *values: Any) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"{self.name}: expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(list(values))

    def column(self, name: str) -> list[Any]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for r in self.rows:
            lines.append(",".join(cell(v) for v in r))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class Chart:
    """Line chart of ``ys`` against ``x`` from one table, one curve per ``group`` value."""

    name: str
    table: str
    x: str
    ys: tuple[str, ...]
    group: str | None = None
    title: str = ""
    ylabel: str = ""
    logy: bool = False


@dataclass
class ExperimentReport:
    kind: str
    tables: dict[str, Table] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    charts: list[Chart] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)
    maxima: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def table(self, name: str, columns: Iterable[str]) -> Table:
        if name not in self.tables:
            self.tables[name] = Table(name, list(columns))
        return self.tables[name]

    def merge(self, other: "ExperimentReport") -> "ExperimentReport":
        for name, t in other.tables.items():
            if name in self.tables:
                if self.tables[name].columns != t.columns:
                    raise ValueError(f"table {name} has conflicting columns")
                self.tables[name].rows.extend(t.rows)
            else:
                self.tables[name] = Table(t.name, list(t.columns), list(t.rows))
        self.checks.extend(other.checks)
        self.charts.extend(c for c in other.charts if c not in self.charts)
        self.meta.update(other.meta)
        self.maxima.update(other.maxima)
        return self

    def summary(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "meta": {k: _jsonable(v) for k, v in sorted(self.meta.items())},
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "maxima": {k: _jsonable(v) for k, v in sorted(self.maxima.items())},
            "rows": {name: len(t.rows) for name, t in sorted(self.tables.items())},
        }


def _jsonable(v: Any) -> Any:
    if isinstance(v, mpfr):
        return cell(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def emit_report(report: ExperimentReport, directory: str | Path, charts: bool = True) -> list[Path]:
    """Write ``<table>.csv`` per table, ``summary.json`` and ``<chart>.svg`` per chart."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in sorted(report.tables.items()):
        path = out / f"{name}.csv"
        path.write_text(table.to_csv())
        written.append(path)
    path = out / "summary.json"
    path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    written.append(path)
    if charts:
        for chart in report.charts:
            if chart.table in report.tables and report.tables[chart.table].rows:
                written.append(render_chart(chart, report.tables[chart.table], out))
    return written


def render_chart(chart: Chart, table: Table, directory: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # Fixed ids and no timestamp keep the SVG byte-identical across runs.
    with matplotlib.rc_context({"svg.hashsalt": "beaubounds", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        xi = table.columns.index(chart.x)
        gi = table.columns.index(chart.group) if chart.group else None
        groups: dict[str, list[list[Any]]] = {}
        for r in table.rows:
            groups.setdefault(str(r[gi]) if gi is not None else "", []).append(r)
        for key, rows in groups.items():
            for y in chart.ys:
                yi = table.columns.index(y)
                pts = [(as_float(r[xi]), as_float(r[yi])) for r in rows]
                pts = [p for p in pts if p[1] is not None]
                if not pts:
                    continue
                label = " ".join(s for s in (key, y if len(chart.ys) > 1 else "") if s)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=label or y)
        if chart.logy:
            ax.set_yscale("log")
        ax.set_xlabel(chart.x)
        ax.set_ylabel(chart.ylabel or ", ".join(chart.ys))
        ax.set_title(chart.title or chart.name)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize="small")
        fig.tight_layout()
        path = directory / f"{chart.name}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def render_partition_strip(partition, path: str | Path, title: str = "") -> Path:
    """Atoms of a partition drawn as a strip over ``[0, 1)``, shaded by generation."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    colors = {partition.level: "#4c72b0", partition.level + 1: "#dd8452"}
    with matplotlib.rc_context({"svg.hashsalt": "beaubounds", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(8.0, 1.6))
        for a in partition.atoms:
            left, length = float(a.left), float(a.length)
            pieces = [(left, length)] if left + length <= 1 else [(left, 1 - left), (0.0, left + length - 1)]
            ax.broken_barh(pieces, (0, 1), facecolors=colors[a.generation], edgecolor="white", linewidth=0.3)
        ax.set_xlim(0, 1)
        ax.set_yticks([])
        ax.set_title(title or f"P_{partition.level}: {len(partition)} atoms")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
