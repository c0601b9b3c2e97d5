"""Experiment reports and CSV emission."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from .rates import RateFit


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    threshold: float | tuple[float, float]
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.6g} (threshold {_fmt_threshold(self.threshold)})"


def _fmt_threshold(t) -> str:
    if isinstance(t, tuple):
        return f"[{t[0]:g}, {t[1]:g}]"
    return f"{t:g}"


def at_least(name: str, value: float, bound: float) -> Check:
    return Check(name, float(value), bound, bool(value >= bound))


def at_most(name: str, value: float, bound: float) -> Check:
    return Check(name, float(value), bound, bool(value <= bound))


def within(name: str, value: float, lo: float, hi: float) -> Check:
    return Check(name, float(value), (lo, hi), bool(lo <= value <= hi))


@dataclass(frozen=True)
class GuardResult:
    eps: float
    resolution: tuple[int, int]
    doubled: tuple[int, int]
    change: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.change < self.tolerance


@dataclass
class SpectralReport:
    kind: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    fits: dict[str, RateFit] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    guard: GuardResult | None = None
    metadata: dict = field(default_factory=dict)
    tables: dict[str, tuple[list[str], list[dict]]] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def summary(self) -> str:
        out = [f"[{self.kind}] {len(self.rows)} rows"]
        if self.guard is not None:
            out.append(f"  guard: max eigenvalue change {self.guard.change:.3e} under doubling "
                       f"{self.guard.resolution} -> {self.guard.doubled} at eps={self.guard.eps:g}")
        for name, fit in self.fits.items():
            out.append(f"  fit {name}: {fit}")
        out.extend("  " + c.line() for c in self.checks)
        return "\n".join(out)


def _cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def format_csv(columns: list[str], rows: list[dict], metadata: dict) -> str:
    buf = io.StringIO()
    for key in sorted(metadata):
        buf.write(f"# {key}: {metadata[key]}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(path: Path, columns: list[str], rows: list[dict], metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_csv(columns, rows, metadata), encoding="utf-8")
    return path


def write_report(report: SpectralReport, directory) -> list[Path]:
    directory = Path(directory)
    files = [write_csv(directory / f"{report.kind}.csv", report.columns, report.rows, report.metadata)]
    for name, (cols, rows) in report.tables.items():
        files.append(write_csv(directory / f"{report.kind}_{name}.csv", cols, rows, report.metadata))
    if report.fits:
        fit_rows = [
            {"quantity": k, "slope": f.slope, "intercept": f.intercept, "residual": f.residual,
             "points": f.n_points, "excluded": len(f.excluded)}
            for k, f in report.fits.items()
        ]
        files.append(write_csv(directory / f"{report.kind}_fits.csv",
                               ["quantity", "slope", "intercept", "residual", "points", "excluded"],
                               fit_rows, report.metadata))
    report.files = files
    return files
