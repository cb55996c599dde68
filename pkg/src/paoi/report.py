"""Result records and their file forms: a delimited table or a JSON document."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

COLUMNS = ("class_id", "lambda", "x", "y", "A_analytic", "A_sim", "A_sim_halfwidth", "cost")


@dataclass
class ClassRow:
    class_id: int
    lam: float
    x: float
    y: float
    a_analytic: float | None = None
    a_sim: float | None = None
    a_sim_halfwidth: float | None = None
    cost: float | None = None

    def values(self) -> tuple:
        return (self.class_id, self.lam, self.x, self.y, self.a_analytic, self.a_sim,
                self.a_sim_halfwidth, self.cost)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ResultRecord:
    scenario: str
    subcommand: str
    label: str = ""
    rows: list[ClassRow] = field(default_factory=list)
    scalars: dict[str, Any] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)
    config: dict[str, Any] | None = None

    @property
    def stem(self) -> str:
        parts = [self.scenario, self.subcommand] + ([self.label] if self.label else [])
        return "_".join(p.replace("/", "-").replace(" ", "-") for p in parts)

    @property
    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]


def format_value(value, precision: int = 6) -> str:
    """Text form used in tables: ``precision`` significant digits, literal ``inf``."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.{precision}g}"
    return str(value)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return format_value(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item"):  # numpy scalar
        return _jsonable(value.item())
    return value


def table_text(record: ResultRecord, precision: int = 6) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(COLUMNS)
    for row in record.rows:
        out.writerow([format_value(v, precision) for v in row.values()])
    out.writerow([])
    out.writerow(("key", "value"))
    out.writerow(("scenario", record.scenario))
    out.writerow(("subcommand", record.subcommand))
    if record.label:
        out.writerow(("label", record.label))
    for key, value in record.scalars.items():
        out.writerow((key, format_value(value, precision)))
    for check in record.checks:
        out.writerow((f"check.{check.name}", "pass" if check.passed else "FAIL"))
    for key, value in record.provenance.items():
        out.writerow((f"provenance.{key}", format_value(value, precision)))
    return buf.getvalue()


def object_form(record: ResultRecord) -> dict[str, Any]:
    """Self-describing document; numbers keep full precision."""
    return _jsonable({
        "scenario": record.scenario,
        "subcommand": record.subcommand,
        "label": record.label,
        "columns": list(COLUMNS),
        "rows": [dict(zip(COLUMNS, row.values())) for row in record.rows],
        "scalars": record.scalars,
        "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in record.checks],
        "provenance": record.provenance,
        "config": record.config,
    })


def emit(records: list[ResultRecord], fmt: str, out_dir, precision: int = 6) -> list[Path]:
    """Write one file per record; raises OSError when ``out_dir`` is not writable."""
    if fmt not in ("table", "object"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for record in records:
        if fmt == "table":
            path = out / f"{record.stem}.csv"
            path.write_text(table_text(record, precision))
        else:
            path = out / f"{record.stem}.json"
            path.write_text(json.dumps(object_form(record), indent=2) + "\n")
        paths.append(path)
    return paths


def read_object(path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())


def write_surface(path, axis1, axis2, costs, precision: int = 6) -> Path:
    """Long-form ``lambda_1,lambda_2,C_sys`` triples; unstable cells read ``inf``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("lambda_1", "lambda_2", "C_sys"))
        for i, a in enumerate(axis1):
            for j, b in enumerate(axis2):
                out.writerow((format_value(float(a), precision), format_value(float(b), precision),
                              format_value(float(costs[i, j]), precision)))
    return path


def read_surface(path) -> list[tuple[float, float, float]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return [(float(a), float(b), float(c)) for a, b, c in rows[1:]]
