"""Long-format metrics CSV (one row per scalar) and a JSON summary record."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

COLUMNS = ("phase", "epoch", "name", "value")


@dataclass
class MetricsRow:
    phase: str
    epoch: int
    metrics: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_log_row(cls, row: dict) -> "MetricsRow":
        metrics = {k: float(v) for k, v in row.items()
                   if k not in ("phase", "epoch") and v is not None}
        return cls(str(row["phase"]), int(row["epoch"]), metrics)

    def same_as(self, other: "MetricsRow") -> bool:
        """Equality that treats NaN as equal to NaN."""
        if (self.phase, self.epoch) != (other.phase, other.epoch):
            return False
        if self.metrics.keys() != other.metrics.keys():
            return False
        return all(a == b or (math.isnan(a) and math.isnan(b))
                   for a, b in ((self.metrics[k], other.metrics[k]) for k in self.metrics))


class MetricsWriter:
    """Append-only writer; the metric names of the first row of each phase fix
    that phase's schema."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.schemas: dict[str, tuple[str, ...]] = {}
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(COLUMNS)

    def append(self, row: MetricsRow) -> None:
        names = tuple(row.metrics)
        known = self.schemas.setdefault(row.phase, names)
        if known != names:
            raise ValueError(f"phase {row.phase!r}: metric names changed within a run")
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for name, value in row.metrics.items():
                w.writerow((row.phase, row.epoch, name, repr(float(value))))


def write_metrics(path: str | Path, rows: list[MetricsRow]) -> None:
    writer = MetricsWriter(path)
    for row in rows:
        writer.append(row)


def read_metrics(path: str | Path) -> list[MetricsRow]:
    rows: list[MetricsRow] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(COLUMNS)}")
        for phase, epoch, name, value in reader:
            epoch = int(epoch)
            if not rows or (rows[-1].phase, rows[-1].epoch) != (phase, epoch):
                rows.append(MetricsRow(phase, epoch))
            rows[-1].metrics[name] = float(value)
    return rows


def write_summary(path: str | Path, record: dict) -> None:
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def read_summary(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
