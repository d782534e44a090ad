"""Per-epoch metrics records and their CSV form.

Schema v1 columns, in order::

    epoch,lr,ce_s,ce_t2,l2,at,total,acc_s,acc_t2,secs,kd,hint

``l2`` and ``at`` are already multiplied by their weights; ``kd`` and
``hint`` carry the weighted terms of the KD and FitNet baselines so that
``total`` is always the sum of the loss columns. Inactive terms and
accuracies are left empty.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import FormatError

SCHEMA_VERSION = 1
COLUMNS = ("epoch", "lr", "ce_s", "ce_t2", "l2", "at", "total", "acc_s", "acc_t2", "secs", "kd", "hint")
LOSS_COLUMNS = ("ce_s", "ce_t2", "l2", "at", "kd", "hint")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    ce_s: float
    ce_t2: float | None
    l2: float | None
    at: float | None
    total: float
    acc_s: float | None
    acc_t2: float | None
    secs: float
    kd: float | None = None
    hint: float | None = None

    def component_sum(self) -> float:
        return sum(getattr(self, c) or 0.0 for c in LOSS_COLUMNS)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def to_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in records:
        writer.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def from_csv(text: str) -> list[MetricsRecord]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != COLUMNS:
        raise FormatError(f"unexpected metrics header {header}")
    out = []
    for row in reader:
        values = {}
        for name, cell in zip(COLUMNS, row):
            if cell == "":
                values[name] = None
            elif name == "epoch":
                values[name] = int(cell)
            else:
                values[name] = float(cell)
        out.append(MetricsRecord(**values))
    return out


def write_csv(path, records: list[MetricsRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(to_csv(records))


def read_csv(path) -> list[MetricsRecord]:
    return from_csv(Path(path).read_text())


STEP_COLUMNS = ("step", "epoch", "ce_s", "ce_t2", "l2", "at", "kd", "hint", "total")


def steps_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STEP_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in STEP_COLUMNS])
    return buf.getvalue()


def record_dict(r: MetricsRecord) -> dict:
    return asdict(r)
