"""Versioned CSV formats for run records, sweeps and decalibration curves.

Every file starts with one ``#schema=<name>/<version>`` line followed by a
header row.  Values are written with ``repr`` so files round-trip exactly and
reruns are byte-identical.  Wall-clock timings are kept out of these files and
go to ``*.timing.csv`` sidecars instead.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import LeakyBNNError
from .training import RUN_COLUMNS, RunRecord

RUN_SCHEMA = "leakybnn.run/1"
SWEEP_SCHEMA = "leakybnn.sweep/1"
DECAL_SCHEMA = "leakybnn.decal/1"

SWEEP_COLUMNS = ["dataset", "model", "slope", "seed", "val_acc", "val_ece", "status"]
DECAL_COLUMNS = ["slope", "epoch", "val_acc", "val_ece"]


class SchemaError(LeakyBNNError):
    pass


def cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, schema: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([cell(v) for v in row])


def write_run_csv(path, record: RunRecord) -> None:
    write_csv(path, RUN_SCHEMA, RUN_COLUMNS,
              ([getattr(r, c) if c == "epoch" else float(getattr(r, c)) for c in RUN_COLUMNS] for r in record.rows))


def write_timing_csv(path, rows) -> None:
    """``rows`` are (label, seconds) pairs; this file is not reproducible by design."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "wall_time_s"])
        for label, secs in rows:
            w.writerow([label, f"{secs:.3f}"])


@dataclass
class SweepRow:
    dataset: str
    model: str
    slope: float
    seed: int
    val_acc: float
    val_ece: float
    status: str = "ok"
    wall_time: float = 0.0

    def cells(self):
        return [self.dataset, self.model, float(self.slope), self.seed, float(self.val_acc), float(self.val_ece),
                self.status]


def write_sweep_csv(path, rows) -> None:
    write_csv(path, SWEEP_SCHEMA, SWEEP_COLUMNS, (r.cells() for r in rows))


def write_decal_csv(path, rows) -> None:
    """``rows`` are (slope, epoch, val_acc, val_ece) tuples."""
    write_csv(path, DECAL_SCHEMA, DECAL_COLUMNS, ([float(s), int(e), float(a), float(c)] for s, e, a, c in rows))


def read_sweep_csv(path) -> list[SweepRow]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise SchemaError(f"{path}: {e.strerror}") from None
    if not lines or not lines[0].startswith("#schema="):
        raise SchemaError(f"{path}:1: missing #schema line")
    schema = lines[0][len("#schema="):].strip()
    if schema != SWEEP_SCHEMA:
        raise SchemaError(f"{path}:1: unsupported schema {schema!r} (expected {SWEEP_SCHEMA})")
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if header != SWEEP_COLUMNS:
        raise SchemaError(f"{path}:2: header {header} does not match {SWEEP_COLUMNS}")
    rows = []
    for lineno, rec in enumerate(reader, 3):
        if len(rec) != len(SWEEP_COLUMNS):
            raise SchemaError(f"{path}:{lineno}: expected {len(SWEEP_COLUMNS)} fields, got {len(rec)}")
        try:
            row = SweepRow(rec[0], rec[1], float(rec[2]), int(rec[3]), float(rec[4]), float(rec[5]), rec[6])
        except ValueError as e:
            raise SchemaError(f"{path}:{lineno}: {e}") from None
        if row.status == "ok" and not 0.0 <= row.val_ece <= 1.0:
            raise SchemaError(f"{path}:{lineno}: ECE {row.val_ece} outside [0, 1]")
        rows.append(row)
    return rows


def finite_mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan
