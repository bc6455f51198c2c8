"""Per-step training metrics as CSV."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ..errors import DataFormatError

HEADER = ["step", "stage", "k", "m", "train_loss", "val_loss", "kl_est", "ref_updated", "wall_ms"]


@dataclass
class MetricsRecord:
    step: int
    stage: int
    k: int | None
    m: int | None
    train_loss: float
    val_loss: float | None
    kl_est: float | None = None
    ref_updated: bool = False
    wall_ms: float | None = None

    def row(self) -> list[str]:
        def f(x):
            return "" if x is None else repr(float(x))

        def i(x):
            return "" if x is None else str(int(x))

        return [str(self.step), str(self.stage), i(self.k), i(self.m), f(self.train_loss), f(self.val_loss),
                f(self.kl_est), "1" if self.ref_updated else "0", f(self.wall_ms)]


def emit_metrics(records: Iterable[MetricsRecord], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for r in records:
        writer.writerow(r.row())
    try:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path) -> list[MetricsRecord]:
    def f(x):
        return None if x == "" else float(x)

    def i(x):
        return None if x == "" else int(x)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise DataFormatError(f"unexpected metrics header {header}", path=path)
        out = []
        for lineno, row in enumerate(reader, 2):
            try:
                out.append(MetricsRecord(int(row[0]), int(row[1]), i(row[2]), i(row[3]), float(row[4]), f(row[5]),
                                         f(row[6]), row[7] == "1", f(row[8])))
            except (ValueError, IndexError) as exc:
                raise DataFormatError(f"bad metrics row: {exc}", path=path, line=lineno) from None
    return out
