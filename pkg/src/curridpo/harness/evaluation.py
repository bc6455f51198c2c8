"""Implicit-reward win rate against the SFT model, overall and per grid cell."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import dpo
from ..errors import DataFormatError, DataValidationError, InvalidInputError

TIE_EPS = 1e-9
REPORT_SCHEMA_VERSION = 1


def implicit_reward_margins(policy, sft, triples, beta: float) -> np.ndarray:
    """``beta * (log-ratio of chosen - log-ratio of rejected)`` against the SFT model, per pair."""
    return beta * dpo.log_ratio_margins(policy, sft, triples)


def implicit_reward_margin(policy, sft, pair, beta: float) -> float:
    return float(implicit_reward_margins(policy, sft, [pair], beta)[0])


def tally(margins) -> tuple[int, int, int]:
    margins = np.asarray(margins, dtype=np.float64)
    ties = int(np.sum(np.abs(margins) <= TIE_EPS))
    wins = int(np.sum(margins > TIE_EPS))
    return wins, ties, len(margins) - wins - ties


def adjusted_win_rate(wins: int, ties: int, losses: int) -> float:
    if min(wins, ties, losses) < 0:
        raise InvalidInputError("counts must be nonnegative")
    total = wins + ties + losses
    if total == 0:
        raise InvalidInputError("no pairs to compute a win rate over")
    return (wins + 0.5 * ties) / total


@dataclass
class CellStats:
    k: int
    m: int
    wins: int
    ties: int
    losses: int

    @property
    def count(self) -> int:
        return self.wins + self.ties + self.losses

    @property
    def adjusted_win_rate(self) -> float:
        return adjusted_win_rate(self.wins, self.ties, self.losses)


def decompose_by_cell(cells: Sequence[tuple[int, int] | None], margins, K: int, M: int) -> dict[tuple[int, int], CellStats]:
    """Group margins by (k, m); only populated cells appear in the result."""
    margins = np.asarray(margins, dtype=np.float64)
    if len(cells) != len(margins):
        raise InvalidInputError(f"{len(cells)} cell labels for {len(margins)} margins")
    groups: dict[tuple[int, int], list[float]] = {}
    for i, cell in enumerate(cells):
        if cell is None or cell[0] is None or cell[1] is None:
            raise DataValidationError(f"evaluation pair {i} has no grid ranks")
        k, m = int(cell[0]), int(cell[1])
        if not (1 <= k <= K and 1 <= m <= M):
            raise DataValidationError(f"evaluation pair {i} has ranks ({k}, {m}) outside {K}x{M}")
        groups.setdefault((k, m), []).append(margins[i])
    return {key: CellStats(key[0], key[1], *tally(vals)) for key, vals in sorted(groups.items())}


@dataclass
class EvalReport:
    wins: int
    ties: int
    losses: int
    adjusted_win_rate: float
    K: int
    M: int
    cells: list[dict] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def total(self) -> int:
        return self.wins + self.ties + self.losses

    def table(self) -> list[list[float | None]]:
        """K x M adjusted win rates; None marks cells with no pairs."""
        grid: list[list[float | None]] = [[None] * self.M for _ in range(self.K)]
        for c in self.cells:
            grid[c["k"] - 1][c["m"] - 1] = c["adjusted_win_rate"]
        return grid


def build_report(margins, cells, K: int, M: int) -> EvalReport:
    w, t, l = tally(margins)
    per_cell = decompose_by_cell(cells, margins, K, M)
    return EvalReport(w, t, l, adjusted_win_rate(w, t, l), K, M, [
        {"k": c.k, "m": c.m, "wins": c.wins, "ties": c.ties, "losses": c.losses, "count": c.count,
         "adjusted_win_rate": c.adjusted_win_rate} for c in per_cell.values()])


def emit_report(report: EvalReport, path) -> None:
    try:
        Path(path).write_text(json.dumps(asdict(report), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> EvalReport:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return EvalReport(**doc)
    except (json.JSONDecodeError, TypeError) as exc:
        raise DataFormatError(f"bad report: {exc}", path=path) from None
