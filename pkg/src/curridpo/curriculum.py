"""K x M difficulty grid, traversal strategies and stage plans."""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, InvalidInputError

log = logging.getLogger(__name__)

PLAN_FORMAT_VERSION = 1


class Strategy(str, enum.Enum):
    PC_FIRST = "pc-first"
    PD_FIRST = "pd-first"
    SUM_PC = "s-pc"
    SUM_PD = "s-pd"


@dataclass(frozen=True)
class GridSpec:
    K: int = 3
    M: int = 3

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ConfigError(f"grid dimensions must be >= 1, got {self.K}x{self.M}")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        try:
            k, m = text.lower().split("x")
            return cls(int(k), int(m))
        except ValueError:
            raise ConfigError(f"grid must look like KxM, got {text!r}") from None

    def __str__(self) -> str:
        return f"{self.K}x{self.M}"


@dataclass(frozen=True)
class CellAssignment:
    sample_id: str
    k: int
    m: int


def _sorted_order(values: Sequence[float], order: str) -> list[int]:
    if order == "ascending":
        return sorted(range(len(values)), key=lambda i: (values[i], i))
    if order == "descending":
        return sorted(range(len(values)), key=lambda i: (-values[i], i))
    raise InvalidInputError(f"order must be 'ascending' or 'descending', got {order!r}")


def group_sizes(n: int, bins: int) -> list[int]:
    """Split n into ``bins`` contiguous sizes differing by at most 1; earlier groups are larger."""
    q, r = divmod(n, bins)
    return [q + (1 if g < r else 0) for g in range(bins)]


def quantile_bin(values: Sequence[float], bins: int, order: str = "ascending") -> list[int]:
    """Rank in [1, bins] for each value by equal-count slicing of the sorted values.

    Ties are broken by original position, so the result is fully determined.
    """
    values = [float(v) for v in values]
    if not values:
        raise InvalidInputError("cannot bin an empty list")
    if bins < 1:
        raise InvalidInputError(f"bins must be >= 1, got {bins}")
    if not all(math.isfinite(v) for v in values):
        raise InvalidInputError("values must be finite")
    ranks = [0] * len(values)
    pos = 0
    idx = _sorted_order(values, order)
    for g, size in enumerate(group_sizes(len(values), bins), 1):
        for i in idx[pos : pos + size]:
            ranks[i] = g
        pos += size
    return ranks


def bin_edges(values: Sequence[float], bins: int, order: str = "ascending") -> list[float]:
    """Boundary value of each rank group (last element of the group in sort order).

    Used to place held-out values into the grid built from training values.
    Empty groups repeat the previous boundary.
    """
    ranks = quantile_bin(values, bins, order)
    edges = []
    for g in range(1, bins + 1):
        members = [v for v, r in zip(values, ranks) if r == g]
        if members:
            edges.append(max(members) if order == "ascending" else min(members))
        else:
            edges.append(edges[-1] if edges else (math.inf if order == "ascending" else -math.inf))
    return edges


def rank_by_edges(value: float, edges: Sequence[float], order: str = "ascending") -> int:
    for g, edge in enumerate(edges, 1):
        if (order == "ascending" and value <= edge) or (order == "descending" and value >= edge):
            return g
    return len(edges)


def assign_cells(scored, grid: GridSpec) -> list[CellAssignment]:
    """k from PC (low PC -> 1), m from PD (high PD -> 1)."""
    scored = list(scored)
    if not scored:
        raise InvalidInputError("no scored samples to assign")
    ks = quantile_bin([s.pc for s in scored], grid.K, "ascending")
    ms = quantile_bin([s.pd for s in scored], grid.M, "descending")
    return [CellAssignment(s.pair_id, k, m) for s, k, m in zip(scored, ks, ms)]


def curriculum_order(strategy: Strategy, grid: GridSpec) -> list[tuple[int, int]]:
    """Visit order over all cells (k, m)."""
    strategy = Strategy(strategy)
    K, M = grid.K, grid.M
    if strategy is Strategy.PC_FIRST:
        return [(k, m) for k in range(1, K + 1) for m in range(1, M + 1)]
    if strategy is Strategy.PD_FIRST:
        return [(k, m) for m in range(1, M + 1) for k in range(1, K + 1)]
    cells = []
    for s in range(2, K + M + 1):
        # walk one anti-diagonal k + m = s
        if strategy is Strategy.SUM_PC:
            cells.extend((k, s - k) for k in range(max(1, s - M), min(K, s - 1) + 1))
        else:
            cells.extend((s - m, m) for m in range(max(1, s - K), min(M, s - 1) + 1))
    return cells


@dataclass
class Stage:
    index: int
    k: int | None
    m: int | None
    sample_ids: list[str]
    steps: int
    smoothing_steps: int

    def to_dict(self) -> dict:
        return {"index": self.index, "k": self.k, "m": self.m, "sample_ids": list(self.sample_ids),
                "steps": self.steps, "smoothing_steps": self.smoothing_steps}


@dataclass
class CurriculumPlan:
    strategy: str
    K: int
    M: int
    stages: list[Stage]
    f_s: float = 0.1
    smoothing_window_fraction: float = 0.1
    skipped_cells: list[tuple[int, int]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def order(self) -> list[tuple[int | None, int | None]]:
        return [(s.k, s.m) for s in self.stages]

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    def to_dict(self) -> dict:
        doc = {
            "format_version": PLAN_FORMAT_VERSION,
            "strategy": self.strategy,
            "K": self.K,
            "M": self.M,
            "f_s": self.f_s,
            "smoothing_window_fraction": self.smoothing_window_fraction,
            "stages": [s.to_dict() for s in self.stages],
            "skipped_cells": [{"k": k, "m": m} for k, m in self.skipped_cells],
        }
        doc.update(self.extra)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "CurriculumPlan":
        try:
            stages = [Stage(int(s["index"]), s["k"], s["m"], list(s["sample_ids"]), int(s["steps"]),
                            int(s["smoothing_steps"])) for s in doc["stages"]]
            known = {"format_version", "strategy", "K", "M", "f_s", "smoothing_window_fraction",
                     "stages", "skipped_cells"}
            return cls(doc["strategy"], int(doc["K"]), int(doc["M"]), stages, float(doc.get("f_s", 0.1)),
                       float(doc.get("smoothing_window_fraction", 0.1)),
                       [(c["k"], c["m"]) for c in doc.get("skipped_cells", [])],
                       {k: v for k, v in doc.items() if k not in known})
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"bad plan document: {exc!r}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CurriculumPlan":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON: {exc}", path=path) from None
        return cls.from_dict(doc)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_plan(assignments: Sequence[CellAssignment], strategy: Strategy, grid: GridSpec, total_steps: int,
               f_s: float = 0.1, smoothing_window_fraction: float = 0.1) -> CurriculumPlan:
    """Stages in strategy order; the step budget is split evenly over nonempty cells.

    Empty cells are skipped (and listed in ``skipped_cells``). Stage 1 never
    smooths; later stages mix in their predecessor for the first
    ``round(smoothing_window_fraction * steps)`` steps.
    """
    if not 0.0 <= f_s <= 1.0:
        raise ConfigError(f"f_s must be in [0, 1], got {f_s}")
    if not 0.0 <= smoothing_window_fraction <= 1.0:
        raise ConfigError(f"smoothing window fraction must be in [0, 1], got {smoothing_window_fraction}")
    members: dict[tuple[int, int], list[str]] = {}
    for a in assignments:
        if not (1 <= a.k <= grid.K and 1 <= a.m <= grid.M):
            raise InvalidInputError(f"assignment {a} outside grid {grid}")
        members.setdefault((a.k, a.m), []).append(a.sample_id)
    order = curriculum_order(strategy, grid)
    nonempty = [c for c in order if members.get(c)]
    skipped = [c for c in order if not members.get(c)]
    for k, m in skipped:
        log.warning("curriculum cell (%d, %d) is empty; stage skipped", k, m)
    if not nonempty:
        raise ConfigError("no samples to plan over")
    if total_steps < len(nonempty):
        raise ConfigError(f"total_steps={total_steps} is less than the {len(nonempty)} nonempty stages")
    stages = []
    for t, ((k, m), steps) in enumerate(zip(nonempty, group_sizes(total_steps, len(nonempty))), 1):
        window = 0 if t == 1 else _round_half_up(smoothing_window_fraction * steps)
        stages.append(Stage(t, k, m, members[(k, m)], steps, window))
    return CurriculumPlan(Strategy(strategy).value, grid.K, grid.M, stages, f_s, smoothing_window_fraction,
                          skipped)


def single_stage_plan(sample_ids: Sequence[str], total_steps: int, label: str = "pooled") -> CurriculumPlan:
    """One unordered stage over every sample (the non-curriculum baselines)."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    return CurriculumPlan(label, 1, 1, [Stage(1, None, None, list(sample_ids), total_steps, 0)], 0.0, 0.0)


def select_batch_source(plan: CurriculumPlan, t: int, i: int, rng: np.random.Generator,
                        batch_size: int = 1) -> np.ndarray:
    """Stage index (t or t - 1, 1-based) each batch element is drawn from at step i of stage t."""
    stage = plan.stages[t - 1]
    if t == 1 or i > stage.smoothing_steps:
        return np.full(batch_size, t, dtype=np.int64)
    from_prev = rng.random(batch_size) < plan.f_s
    return np.where(from_prev, t - 1, t).astype(np.int64)


class CellSampler:
    """Draws sample ids from each stage without replacement, reshuffling when exhausted."""

    def __init__(self, plan: CurriculumPlan, rng: np.random.Generator):
        self.plan = plan
        self.rng = rng
        self._queues: dict[int, list[str]] = {}

    def draw(self, stage_index: int) -> str:
        q = self._queues.get(stage_index)
        if not q:
            ids = self.plan.stages[stage_index - 1].sample_ids
            q = [ids[j] for j in self.rng.permutation(len(ids))]
            q.reverse()
            self._queues[stage_index] = q
        return q.pop()

    def batch(self, t: int, i: int, batch_size: int) -> list[str]:
        sources = select_batch_source(self.plan, t, i, self.rng, batch_size)
        return [self.draw(int(s)) for s in sources]
