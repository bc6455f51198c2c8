"""Prompt complexity (perplexity spread of sampled responses) and pairwise distinguishability."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from . import toylm
from .data import PreferenceSample
from .errors import DataValidationError, InvalidInputError
from .seeding import mix

DEFAULT_N = 10


@dataclass
class ScoredSample:
    sample: PreferenceSample
    pc: float
    pd: float
    n_samples_used: int

    @property
    def pair_id(self) -> str:
        return self.sample.pair_id


def sample_std(values: Sequence[float]) -> float:
    """Sample standard deviation (n - 1 denominator), two-pass on values shifted by the first.

    The shift makes a constant input give exactly 0.
    """
    n = len(values)
    if n < 2:
        raise InvalidInputError(f"sample standard deviation needs >= 2 values, got {n}")
    shifted = [v - values[0] for v in values]
    mean = math.fsum(shifted) / n
    return math.sqrt(math.fsum((v - mean) ** 2 for v in shifted) / (n - 1))


def sample_seed(base_seed: int, prompt_id: str, i: int) -> int:
    """Seed of the i-th PC sample of a prompt; independent of scoring order and worker count."""
    return mix(base_seed, prompt_id, i)


def sampled_perplexities(ref_model, scorer, prompt, N: int, base_seed: int, prompt_id: str = "",
                         max_len: int = toylm.DEFAULT_MAX_LEN) -> list[float]:
    """Perplexities under ``scorer`` of N responses drawn from ``ref_model``."""
    out = []
    for i in range(N):
        y = toylm.sample(ref_model, prompt, max_len, seed=sample_seed(base_seed, prompt_id, i))
        out.append(toylm.perplexity(scorer, prompt, y))
    return out


def prompt_complexity(ref_model, scorer, prompt, N: int = DEFAULT_N, base_seed: int = 0, prompt_id: str = "",
                      max_len: int = toylm.DEFAULT_MAX_LEN) -> float:
    if N < 2:
        raise InvalidInputError(f"N must be >= 2 for a sample standard deviation, got {N}")
    return sample_std(sampled_perplexities(ref_model, scorer, prompt, N, base_seed, prompt_id, max_len))


def pairwise_distinguishability(score_w: float, score_l: float) -> float:
    if score_w is None or score_l is None or not (math.isfinite(score_w) and math.isfinite(score_l)):
        raise InvalidInputError(f"judge scores must be finite, got {score_w!r}, {score_l!r}")
    return abs(score_w - score_l)


def score_dataset(dataset: Sequence[PreferenceSample], ref_model, scorer, N: int = DEFAULT_N,
                  base_seed: int = 0, workers: int = 1,
                  max_len: int = toylm.DEFAULT_MAX_LEN) -> list[ScoredSample]:
    """PC once per unique prompt, PD per pair; output order follows input order.

    Results do not depend on ``workers``: each prompt's seeds come from
    ``base_seed`` and its ``prompt_id`` only (see :func:`sample_seed`).
    """
    if N < 2:
        raise InvalidInputError(f"N must be >= 2, got {N}")
    prompts: dict[str, tuple[int, ...]] = {}
    for s in dataset:
        if s.score_w is None or s.score_l is None:
            raise DataValidationError(f"sample {s.pair_id!r} is missing a judge score")
        known = prompts.setdefault(s.prompt_id, s.prompt)
        if known != s.prompt:
            raise DataValidationError(f"prompt_id {s.prompt_id!r} maps to different prompt tokens")

    def one(pid):
        return pid, prompt_complexity(ref_model, scorer, prompts[pid], N, base_seed, pid, max_len)

    if workers > 1 and len(prompts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pc = dict(pool.map(one, prompts))
    else:
        pc = dict(map(one, prompts))

    return [ScoredSample(s, pc[s.prompt_id], pairwise_distinguishability(s.score_w, s.score_l), N)
            for s in dataset]
