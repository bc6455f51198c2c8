"""Preference datasets: JSONL I/O, anchored pair derivation and a synthetic generator."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, DataValidationError
from .toylm import Vocab, tokenize

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class Response:
    text: str
    judge_score: float
    rank: int


@dataclass
class RawRecord:
    prompt_id: str
    prompt: str
    responses: list[Response]

    def validate(self) -> None:
        ranks = sorted(r.rank for r in self.responses)
        if ranks != list(range(1, len(self.responses) + 1)):
            raise DataValidationError(
                f"record {self.prompt_id!r}: ranks {ranks} are not a permutation of 1..{len(ranks)}")
        for r in self.responses:
            if not isinstance(r.judge_score, (int, float)) or not math.isfinite(r.judge_score):
                raise DataValidationError(
                    f"record {self.prompt_id!r}: judge score {r.judge_score!r} is not a finite number")

    def ranked(self) -> list[Response]:
        return sorted(self.responses, key=lambda r: r.rank)

    def to_dict(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "prompt": self.prompt,
            "responses": [{"text": r.text, "judge_score": r.judge_score, "rank": r.rank}
                          for r in self.responses],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RawRecord":
        if not isinstance(obj, dict):
            raise DataValidationError(f"expected a JSON object, got {type(obj).__name__}")
        pid = obj.get("prompt_id")
        if not isinstance(pid, str):
            raise DataValidationError(f"record has no string prompt_id: {str(obj)[:80]}")
        if not isinstance(obj.get("prompt"), str):
            raise DataValidationError(f"record {pid!r}: missing prompt text")
        responses = obj.get("responses")
        if not isinstance(responses, list):
            raise DataValidationError(f"record {pid!r}: responses must be a list")
        out = []
        for r in responses:
            try:
                score = r["judge_score"]
                rank = r["rank"]
                text = r["text"]
            except (KeyError, TypeError):
                raise DataValidationError(f"record {pid!r}: response missing text/judge_score/rank") from None
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                raise DataValidationError(f"record {pid!r}: judge_score must be a number, got {score!r}")
            if isinstance(rank, bool) or not isinstance(rank, int):
                raise DataValidationError(f"record {pid!r}: rank must be an integer, got {rank!r}")
            out.append(Response(str(text), float(score), rank))
        rec = cls(pid, obj["prompt"], out)
        rec.validate()
        return rec


@dataclass
class PreferenceSample:
    """One (prompt, chosen, rejected) pair. Chosen/rejected follow ranks, not scores."""

    pair_id: str
    prompt_id: str
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]
    score_w: float | None
    score_l: float | None
    # rank of the rejected response (the j of the pair (R_1, R_j))
    rejected_rank: int = 0


# --- JSONL ---------------------------------------------------------------------


def iter_jsonl(path):
    """Yield ``(line_number, obj)``; skips blank lines and the format header."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"malformed JSON ({exc.msg})", path=path, line=lineno) from None
            if isinstance(obj, dict) and set(obj) == {"format_version"}:
                if obj["format_version"] != FORMAT_VERSION:
                    raise DataFormatError(f"unsupported format_version {obj['format_version']}",
                                          path=path, line=lineno)
                continue
            yield lineno, obj


def load_jsonl(path) -> list[RawRecord]:
    records = []
    seen = set()
    for lineno, obj in iter_jsonl(path):
        try:
            rec = RawRecord.from_dict(obj)
        except DataValidationError as exc:
            raise DataValidationError(f"{path}:{lineno}: {exc}") from None
        if rec.prompt_id in seen:
            raise DataValidationError(f"{path}:{lineno}: duplicate prompt_id {rec.prompt_id!r}")
        seen.add(rec.prompt_id)
        records.append(rec)
    return records


def save_jsonl(records: Sequence[RawRecord], path, extra: Sequence[dict] | None = None) -> None:
    """Write records with a ``format_version`` header; ``extra[i]`` is merged into record i."""
    lines = [json.dumps({"format_version": FORMAT_VERSION})]
    for i, rec in enumerate(records):
        obj = rec.to_dict()
        if extra is not None:
            obj.update(extra[i])
        lines.append(json.dumps(obj))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- pairs -----------------------------------------------------------------------


def derive_anchored_pairs(record: RawRecord, vocab: Vocab, max_pairs: int = 3) -> list[PreferenceSample]:
    """Pairs (R_1, R_j) for j from the worst rank upward, at most ``max_pairs``."""
    ranked = record.ranked()
    if len(ranked) < 2:
        log.warning("record %r has fewer than 2 responses; no pairs derived", record.prompt_id)
        return []
    prompt = tokenize(record.prompt, vocab, role="prompt")
    best = ranked[0]
    chosen = tokenize(best.text, vocab)
    out = []
    for j in range(len(ranked), 1, -1):
        if len(out) >= max_pairs:
            break
        worse = ranked[j - 1]
        out.append(PreferenceSample(
            pair_id=f"{record.prompt_id}#{j}",
            prompt_id=record.prompt_id,
            prompt=prompt,
            chosen=chosen,
            rejected=tokenize(worse.text, vocab),
            score_w=best.judge_score,
            score_l=worse.judge_score,
            rejected_rank=j,
        ))
    return out


def derive_all_pairs(records: Sequence[RawRecord], vocab: Vocab, max_pairs: int = 3) -> list[PreferenceSample]:
    return [p for rec in records for p in derive_anchored_pairs(rec, vocab, max_pairs)]


def vocab_from_records(records: Sequence[RawRecord]) -> Vocab:
    words = []
    for rec in records:
        words.extend(rec.prompt.split())
        for r in rec.responses:
            words.extend(r.text.split())
    return Vocab.from_words(words)


# --- synthetic generator ------------------------------------------------------------


@dataclass
class PromptClass:
    class_id: str
    # Temperature applied to the class's response-generating chain; higher = more entropy.
    entropy: float
    count: int


@dataclass
class SyntheticConfig:
    classes: list[PromptClass] = field(default_factory=lambda: [
        PromptClass("low", 0.25, 50), PromptClass("high", 4.0, 50)])
    # {"kind": "uniform", "low": a, "high": b} or {"kind": "point", "value": v}
    gap: dict = field(default_factory=lambda: {"kind": "uniform", "low": 0.25, "high": 3.0})
    n_content: int = 16
    n_bad: int = 4
    n_topics: int = 8
    prompt_topics: int = 2
    max_response_len: int = 6
    responses_per_prompt: int = 4
    top_score: float = 9.0
    # Probability per unit score deficit that a response token is replaced by a "bad" token.
    corruption_per_point: float = 0.12
    seed: int = 0

    def validate(self) -> None:
        if not self.classes:
            raise ConfigError("synthetic config needs at least one prompt class")
        for c in self.classes:
            if not (c.entropy > 0 and c.count > 0):
                raise ConfigError(f"class {c.class_id!r}: entropy and count must be positive")
        if len({c.class_id for c in self.classes}) != len(self.classes):
            raise ConfigError("class ids must be unique")
        kind = self.gap.get("kind")
        if kind == "point":
            if not (self.gap.get("value", -1) >= 0):
                raise ConfigError("point gap distribution needs a nonnegative 'value'")
        elif kind == "uniform":
            if not (0 <= self.gap.get("low", -1) <= self.gap.get("high", -1)):
                raise ConfigError("uniform gap distribution needs 0 <= low <= high")
        else:
            raise ConfigError(f"unknown gap distribution kind {kind!r}")
        if min(self.n_content, self.n_topics, self.max_response_len, self.prompt_topics) < 1:
            raise ConfigError("token counts and lengths must be positive")
        if not 0 <= self.n_bad < self.n_content:
            raise ConfigError("n_bad must be in [0, n_content)")
        if self.responses_per_prompt < 2:
            raise ConfigError("need at least 2 responses per prompt")

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticConfig":
        obj = dict(obj)
        if "classes" in obj:
            obj["classes"] = [PromptClass(**c) for c in obj["classes"]]
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic config: {exc}") from None


def synthetic_vocab(config: SyntheticConfig) -> Vocab:
    words = [f"c{i}" for i in range(config.n_content - config.n_bad)]
    words += [f"bad{i}" for i in range(config.n_bad)]
    words += [f"topic{i}" for i in range(config.n_topics)]
    words += [f"cls_{c.class_id}" for c in config.classes]
    return Vocab(["<bos>", "<eos>", "<unk>", *words])


def _draw_gap(gap: dict, rng: np.random.Generator) -> float:
    if gap["kind"] == "point":
        return float(gap["value"])
    return float(rng.uniform(gap["low"], gap["high"]))


def generate_synthetic(config: SyntheticConfig) -> tuple[list[RawRecord], list[dict]]:
    """Seeded prompts whose response distribution entropy follows the class knob.

    Each class owns a first-order chain over the good content tokens (shared
    logits, class temperature). A prompt's responses are drawn from that chain;
    response ``r`` then has each token swapped for a bad token with probability
    ``corruption_per_point * (top_score - score_r)``, so lower-ranked answers
    are visibly worse. Scores descend from ``top_score`` by gaps from the gap
    distribution. Returns the records and a per-prompt label list.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_good = config.n_content - config.n_bad
    good = [f"c{i}" for i in range(n_good)]
    bad = [f"bad{i}" for i in range(config.n_bad)]
    # +1 column: stop symbol. Logits shared by all classes; temperature differs.
    base_logits = rng.normal(0.0, 1.0, size=(n_good + 1, n_good + 1))
    base_logits[:, -1] -= 1.0

    records, labels = [], []
    for cls in config.classes:
        probs = np.exp(base_logits / cls.entropy)
        probs /= probs.sum(axis=1, keepdims=True)
        for p_idx in range(cls.count):
            pid = f"{cls.class_id}-{p_idx:04d}"
            topics = rng.choice(config.n_topics, size=config.prompt_topics, replace=False)
            prompt = " ".join([f"cls_{cls.class_id}", *(f"topic{t}" for t in sorted(topics))])
            gaps = [_draw_gap(config.gap, rng) for _ in range(config.responses_per_prompt - 1)]
            scores = [config.top_score]
            for g in gaps:
                scores.append(scores[-1] - g)
            responses = []
            for rank, score in enumerate(scores, 1):
                words = []
                state = n_good  # start-of-response row
                for _ in range(config.max_response_len):
                    nxt = int(rng.choice(n_good + 1, p=probs[state]))
                    if nxt == n_good:
                        break
                    words.append(good[nxt])
                    state = nxt
                p_bad = min(1.0, config.corruption_per_point * (config.top_score - score)) if bad else 0.0
                for i in range(len(words)):
                    if rng.random() < p_bad:
                        words[i] = bad[int(rng.integers(len(bad)))]
                responses.append(Response(" ".join(words), score, rank))
            records.append(RawRecord(pid, prompt, responses))
            labels.append({"prompt_id": pid, "class_id": cls.class_id, "entropy": cls.entropy,
                           "gaps": gaps, "scores": [r.judge_score for r in responses]})
    return records, labels


# --- scored JSONL ---------------------------------------------------------------------


def save_scored_jsonl(records: Sequence[RawRecord], scored, path) -> None:
    """Records plus ``pc`` and a ``pairs`` array of ``{pair_id, rejected_rank, pd}``."""
    by_prompt: dict[str, list] = {}
    for s in scored:
        by_prompt.setdefault(s.sample.prompt_id, []).append(s)
    extra = []
    for rec in records:
        items = by_prompt.get(rec.prompt_id, [])
        obj = {"pairs": [{"pair_id": s.sample.pair_id, "rejected_rank": s.sample.rejected_rank, "pd": s.pd}
                         for s in items]}
        if items:
            obj["pc"] = items[0].pc
        extra.append(obj)
    save_jsonl(records, path, extra)


def load_scored_jsonl(path) -> tuple[list[RawRecord], dict[str, float], dict[str, float]]:
    """Returns records, PC by prompt_id and PD by pair_id (both empty for a raw file)."""
    records = load_jsonl(path)
    pcs: dict[str, float] = {}
    pds: dict[str, float] = {}
    for lineno, obj in iter_jsonl(path):
        pid = obj["prompt_id"]
        if "pc" in obj:
            pc = obj["pc"]
            if not isinstance(pc, (int, float)) or not math.isfinite(pc) or pc < 0:
                raise DataValidationError(f"{path}:{lineno}: record {pid!r} has invalid pc {pc!r}")
            pcs[pid] = float(pc)
        for pair in obj.get("pairs", []):
            try:
                pds[pair["pair_id"]] = float(pair["pd"])
            except (KeyError, TypeError, ValueError):
                raise DataValidationError(f"{path}:{lineno}: record {pid!r} has a malformed pair entry") from None
    return records, pcs, pds
