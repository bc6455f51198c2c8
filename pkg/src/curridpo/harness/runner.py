"""End-to-end runs: score -> bin -> order, then staged DPO with KL-triggered reference updates."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import curriculum, data, difficulty, dpo, toylm
from ..curriculum import CellSampler, CurriculumPlan, GridSpec, Strategy
from ..errors import ConfigError, DataValidationError
from ..seeding import mix, unit_interval
from .evaluation import EvalReport, build_report, emit_report, implicit_reward_margins
from .metrics import MetricsRecord, emit_metrics

log = logging.getLogger(__name__)

MODES = ("2d", "pooled", "std", "1d-pc", "1d-pd")
REF_UPDATES = ("kl", "fixed", "stage")
INCOMPLETE_MARKER = "RUN_INCOMPLETE"


@dataclass
class RunConfig:
    data: str | None = None
    out: str | None = None
    vocab: str | None = None
    plan: str | None = None
    sft_model: str | None = None
    mode: str = "2d"
    strategy: str = "s-pd"
    grid: str = "3x3"
    beta: float = 0.1
    delta: float = 0.05
    fkl: int = 50
    bkl: int = 4
    kl_samples_per_prompt: int = 1
    kl_max_len: int = toylm.DEFAULT_MAX_LEN
    # KL check counter: global step (False) or step within the stage (True)
    kl_per_stage: bool = False
    ref_update: str = "kl"
    fs: float = 0.1
    smooth_window: float = 0.1
    steps: int = 900
    batch: int = 16
    lr: float = 1e-2
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    n_pc_samples: int = difficulty.DEFAULT_N
    sample_max_len: int = toylm.DEFAULT_MAX_LEN
    max_pairs: int = 3
    val_fraction: float = 0.1
    sft_epochs: int = 30
    sft_lr: float = 0.05
    sft_dim: int = 8
    scorer_alpha: float = 0.5
    seed: int = 0
    workers: int = 1
    wall_time: bool = False
    overwrite: bool = False

    def validate(self, need_out: bool = True) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        try:
            Strategy(self.strategy)
        except ValueError:
            raise ConfigError(f"strategy must be one of {[s.value for s in Strategy]}, got {self.strategy!r}") from None
        if self.ref_update not in REF_UPDATES:
            raise ConfigError(f"ref_update must be one of {REF_UPDATES}, got {self.ref_update!r}")
        self.grid_spec()
        self.dpo_config()
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1")
        if self.n_pc_samples < 2:
            raise ConfigError("n_pc_samples must be >= 2")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")
        if not 0 <= self.fs <= 1 or not 0 <= self.smooth_window <= 1:
            raise ConfigError("fs and smooth_window must be in [0, 1]")
        if self.max_pairs < 1:
            raise ConfigError("max_pairs must be >= 1")
        if self.data is None:
            raise ConfigError("no dataset given")
        for name in ("data", "vocab", "plan", "sft_model"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name} file {path} does not exist")
        if need_out and self.out is None:
            raise ConfigError("no output directory given")

    def grid_spec(self) -> GridSpec:
        return GridSpec.parse(self.grid)

    def dpo_config(self) -> dpo.DpoConfig:
        return dpo.DpoConfig(beta=self.beta, delta=self.delta, kl_interval=self.fkl, kl_batches=self.bkl,
                             kl_samples_per_prompt=self.kl_samples_per_prompt, kl_max_len=self.kl_max_len,
                             lr=self.lr, warmup_fraction=self.warmup_fraction, weight_decay=self.weight_decay)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        clean = {}
        for key, value in obj.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            clean[key] = value
        if isinstance(clean.get("delta"), str):
            clean["delta"] = float(clean["delta"])
        return cls(**clean)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        if math.isinf(doc["delta"]):
            doc["delta"] = "inf"
        return doc


@dataclass
class Prepared:
    vocab: toylm.Vocab
    records: list
    pairs: list
    sft: toylm.NeuralLM
    scorer: toylm.BigramLM
    scored: list
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)


@dataclass
class RunResult:
    model: toylm.NeuralLM
    metrics: list[MetricsRecord]
    plan: CurriculumPlan
    report: EvalReport
    out_dir: Path
    reference_updates: list[int]


def sft_corpus(records, vocab) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Top-ranked response of every record."""
    return [(toylm.tokenize(rec.prompt, vocab, "prompt"), toylm.tokenize(rec.ranked()[0].text, vocab))
            for rec in records]


def split_validation(scored, fraction: float) -> tuple[list, list]:
    """Hold out pairs whose hashed id falls below ``fraction``; always keeps both sides nonempty."""
    val = [s for s in scored if unit_interval(s.pair_id, "val:") < fraction]
    if not val and len(scored) > 1:
        val = [min(scored, key=lambda s: unit_interval(s.pair_id, "val:"))]
    val_ids = {s.pair_id for s in val}
    train = [s for s in scored if s.pair_id not in val_ids]
    if not train:
        raise DataValidationError("dataset too small: no training pairs left after the validation split")
    return train, val


def prepare(config: RunConfig) -> Prepared:
    """Load data, obtain the SFT model and scorer, and compute PC/PD for every pair."""
    records, pcs, pds = data.load_scored_jsonl(config.data)
    if not records:
        raise DataValidationError(f"{config.data} contains no records")
    vocab = toylm.Vocab.load(config.vocab) if config.vocab else data.vocab_from_records(records)
    max_pairs = 1 if config.mode == "std" else config.max_pairs
    pairs = data.derive_all_pairs(records, vocab, max_pairs)
    if not pairs:
        raise DataValidationError("no preference pairs could be derived")
    corpus = sft_corpus(records, vocab)
    if config.sft_model:
        sft = toylm.load_model(config.sft_model)
        if not isinstance(sft, toylm.NeuralLM) or sft.vocab_size != len(vocab):
            raise ConfigError(f"SFT model {config.sft_model} does not match the vocabulary")
    else:
        log.info("fitting SFT model on %d sequences", len(corpus))
        sft = toylm.fit_sft(corpus, config.sft_epochs, config.sft_lr, mix(config.seed, "sft"),
                            dim=config.sft_dim, vocab_size=len(vocab), vocab_hash=vocab.hash)
    scorer = toylm.fit_ngram_scorer(([toylm.BOS, *x, *y] for x, y in corpus), config.scorer_alpha,
                                    vocab_size=len(vocab), vocab_hash=vocab.hash)
    if pcs and all(p.prompt_id in pcs for p in pairs):
        scored = []
        for p in pairs:
            pd = pds.get(p.pair_id)
            if pd is None:
                pd = difficulty.pairwise_distinguishability(p.score_w, p.score_l)
            scored.append(difficulty.ScoredSample(p, pcs[p.prompt_id], pd, config.n_pc_samples))
    else:
        log.info("scoring %d pairs (N=%d)", len(pairs), config.n_pc_samples)
        scored = difficulty.score_dataset(pairs, sft, scorer, config.n_pc_samples, mix(config.seed, "pc"),
                                          config.workers, config.sample_max_len)
    train, val = split_validation(scored, config.val_fraction)
    return Prepared(vocab, records, pairs, sft, scorer, scored, train, val)


def make_plan(config: RunConfig, prep: Prepared) -> CurriculumPlan:
    grid = config.grid_spec()
    if config.mode in ("pooled", "std"):
        plan = curriculum.single_stage_plan([s.pair_id for s in prep.train], config.steps, config.mode)
    else:
        strategy = Strategy(config.strategy)
        if config.mode == "1d-pc":
            grid, strategy = GridSpec(grid.K, 1), Strategy.PC_FIRST
        elif config.mode == "1d-pd":
            grid, strategy = GridSpec(1, grid.M), Strategy.PD_FIRST
        cells = curriculum.assign_cells(prep.train, grid)
        plan = curriculum.build_plan(cells, strategy, grid, config.steps, config.fs, config.smooth_window)
    eval_grid = config.grid_spec()
    plan.extra.update({
        "mode": config.mode,
        "eval_grid": str(eval_grid),
        "pc_edges": curriculum.bin_edges([s.pc for s in prep.train], eval_grid.K, "ascending"),
        "pd_edges": curriculum.bin_edges([s.pd for s in prep.train], eval_grid.M, "descending"),
        "val_ids": [s.pair_id for s in prep.val],
    })
    return plan


def eval_cells(plan: CurriculumPlan, scored) -> list[tuple[int, int]]:
    pc_edges, pd_edges = plan.extra["pc_edges"], plan.extra["pd_edges"]
    return [(curriculum.rank_by_edges(s.pc, pc_edges, "ascending"),
             curriculum.rank_by_edges(s.pd, pd_edges, "descending")) for s in scored]


def evaluate(policy, sft, plan: CurriculumPlan, scored, beta: float) -> EvalReport:
    grid = GridSpec.parse(plan.extra["eval_grid"])
    triples = [(s.sample.prompt, s.sample.chosen, s.sample.rejected) for s in scored]
    margins = implicit_reward_margins(policy, sft, triples, beta)
    return build_report(margins, eval_cells(plan, scored), grid.K, grid.M)


def _triple(s) -> tuple:
    return s.sample.prompt, s.sample.chosen, s.sample.rejected


def _prepare_out_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    if out.exists() and any(out.iterdir()) and not config.overwrite:
        raise ConfigError(f"output directory {out} is not empty (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    return out


def train(config: RunConfig, prep: Prepared, plan: CurriculumPlan, out: Path | None = None):
    """Phase 2. Returns (policy, metrics, reference manager)."""
    cfg = config.dpo_config()
    by_id = {s.pair_id: s for s in prep.scored}
    missing = [sid for st in plan.stages for sid in st.sample_ids if sid not in by_id]
    if missing:
        raise DataValidationError(f"plan references unknown sample ids, e.g. {missing[:3]}")
    val_ids = plan.extra.get("val_ids") or [s.pair_id for s in prep.val]
    val_batch = [_triple(by_id[i]) for i in val_ids]
    policy = prep.sft.copy()
    sft_snap = toylm.take_snapshot(prep.sft)
    manager = dpo.ReferenceManager(sft_snap)
    total = plan.total_steps
    opt_cfg = cfg.optimizer(total)
    opt_state = dpo.OptimizerState.zeros_like(policy.params)
    sampler = CellSampler(plan, np.random.default_rng(mix(config.seed, "batches")))
    # non-curriculum baselines are plain DPO against the fixed SFT reference
    ref_update = "fixed" if config.mode in ("pooled", "std") else config.ref_update
    records: list[MetricsRecord] = []
    step = 0
    for stage in plan.stages:
        log.info("stage %d/%d cell=(%s,%s) steps=%d", stage.index, len(plan.stages), stage.k, stage.m, stage.steps)
        for i in range(1, stage.steps + 1):
            step += 1
            t0 = time.perf_counter()
            batch = [_triple(by_id[sid]) for sid in sampler.batch(stage.index, i, config.batch)]
            loss, grad = dpo.dpo_loss_and_grad(policy, manager.reference, batch, cfg.beta)
            dpo.adamw_step(opt_state, policy.params, grad, opt_cfg)
            val_loss = dpo.dpo_loss(policy, sft_snap, val_batch, cfg.beta) if val_batch else None
            kl = None
            updated = False
            counter = i if config.kl_per_stage else step
            if counter % cfg.kl_interval == 0:
                kl_rng = np.random.default_rng(mix(config.seed, "kl-prompts", step))
                pool = stage.sample_ids
                picks = kl_rng.integers(len(pool), size=cfg.kl_batches * config.batch)
                prompts = [by_id[pool[j]].sample.prompt for j in picks]
                kl = dpo.estimate_kl(policy, manager.reference, prompts, cfg.kl_samples_per_prompt,
                                     cfg.kl_max_len, mix(config.seed, "kl-samples", step))
                if ref_update == "kl":
                    updated = dpo.maybe_update_reference(manager, policy, kl, cfg.delta, step)
            if ref_update == "stage" and i == stage.steps:
                manager.reference = toylm.take_snapshot(policy)
                manager.update_steps.append(step)
                updated = True
            wall = (time.perf_counter() - t0) * 1000.0 if config.wall_time else None
            records.append(MetricsRecord(step, stage.index, stage.k, stage.m, loss, val_loss, kl, updated, wall))
        if out is not None:
            toylm.save_model(policy, out / "checkpoints" / f"stage_{stage.index:02d}.json")
    return policy, records, manager


def run_curriculum(config: RunConfig) -> RunResult:
    """Full run; writes every artifact into ``config.out``."""
    config.validate()
    out = _prepare_out_dir(config)
    marker = out / INCOMPLETE_MARKER
    marker.write_text("run started\n", encoding="utf-8")
    try:
        (out / "run_config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
        prep = prepare(config)
        plan = CurriculumPlan.load(config.plan) if config.plan else make_plan(config, prep)
        plan.save(out / "plan.json")
        toylm.save_model(prep.sft, out / "sft_model.json")
        toylm.save_model(prep.scorer, out / "scorer.json")
        prep.vocab.save(out / "vocab.txt")
        data.save_scored_jsonl(prep.records, prep.scored, out / "scored.jsonl")
        policy, metrics, manager = train(config, prep, plan, out)
        emit_metrics(metrics, out / "metrics.csv")
        toylm.save_model(policy, out / "final_model.json")
        val_ids = set(plan.extra.get("val_ids") or [s.pair_id for s in prep.val])
        report = evaluate(policy, prep.sft, plan, [s for s in prep.scored if s.pair_id in val_ids], config.beta)
        emit_report(report, out / "report.json")
    except BaseException as exc:
        marker.write_text("run failed\n" + "".join(traceback.format_exception(exc)), encoding="utf-8")
        raise
    marker.unlink()
    return RunResult(policy, metrics, plan, report, out, list(manager.update_steps))


def run_baseline(config: RunConfig) -> RunResult:
    """Same pipeline for the non-2D modes; kept separate for call-site clarity."""
    if config.mode == "2d":
        raise ConfigError("run_baseline needs a baseline mode, not '2d'")
    return run_curriculum(config)
