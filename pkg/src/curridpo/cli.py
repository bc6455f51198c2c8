"""Command-line entry point: ``curridpo {gen,score,plan,train,eval,report}``.

Every run knob can come from ``--config FILE`` (YAML or JSON mapping); flags
given on the command line override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import data, toylm
from .errors import ConfigError, CurriDPOError
from .harness import runner
from .harness.evaluation import emit_report, load_report
from .harness.metrics import read_metrics

log = logging.getLogger("curridpo")

S = argparse.SUPPRESS


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return doc


def _run_config(args: argparse.Namespace, **forced) -> runner.RunConfig:
    doc = _load_config_file(getattr(args, "config", None))
    doc.pop("synthetic", None)
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose", "func", "run", "model", "runs"):
            continue
        doc[key] = value
    doc.update(forced)
    return runner.RunConfig.from_dict(doc)


def _add_run_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", metavar="FILE", help="YAML/JSON file of run settings")
    p.add_argument("--data", default=S, metavar="FILE", help="raw or scored dataset JSONL")
    p.add_argument("--vocab", default=S, metavar="FILE")
    p.add_argument("--sft-model", dest="sft_model", default=S, metavar="FILE",
                   help="reuse a fitted SFT model instead of fitting one")
    p.add_argument("--out", default=S, metavar="DIR")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--mode", choices=runner.MODES, default=S)
    p.add_argument("--n-pc-samples", dest="n_pc_samples", type=int, default=S)
    p.add_argument("--workers", type=int, default=S, help="threads for PC scoring")
    p.add_argument("--overwrite", action="store_true", default=S)
    if not training:
        return
    p.add_argument("--strategy", choices=["pc-first", "pd-first", "s-pc", "s-pd"], default=S)
    p.add_argument("--grid", default=S, metavar="KxM")
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--fs", type=float, default=S, help="previous-cell mixing probability")
    p.add_argument("--smooth-window", dest="smooth_window", type=float, default=S,
                   help="smoothing window as a fraction of each stage")
    p.add_argument("--plan", default=S, metavar="FILE", help="use an existing plan.json")
    p.add_argument("--beta", type=float, default=S)
    p.add_argument("--delta", type=float, default=S, help="KL threshold; 'inf' disables updates")
    p.add_argument("--fkl", type=int, default=S, help="steps between KL checks")
    p.add_argument("--bkl", type=int, default=S, help="batches per KL estimate")
    p.add_argument("--batch", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--ref-update", dest="ref_update", choices=runner.REF_UPDATES, default=S)
    p.add_argument("--kl-per-stage", dest="kl_per_stage", action="store_true", default=S)
    p.add_argument("--wall-time", dest="wall_time", action="store_true", default=S,
                   help="record wall_ms (makes metrics.csv non-reproducible)")


# --- subcommands ---------------------------------------------------------------------


def cmd_gen(args) -> int:
    doc = _load_config_file(args.config).get("synthetic", {})
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = data.SyntheticConfig.from_dict(doc)
    records, labels = data.generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_jsonl(records, out / "dataset.jsonl")
    (out / "labels.json").write_text(json.dumps(labels, indent=1) + "\n", encoding="utf-8")
    data.synthetic_vocab(cfg).save(out / "vocab.txt")
    print(f"wrote {len(records)} records to {out / 'dataset.jsonl'}")
    return 0


def cmd_score(args) -> int:
    config = _run_config(args)
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    prep = runner.prepare(config)
    data.save_scored_jsonl(prep.records, prep.scored, out / "scored.jsonl")
    toylm.save_model(prep.sft, out / "sft_model.json")
    toylm.save_model(prep.scorer, out / "scorer.json")
    prep.vocab.save(out / "vocab.txt")
    print(f"scored {len(prep.scored)} pairs over {len(prep.records)} prompts -> {out / 'scored.jsonl'}")
    return 0


def cmd_plan(args) -> int:
    config = _run_config(args)
    config.validate()
    prep = runner.prepare(config)
    plan = runner.make_plan(config, prep)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "plan.json")
    for st in plan.stages:
        print(f"stage {st.index}: cell=({st.k},{st.m}) pairs={len(st.sample_ids)} steps={st.steps}")
    return 0


def cmd_train(args) -> int:
    config = _run_config(args)
    result = runner.run_curriculum(config)
    rep = result.report
    print(f"run complete: {result.out_dir}")
    print(f"reference updates: {len(result.reference_updates)}")
    print(f"adjusted win rate vs SFT: {rep.adjusted_win_rate:.4f} ({rep.wins}W/{rep.ties}T/{rep.losses}L)")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    if not (run / "run_config.json").is_file():
        raise ConfigError(f"{run} is not a run directory (no run_config.json)")
    doc = json.loads((run / "run_config.json").read_text(encoding="utf-8"))
    doc.update(data=str(run / "scored.jsonl"), vocab=str(run / "vocab.txt"),
               sft_model=str(run / "sft_model.json"), plan=str(run / "plan.json"), out=None)
    config = runner.RunConfig.from_dict(doc)
    config.validate(need_out=False)
    prep = runner.prepare(config)
    plan = runner.CurriculumPlan.load(config.plan)
    model = toylm.load_model(args.model or run / "final_model.json")
    val_ids = set(plan.extra.get("val_ids") or [s.pair_id for s in prep.val])
    report = runner.evaluate(model, prep.sft, plan, [s for s in prep.scored if s.pair_id in val_ids], config.beta)
    if args.out:
        emit_report(report, args.out)
    _print_report(report)
    return 0


def _print_report(rep) -> None:
    print(f"pairs={rep.total} wins={rep.wins} ties={rep.ties} losses={rep.losses} "
          f"adjusted_win_rate={rep.adjusted_win_rate:.4f}")
    print("per-cell adjusted win rate (rows k = PC rank, columns m = PD rank):")
    for k, row in enumerate(rep.table(), 1):
        print(f"  k={k}  " + "  ".join("  -  " if v is None else f"{v:.3f}" for v in row))


def _summary(run: Path) -> dict:
    metrics = read_metrics(run / "metrics.csv")
    if not metrics:
        raise ConfigError(f"{run / 'metrics.csv'} has no rows")
    vals = [r.val_loss for r in metrics if r.val_loss is not None]
    out = {
        "steps": len(metrics),
        "stages": len({r.stage for r in metrics}),
        "initial_val_loss": vals[0] if vals else None,
        "final_val_loss": vals[-1] if vals else None,
        "final_train_loss": metrics[-1].train_loss,
        "ref_updates": sum(r.ref_updated for r in metrics),
    }
    if (run / "report.json").is_file():
        out["adjusted_win_rate"] = load_report(run / "report.json").adjusted_win_rate
    return out


def cmd_report(args) -> int:
    runs = [Path(r) for r in args.runs]
    for r in runs:
        if not (r / "metrics.csv").is_file():
            raise ConfigError(f"{r} has no metrics.csv")
    summaries = [_summary(r) for r in runs]
    width = max(len(k) for k in summaries[0])
    print(f"{'':{width}}  " + "  ".join(f"{str(r):>20}" for r in runs))
    for key in summaries[0]:
        cells = []
        for s in summaries:
            v = s.get(key)
            cells.append(f"{'-' if v is None else (f'{v:.6g}' if isinstance(v, float) else v):>20}")
        print(f"{key:{width}}  " + "  ".join(cells))
    if len(runs) == 1 and (runs[0] / "report.json").is_file():
        _print_report(load_report(runs[0] / "report.json"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curridpo", description="Two-dimensional curriculum DPO toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic preference dataset")
    p.add_argument("--config", metavar="FILE", help="file with a 'synthetic' section")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("score", help="fit SFT model and scorer, compute PC and PD")
    _add_run_flags(p, training=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("plan", help="bin scored pairs and write the stage plan")
    _add_run_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="full run: score, plan, train, evaluate")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a run directory")
    p.add_argument("--run", required=True, metavar="DIR")
    p.add_argument("--model", metavar="FILE", help="model to evaluate (default: final_model.json)")
    p.add_argument("--out", metavar="FILE", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize one run or compare two")
    p.add_argument("runs", nargs="+", metavar="RUN")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report" and len(args.runs) > 2:
        parser.error("report takes one or two run directories")
    try:
        return args.func(args)
    except CurriDPOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
