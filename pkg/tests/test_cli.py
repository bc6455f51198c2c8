import json

import pytest

from curridpo.cli import main
from curridpo.harness import read_metrics


def test_gen_score_plan_train_eval_report(tmp_path, capsys):
    g, s, p, r = (str(tmp_path / d) for d in ("gen", "score", "plan", "run"))
    assert main(["gen", "--out", g]) == 0
    assert main(["score", "--data", f"{g}/dataset.jsonl", "--vocab", f"{g}/vocab.txt", "--out", s]) == 0
    assert main(["plan", "--data", f"{s}/scored.jsonl", "--sft-model", f"{s}/sft_model.json",
                 "--vocab", f"{s}/vocab.txt", "--steps", "45", "--grid", "3x3", "--strategy", "pc-first",
                 "--out", p]) == 0
    plan = json.loads((tmp_path / "plan" / "plan.json").read_text())
    assert plan["strategy"] == "pc-first" and sum(st["steps"] for st in plan["stages"]) == 45
    assert main(["train", "--data", f"{s}/scored.jsonl", "--sft-model", f"{s}/sft_model.json",
                 "--vocab", f"{s}/vocab.txt", "--plan", f"{p}/plan.json", "--out", r, "--batch", "4",
                 "--fkl", "15", "--bkl", "2", "--beta", "0.2", "--delta", "0.1", "--fs", "0.2",
                 "--smooth-window", "0.2", "--n-pc-samples", "10", "--seed", "3", "--mode", "2d"]) == 0
    assert len(read_metrics(tmp_path / "run" / "metrics.csv")) == 45
    assert main(["eval", "--run", r]) == 0
    out = capsys.readouterr().out
    assert "adjusted_win_rate=" in out
    assert main(["report", r, r]) == 0
    assert "final_val_loss" in capsys.readouterr().out


def test_config_file_and_flag_override(tmp_path, synthetic_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(f"data: {synthetic_path}\nsteps: 30\nbatch: 4\nmode: pooled\nfkl: 10\n")
    assert main(["train", "--config", str(cfg), "--steps", "12", "--out", str(tmp_path / "run")]) == 0
    rows = read_metrics(tmp_path / "run" / "metrics.csv")
    assert len(rows) == 12 and {r.stage for r in rows} == {1}
    saved = json.loads((tmp_path / "run" / "run_config.json").read_text())
    assert saved["batch"] == 4 and saved["mode"] == "pooled"


def test_exit_codes(tmp_path, synthetic_path):
    assert main(["train", "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "a")]) == 2
    assert main(["train", "--data", str(synthetic_path), "--grid", "3by3", "--out", str(tmp_path / "b")]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format_version": 1}\n{"prompt_id": "x", "prompt": "a", "responses": 3}\n')
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "c")]) == 3
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("- not\n- a mapping\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert main(["report", str(tmp_path / "nowhere")]) == 2


def test_gen_config_section(tmp_path):
    cfg = tmp_path / "g.yaml"
    cfg.write_text("synthetic:\n  classes:\n    - {class_id: a, entropy: 1.0, count: 3}\n  seed: 4\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    assert len(json.loads((tmp_path / "g" / "labels.json").read_text())) == 3


def test_argparse_rejects_bad_choice(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["train", "--strategy", "zigzag", "--out", str(tmp_path)])
    assert err.value.code == 2
