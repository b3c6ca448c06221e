import json

import pytest

from bcq_lab.cli import main

TINY = """\
total_steps = 40
eval_interval = 20
eval_episodes = 2
batch_transitions = 300
value_samples = 5
mc_horizon = 20
batch_size = 16
hidden = 16,16
vae_hidden = 16,16
start_steps = 50
expert_steps = 200
expert_seeds = 0
"""

GRID = """\
env = gridworld:4x3
agent = bcql
scenario = final-buffer
discount = 0.9
total_steps = 2000
eval_interval = 1000
batch_transitions = 200
"""


@pytest.fixture
def cfg(tmp_path):
    def write(text, name="c.txt"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


def test_generate_then_train_from_file(tmp_path, cfg, capsys):
    assert main(["generate-batch", "--config", cfg(TINY), "--out", str(tmp_path / "g")]) == 0
    batch = tmp_path / "g" / "random-behavioral" / "bcq" / "0" / "batch.jsonl"
    assert batch.exists() and "uniform-random" in capsys.readouterr().out
    text = TINY + f"batch_path = {batch}\nagent = bc\n"
    assert main(["train", "--config", cfg(text, "t.txt"), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "random-behavioral" / "bc" / "0" / "metrics.csv").exists()


def test_seed_override(tmp_path, cfg):
    assert main(["train", "--config", cfg(GRID + "seeds = 0,1\n"), "--seed", "7", "--out", str(tmp_path)]) == 0
    assert [p.name for p in (tmp_path / "final-buffer" / "bcql").iterdir()] == ["7"]


def test_expert_then_imitation(tmp_path, cfg):
    expert = tmp_path / "expert.json"
    text = TINY + f"expert_path = {expert}\nscenario = imitation\n"
    assert main(["train", "--expert", "--config", cfg(text), "--out", str(tmp_path)]) == 0
    assert expert.exists()
    assert main(["train", "--config", cfg(text), "--out", str(tmp_path / "r")]) == 0


def test_missing_expert_exit_code(tmp_path, cfg, capsys):
    text = TINY + f"expert_path = {tmp_path / 'nope.json'}\nscenario = imperfect\n"
    assert main(["train", "--config", cfg(text), "--out", str(tmp_path)]) == 2
    assert "train --expert" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, cfg, capsys):
    assert main(["train", "--config", cfg("colour = blue\n"), "--out", str(tmp_path)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_evaluate_checkpoints(tmp_path, cfg, capsys):
    main(["train", "--config", cfg(TINY), "--out", str(tmp_path)])
    ckpt = tmp_path / "random-behavioral" / "bcq" / "0" / "checkpoint.json"
    assert main(["evaluate", "--config", cfg(TINY), "--checkpoint", str(ckpt), "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "evaluation.json").read_text())["episodes"] == 2
    main(["train", "--config", cfg(GRID, "g.txt"), "--out", str(tmp_path / "grid")])
    ckpt = tmp_path / "grid" / "final-buffer" / "bcql" / "0" / "checkpoint.json"
    capsys.readouterr()
    assert main(["evaluate", "--config", cfg(GRID, "g.txt"), "--checkpoint", str(ckpt)]) == 0
    assert "return_mean" in capsys.readouterr().out


@pytest.mark.parametrize("policy", ["optimal", "uniform", "bcql"])
def test_analyze_extrapolation(tmp_path, cfg, capsys, policy):
    assert main(["analyze-extrapolation", "--config", cfg(GRID), "--policy", policy, "--out", str(tmp_path)]) == 0
    assert "aggregate extrapolation error" in capsys.readouterr().out
    doc = json.loads((tmp_path / "extrapolation.json").read_text())
    assert doc["lemma1"]["holds"] in (True, False)


def test_analyze_needs_tabular(cfg):
    assert main(["analyze-extrapolation", "--config", cfg(TINY)]) == 2


def test_kbrl_demo(tmp_path, capsys):
    assert main(["kbrl-demo", "--out", str(tmp_path)]) == 0
    assert "KBRL" in capsys.readouterr().out
    assert json.loads((tmp_path / "kbrl_demo.json").read_text())["kbrl_policy"] == [1, 1]


def test_report(tmp_path, cfg):
    main(["train", "--config", cfg(GRID + "seeds = 0,1\n"), "--out", str(tmp_path)])
    assert main(["report", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "final-buffer" / "bcql" / "report.csv").exists()
    assert main(["report", "--out", str(tmp_path / "empty")]) == 1


def test_usage_errors():
    with pytest.raises(SystemExit):
        main([])
    with pytest.raises(SystemExit):
        main(["train"])
