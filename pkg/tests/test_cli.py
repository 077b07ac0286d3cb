import json
import subprocess
import sys

import pytest

from doclab.cli import RunDir, load_config, main
from doclab.errors import ConfigError, UsageError
from doclab.policy import load_checkpoint, merge_adapters
from conftest import FIXTURES

TINY = """\
[gen]
train_per_class = 3
test_per_class = 2
[policy]
d_model = 32
n_layers = 1
n_heads = 2
lora_rank = 4
context_length = 160
[pretrain]
steps = 3
batch_size = 4
[sft]
epochs = 1
[grpo]
steps = 2
prompts_per_step = 1
group_size = 4
max_new = 12
[eval]
max_new = 12
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    c = ("--config", cfg)
    assert run("gen", *c, "--out", root / "gen") == 0
    data = root / "gen" / "dataset.jsonl"
    assert run("pretrain", *c, "--out", root / "base") == 0
    base = root / "base" / "base.ckpt"
    assert run("train-sft", *c, "--data", data, "--init-checkpoint", base, "--out", root / "sft") == 0
    assert run("train-rl", *c, "--data", data, "--init-checkpoint", base, "--out", root / "rl", "--trace") == 0
    for name in ("sft", "rl"):
        assert run("eval", *c, "--checkpoint", root / name / "model.ckpt", "--data", data, "--out", root / f"eval_{name}") == 0
    assert run("compare", *c, root / "eval_sft" / "matrix.json", root / "eval_rl" / "matrix.json", "--out", root / "cmp") == 0
    assert run("score", "--in", FIXTURES / "rubric_cases.jsonl", "--out", root / "score") == 0
    return root


def test_outputs_and_manifests(pipe):
    expected = {
        "gen": {"dataset.jsonl", "vocab.json", "stats.json"},
        "base": {"base.ckpt", "pretrain_log.csv"},
        "sft": {"model.ckpt", "sft_log.csv"},
        "rl": {"model.ckpt", "grpo_log.csv", "rollouts.jsonl"},
        "eval_sft": {"matrix.csv", "matrix.json", "matrix.md", "predictions.jsonl"},
        "cmp": {"delta.json", "delta.md"},
        "score": {"scores.jsonl"},
    }
    for run_dir, outs in expected.items():
        man = json.loads((pipe / run_dir / "manifest.json").read_text())
        assert set(man["outputs"]) == outs
        assert len(man["config_sha256"]) == 64 and "numpy" in man["versions"]
        assert not (pipe / run_dir / ".lock").exists() and not (pipe / run_dir / "FAILED").exists()
    man = json.loads((pipe / "sft" / "manifest.json").read_text())
    assert set(man["inputs"]) == {"data", "init_checkpoint"}


def test_score_is_golden(pipe):
    assert (pipe / "score" / "scores.jsonl").read_bytes() == (FIXTURES / "rubric_scores.golden.jsonl").read_bytes()


def test_eval_matrix_is_unseen_grid(pipe):
    m = json.loads((pipe / "eval_rl" / "matrix.json").read_text())
    assert len(m["cells"]) == 9
    assert sum(c["mismatch"] for c in m["cells"]) == 6


def test_replay_reproduces(pipe, tmp_path):
    for name in ("gen", "sft", "rl", "eval_rl", "cmp", "score"):
        assert run("replay", pipe / name, "--out", tmp_path / name) == 0


def test_replay_detects_changed_input(pipe, tmp_path):
    bad = tmp_path / "cases.jsonl"
    bad.write_text((FIXTURES / "rubric_cases.jsonl").read_text())
    assert run("score", "--in", bad, "--out", tmp_path / "s") == 0
    bad.write_text("")
    assert run("replay", tmp_path / "s", "--out", tmp_path / "s2") == 1


def test_train_rl_zero_steps_is_init(pipe, tmp_path):
    cfg = tmp_path / "zero.ini"
    cfg.write_text(TINY.replace("steps = 2", "steps = 0"))
    base = pipe / "base" / "base.ckpt"
    assert run("train-rl", "--config", cfg, "--data", pipe / "gen" / "dataset.jsonl", "--init-checkpoint", base, "--out", tmp_path / "z") == 0
    model = load_checkpoint(tmp_path / "z" / "model.ckpt")
    assert merge_adapters(model).base_hash() == load_checkpoint(base).base_hash()


def test_eval_reasoning_off(pipe, tmp_path):
    assert run(
        "eval", "--config", pipe / "tiny.ini", "--checkpoint", pipe / "rl" / "model.ckpt", "--data", pipe / "gen" / "dataset.jsonl",
        "--reasoning", "off", "--prompt-classes", "heldout6", "--out", tmp_path / "e",
    ) == 0
    preds = [json.loads(l) for l in (tmp_path / "e" / "predictions.jsonl").read_text().splitlines()]
    assert preds and all(p["response"][:2] == [3, 4] and p["reasoning_mode"] == "off" for p in preds)
    assert {p["prompt_variant"] for p in preds} == {"heldout6"}


def test_no_writes_outside_run_dir(pipe, tmp_path):
    work = tmp_path / "work"
    work.mkdir()
    (work / "in.jsonl").write_text((FIXTURES / "rubric_cases.jsonl").read_text())
    before = {p: p.stat().st_mtime_ns for p in work.rglob("*")}
    assert run("score", "--in", work / "in.jsonl", "--out", work / "out") == 0
    after = {p: p.stat().st_mtime_ns for p in work.rglob("*") if "out" not in p.relative_to(work).parts}
    assert after == before


def test_error_line_and_exit_codes(tmp_path, capsys):
    assert run("eval", "--checkpoint", tmp_path / "none.ckpt", "--data", tmp_path / "none", "--out", tmp_path / "e") == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("doclab: error: code=") and "\n" not in err
    assert (tmp_path / "e" / "FAILED").exists()
    bad = tmp_path / "bad.ini"
    bad.write_text("[sft]\nepochs = many\n")
    assert run("gen", "--config", bad, "--out", tmp_path / "g") == 2
    assert run("frobnicate") == 2


def test_lock_blocks_second_writer(tmp_path):
    with RunDir(tmp_path / "r"):
        with pytest.raises(UsageError):
            with RunDir(tmp_path / "r"):
                pass
    assert not (tmp_path / "r" / ".lock").exists()


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[sft]\nwarp = 9\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("[nosuch]\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_help_documents_defaults():
    out = subprocess.run([sys.executable, "-m", "doclab.cli", "train-rl", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "group_size = 8" in out.stdout and "[pretrain]" in out.stdout
