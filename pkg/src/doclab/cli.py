"""Command line: ``doclab <command> [options]``.

Every command writes into its own ``--out`` directory: a resolved config
snapshot, the artifacts, and ``manifest.json`` with git-style hashes of the
inputs and outputs so a run can be replayed and checked byte for byte.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, fields
from importlib import metadata
from pathlib import Path
from typing import Callable

import numpy as np

from . import harness
from .errors import ConfigError, DoclabError, IntegrityError, UsageError
from .experiment import DEFAULT_METHODS, METHODS, evaluate_scenario, method_delta, run_rl, run_scenario, run_sft
from .experiment import scenario_eval_sets
from .grpo import GrpoConfig
from .policy import PolicyConfig, load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, pretrain_base
from .rewards import score_jsonl
from .sft import SftConfig
from .synthdocs import MODALITIES, GenConfig, build_vocab, generate, manifest, oracle_accuracy, read_jsonl, write_jsonl

SCENARIO_NAMES = ("ood-style", "unseen-classes", "modality", "reasoning-ablation")
PROMPT_CHOICES = {"all": "all16", "all16": "all16", "train10": "train10", "heldout6": "heldout6"}


@dataclass
class PolicySection:
    context_length: int = 128
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0


@dataclass
class EvalSection:
    max_new: int = 48
    prompt_classes: str = "all16, train10, heldout6"
    reasoning: str = "on"


@dataclass
class ScenarioSection:
    train_modality: str = "image"
    methods: str = ""


SECTIONS = {
    "gen": GenConfig,
    "policy": PolicySection,
    "pretrain": PretrainConfig,
    "sft": SftConfig,
    "grpo": GrpoConfig,
    "eval": EvalSection,
    "scenario": ScenarioSection,
}


# ---------------------------------------------------------------------------
# config files


def _coerce(kind: str, raw: str, where: str):
    raw = raw.strip()
    optional = "None" in kind
    if optional and raw.lower() in ("", "none"):
        return None
    base = kind.replace("| None", "").strip()
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {base}") from None


def load_config(path: str | Path | None) -> dict:
    """Parse an INI file into one dataclass instance per section (defaults fill the gaps)."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            parser.read_string(p.read_text(), source=str(p))
        except configparser.Error as e:
            raise ConfigError(f"{p}: {' '.join(str(e).split())}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
    for name, cls in SECTIONS.items():
        kinds = {f.name: str(f.type) for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in kinds:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
                values[key] = _coerce(kinds[key], raw, f"[{name}] {key}")
        out[name] = cls(**values)
    for name in ("gen", "pretrain", "sft", "grpo"):
        out[name].validate()
    return out


def dump_config(cfg: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        parser[name] = {k: "none" if v is None else str(v) for k, v in asdict(cfg[name]).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def defaults_help() -> str:
    lines = ["config file sections and defaults:"]
    for name, cls in SECTIONS.items():
        lines.append(f"  [{name}]")
        for f in fields(cls):
            lines.append(f"    {f.name} = {getattr(cls(), f.name) if f.name != 'vocab_size' else ''}")
    return "\n".join(lines)


def policy_config(cfg: dict, vocab_size: int) -> PolicyConfig:
    return PolicyConfig(vocab_size=vocab_size, **asdict(cfg["policy"]))


# ---------------------------------------------------------------------------
# run directories


def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _file_hash(path: Path) -> str:
    return git_blob_sha1(path.read_bytes())


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"artifact": pkg, "numpy": np.__version__, "python": platform.python_version()}


class RunDir:
    """Output directory guarded by an exclusive lock file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.lock = self.path / ".lock"
        self.fd = None

    def __enter__(self) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"run directory {self.path} is locked by another writer") from None
        os.write(self.fd, str(os.getpid()).encode())
        failed = self.path / "FAILED"
        if failed.exists():
            failed.unlink()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            (self.path / "FAILED").write_text(_error_line(exc) + "\n")
        os.close(self.fd)
        self.lock.unlink()
        return False


def write_manifest(run: RunDir, command: str, args: dict, cfg_text: str, inputs: dict[str, Path], outputs: list[str]) -> None:
    man = {
        "command": command,
        "args": args,
        "config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "inputs": {k: {"path": str(p), "git_sha1": _file_hash(Path(p))} for k, p in sorted(inputs.items())},
        "outputs": {name: _file_hash(run.path / name) for name in sorted(outputs)},
        "versions": _versions(),
    }
    (run.path / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def _vocab_for(store) -> object:
    vocab = build_vocab()
    if len(vocab) != store.config.vocab_size:
        raise IntegrityError(f"checkpoint vocabulary size {store.config.vocab_size} != {len(vocab)}")
    return vocab


def _need_file(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _apply_seed(cfg: dict, seed: int | None, sections: tuple[str, ...]) -> None:
    if seed is not None:
        for s in sections:
            cfg[s].seed = seed


def cmd_gen(args, cfg: dict, run: RunDir) -> tuple[dict, list[str]]:
    _apply_seed(cfg, args.seed, ("gen",))
    samples = generate(cfg["gen"])
    write_jsonl(samples, run.path / "dataset.jsonl")
    build_vocab().save(run.path / "vocab.json")
    stats = {"dataset": manifest(cfg["gen"], samples), "oracle_accuracy": {}}
    for style in ("vintage", "modern"):
        for m in MODALITIES:
            part = [s for s in samples if s.split == "test" and s.style == style and s.modality == m]
            stats["oracle_accuracy"][f"{style}/{m}"] = oracle_accuracy(part)
    (run.path / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return {}, ["dataset.jsonl", "vocab.json", "stats.json"]


def cmd_pretrain(args, cfg: dict, run: RunDir):
    _apply_seed(cfg, args.seed, ("pretrain",))
    vocab = build_vocab()
    store, log = pretrain_base(vocab, policy_config(cfg, len(vocab)), cfg["pretrain"], cfg["gen"])
    save_checkpoint(run.path / "base.ckpt", store)
    log.write(run.path / "pretrain_log.csv")
    return {}, ["base.ckpt", "pretrain_log.csv"]


def _train_inputs(args):
    data = _need_file(args.data, "--data")
    init = _need_file(args.init_checkpoint, "--init-checkpoint")
    return data, init


def cmd_train_sft(args, cfg: dict, run: RunDir):
    data_path, init_path = _train_inputs(args)
    _apply_seed(cfg, args.seed, ("sft",))
    init = load_checkpoint(init_path)
    vocab = _vocab_for(init)
    data, _ = scenario_eval_sets(args.scenario, read_jsonl(data_path), cfg["scenario"].train_modality)
    store, log = run_sft(init, data, vocab, cfg["sft"])
    save_checkpoint(run.path / "model.ckpt", store)
    log.write(run.path / "sft_log.csv")
    return {"data": data_path, "init_checkpoint": init_path}, ["model.ckpt", "sft_log.csv"]


def cmd_train_rl(args, cfg: dict, run: RunDir):
    data_path, init_path = _train_inputs(args)
    _apply_seed(cfg, args.seed, ("grpo",))
    init = load_checkpoint(init_path)
    vocab = _vocab_for(init)
    data, _ = scenario_eval_sets(args.scenario, read_jsonl(data_path), cfg["scenario"].train_modality)
    trace = run.path / "rollouts.jsonl" if args.trace else None
    store, log = run_rl(init, data, vocab, cfg["grpo"], trace_path=trace)
    save_checkpoint(run.path / "model.ckpt", store)
    log.write(run.path / "grpo_log.csv")
    outs = ["model.ckpt", "grpo_log.csv"] + (["rollouts.jsonl"] if trace else [])
    return {"data": data_path, "init_checkpoint": init_path}, outs


def cmd_score(args, cfg: dict, run: RunDir):
    src = _need_file(args.input, "--in")
    score_jsonl(src, run.path / "scores.jsonl", build_vocab())
    return {"input": src}, ["scores.jsonl"]


def _write_matrix(run: RunDir, matrix, stem: str) -> list[str]:
    (run.path / f"{stem}.csv").write_text(harness.to_csv(matrix))
    (run.path / f"{stem}.json").write_text(harness.to_json(matrix))
    (run.path / f"{stem}.md").write_text(harness.to_markdown(matrix))
    return [f"{stem}.csv", f"{stem}.json", f"{stem}.md"]


def cmd_eval(args, cfg: dict, run: RunDir):
    ckpt = _need_file(args.checkpoint, "--checkpoint")
    data_path = _need_file(args.data, "--data")
    store = load_checkpoint(ckpt)
    vocab = _vocab_for(store)
    ev = cfg["eval"]
    modality = cfg["scenario"].train_modality
    _, eval_sets = scenario_eval_sets(args.scenario, read_jsonl(data_path), modality)
    prompts = args.prompt_classes or [p.strip() for p in ev.prompt_classes.split(",") if p.strip()]
    prompts = [PROMPT_CHOICES.get(p, p) for p in prompts]
    reasoning = args.reasoning or ev.reasoning
    modes = ("on", "off") if reasoning == "both" else (reasoning,)
    matrix, _ = harness.evaluate(
        store,
        vocab,
        eval_sets,
        prompt_variants=tuple(dict.fromkeys(prompts)),
        reasoning_modes=modes,
        model_id=args.model_id or f"{ckpt.parent.name}/{ckpt.stem}",
        max_new=ev.max_new,
        predictions_path=run.path / "predictions.jsonl",
        config={"scenario": args.scenario, "train_modality": modality},
    )
    outs = _write_matrix(run, matrix, "matrix") + ["predictions.jsonl"]
    return {"checkpoint": ckpt, "data": data_path}, outs


def cmd_compare(args, cfg: dict, run: RunDir):
    a_path = _need_file(args.a, "matrix A")
    b_path = _need_file(args.b, "matrix B")
    a = harness.EvalMatrix.from_dict(json.loads(a_path.read_text()))
    b = harness.EvalMatrix.from_dict(json.loads(b_path.read_text()))
    rep = harness.compare(a, b, args.scenario)
    (run.path / "delta.json").write_text(rep.to_json())
    (run.path / "delta.md").write_text(rep.to_markdown())
    return {"a": a_path, "b": b_path}, ["delta.json", "delta.md"]


def cmd_scenario(args, cfg: dict, run: RunDir):
    name = args.name
    _apply_seed(cfg, args.seed, ("sft", "grpo"))
    inputs, outs = {}, []
    if args.data:
        inputs["data"] = _need_file(args.data, "--data")
        dataset = read_jsonl(inputs["data"])
    else:
        dataset = generate(cfg["gen"])
        write_jsonl(dataset, run.path / "dataset.jsonl")
        outs.append("dataset.jsonl")
    if args.init_checkpoint:
        inputs["init_checkpoint"] = _need_file(args.init_checkpoint, "--init-checkpoint")
        base = load_checkpoint(inputs["init_checkpoint"])
        vocab = _vocab_for(base)
    else:
        vocab = build_vocab()
        base, log = pretrain_base(vocab, policy_config(cfg, len(vocab)), cfg["pretrain"], cfg["gen"])
        save_checkpoint(run.path / "base.ckpt", base)
        log.write(run.path / "pretrain_log.csv")
        outs += ["base.ckpt", "pretrain_log.csv"]
    sc = cfg["scenario"]
    methods = [m.strip() for m in sc.methods.split(",") if m.strip()] or list(DEFAULT_METHODS[name])
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"[scenario] unknown method {m!r}")
    modalities = MODALITIES if name == "modality" else (sc.train_modality,)
    report = [f"# {name}", ""]
    for tm in modalities:
        res = run_scenario(
            name, base, dataset, vocab, cfg["sft"], cfg["grpo"], tm, methods, cfg["eval"].max_new, run.path
        )
        for method, store in res.models.items():
            tag = f"{method.replace('+', '_')}_{tm}"
            save_checkpoint(run.path / f"model_{tag}.ckpt", store)
            res.logs[method].write(run.path / f"log_{tag}.csv")
            outs += [f"model_{tag}.ckpt", f"log_{tag}.csv"]
        for method in methods:
            tag = f"{method.replace('+', '_')}_{tm}"
            outs += _write_matrix(run, res.matrices[method], f"matrix_{tag}")
            outs.append(f"predictions_{method}_{tm}.jsonl")
            report += [f"## {method} (trained on {tm})", "", harness.to_markdown(res.matrices[method])]
        if "sft" in methods and "rl" in methods:
            rep = method_delta(res, "sft", "rl")
            (run.path / f"delta_sft_rl_{tm}.json").write_text(rep.to_json())
            outs.append(f"delta_sft_rl_{tm}.json")
            report += [f"## rl minus sft (trained on {tm})", "", rep.to_markdown()]
    (run.path / "report.md").write_text("\n".join(report))
    outs.append("report.md")
    return inputs, sorted(set(outs))


COMMANDS: dict[str, Callable] = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "train-sft": cmd_train_sft,
    "train-rl": cmd_train_rl,
    "score": cmd_score,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "scenario": cmd_scenario,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="doclab",
        description="Synthetic document classification: SFT vs GRPO fine-tuning lab.",
        epilog=defaults_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI config file (see sections below)")
        sp.add_argument("--out", required=True, help="run directory")
        if seed:
            sp.add_argument("--seed", type=int, help="override the seed of the relevant section")
        sp.epilog = defaults_help()
        sp.formatter_class = argparse.RawDescriptionHelpFormatter

    common(sub.add_parser("gen", help="generate the synthetic dataset"))
    common(sub.add_parser("pretrain", help="pretrain a base policy"))
    for name in ("train-sft", "train-rl"):
        sp = sub.add_parser(name, help=f"{name[6:]} fine-tuning with fresh adapters")
        common(sp)
        sp.add_argument("--data", required=True, help="dataset.jsonl from gen")
        sp.add_argument("--init-checkpoint", required=True, help="base or fine-tuned checkpoint")
        sp.add_argument("--scenario", default="unseen-classes", choices=SCENARIO_NAMES)
        if name == "train-rl":
            sp.add_argument("--trace", action="store_true", help="dump every rollout to rollouts.jsonl")
    sp = sub.add_parser("score", help="score responses with the reward rubric")
    common(sp, seed=False)
    sp.add_argument("--in", dest="input", required=True, help="JSONL with response/response_text and gold")
    sp = sub.add_parser("eval", help="evaluate a checkpoint on a scenario grid")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--scenario", default="unseen-classes", choices=SCENARIO_NAMES)
    sp.add_argument("--prompt-classes", action="append", choices=sorted(PROMPT_CHOICES), help="repeatable")
    sp.add_argument("--reasoning", choices=("on", "off", "both"))
    sp.add_argument("--model-id")
    sp = sub.add_parser("compare", help="per-cell deltas between two matrix.json files")
    common(sp, seed=False)
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--scenario", choices=SCENARIO_NAMES)
    sp = sub.add_parser("scenario", help="end-to-end pipeline for one experiment grid")
    common(sp)
    sp.add_argument("name", choices=SCENARIO_NAMES)
    sp.add_argument("--data", help="reuse a generated dataset instead of generating one")
    sp.add_argument("--init-checkpoint", help="reuse a pretrained base instead of pretraining")
    sp = sub.add_parser("replay", help="re-run a finished run from its manifest and verify outputs")
    sp.add_argument("run_dir")
    sp.add_argument("--out", required=True)
    return p


def _error_line(exc: BaseException) -> str:
    code = getattr(exc, "code", None) if isinstance(exc, DoclabError) else "internal"
    msg = " ".join(str(exc).split()) or type(exc).__name__
    return f"doclab: error: code={code} message={msg}"


def _normalized_args(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("command", "out", "config"):
            continue
        out[k] = v
    return out


def execute(args) -> Path:
    if args.command == "replay":
        return replay(args.run_dir, args.out)
    cfg = load_config(args.config)
    with RunDir(args.out) as run:
        inputs, outs = COMMANDS[args.command](args, cfg, run)
        cfg_text = dump_config(cfg)
        (run.path / "config.ini").write_text(cfg_text)
        write_manifest(run, args.command, _normalized_args(args), cfg_text, inputs, outs)
    return run.path


def replay(run_dir: str | Path, out: str | Path) -> Path:
    """Re-execute a run from its manifest and config snapshot; raises if any output differs."""
    src = Path(run_dir)
    man_path = src / "manifest.json"
    if not man_path.is_file():
        raise UsageError(f"{src} has no manifest.json")
    man = json.loads(man_path.read_text())
    for role, rec in man["inputs"].items():
        p = Path(rec["path"])
        if not p.is_file() or _file_hash(p) != rec["git_sha1"]:
            raise IntegrityError(f"input {role} ({p}) is missing or changed since the run")
    argv = [man["command"], "--config", str(src / "config.ini"), "--out", str(out)]
    for k, v in man["args"].items():
        flag = "--" + k.replace("_", "-")
        if k in ("name", "a", "b"):
            continue
        if k == "input":
            flag = "--in"
        if v is None or v is False:
            continue
        if v is True:
            argv.append(flag)
        elif isinstance(v, list):
            for item in v:
                argv += [flag, str(item)]
        else:
            argv += [flag, str(v)]
    for k in ("name", "a", "b"):
        if k in man["args"]:
            argv.append(str(man["args"][k]))
    path = execute(build_parser().parse_args(argv))
    new = json.loads((path / "manifest.json").read_text())
    diff = sorted(k for k in man["outputs"] if new["outputs"].get(k) != man["outputs"][k])
    if diff:
        raise IntegrityError(f"replay outputs differ: {', '.join(diff)}")
    return path


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        path = execute(args)
    except DoclabError as e:
        print(_error_line(e), file=sys.stderr)
        return 2 if isinstance(e, (UsageError, ConfigError)) else 1
    except (OSError, ValueError) as e:
        print(_error_line(e), file=sys.stderr)
        return 1
    print(f"ok {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
