"""In-memory pipelines shared by the command line and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .grpo import GrpoConfig, train_grpo
from .harness import EvalMatrix, compare, evaluate, scenario_grid
from .policy import ParamStore, inject_adapters, merge_adapters
from .sft import SftConfig, train_sft
from .synthdocs import DocumentSample, EvalSet, ScenarioData, make_sft_targets, scenario_split
from .textio import PromptSpec, Vocab, build_prompt
from .trainlog import TrainingLog

METHODS = ("sft", "rl", "sft+rl")
DEFAULT_METHODS = {
    "ood-style": ("sft", "rl"),
    "unseen-classes": ("sft", "rl"),
    "modality": ("sft", "rl"),
    "reasoning-ablation": ("rl", "sft+rl"),
}


def rl_prompts(samples: Sequence[DocumentSample], vocab: Vocab, classes: Sequence[str]) -> list[tuple[list[int], str]]:
    return [(build_prompt(PromptSpec(tuple(classes), s.modality, tuple(s.document_words)), vocab), s.label) for s in samples]


def fresh_adapters(init: ParamStore, seed: int) -> ParamStore:
    """Copy of ``init`` with any existing adapters merged and new ones attached."""
    store = merge_adapters(init) if init.adapters else init.copy()
    store.freeze_base(False)
    return inject_adapters(store, seed)


def run_sft(
    init: ParamStore, data: ScenarioData, vocab: Vocab, cfg: SftConfig, adapter_seed: int | None = None
) -> tuple[ParamStore, TrainingLog]:
    store = fresh_adapters(init, cfg.seed if adapter_seed is None else adapter_seed)
    examples = make_sft_targets(data.train, vocab, data.train_classes)
    return store, train_sft(examples, cfg, store)


def run_rl(
    init: ParamStore,
    data: ScenarioData,
    vocab: Vocab,
    cfg: GrpoConfig,
    adapter_seed: int | None = None,
    trace_path: str | Path | None = None,
) -> tuple[ParamStore, TrainingLog]:
    store = fresh_adapters(init, cfg.seed if adapter_seed is None else adapter_seed)
    prompts = rl_prompts(data.train, vocab, data.train_classes)
    return store, train_grpo(prompts, cfg, store, vocab, trace_path=trace_path)


def scenario_eval_sets(scenario: str, dataset: Sequence[DocumentSample], train_modality: str) -> tuple[ScenarioData, list[EvalSet]]:
    base = "unseen-classes" if scenario == "reasoning-ablation" else scenario
    data = scenario_split(dataset, base, train_modality)
    return data, data.eval_sets


def evaluate_scenario(
    scenario: str,
    store: ParamStore,
    vocab: Vocab,
    eval_sets: Sequence[EvalSet],
    train_modality: str,
    model_id: str,
    max_new: int = 48,
    predictions_path: str | Path | None = None,
) -> EvalMatrix:
    grid = scenario_grid(scenario, train_modality)
    prompts = tuple(dict.fromkeys(k[0] for k in grid))
    modes = tuple(dict.fromkeys(k[3] for k in grid))
    matrix, _ = evaluate(
        store,
        vocab,
        eval_sets,
        prompt_variants=prompts,
        reasoning_modes=modes,
        model_id=model_id,
        max_new=max_new,
        predictions_path=predictions_path,
        config={"scenario": scenario, "train_modality": train_modality},
    )
    order = {k: i for i, k in enumerate(grid)}
    cells = sorted((c for c in matrix.cells if c.key in order), key=lambda c: order[c.key])
    return EvalMatrix(matrix.model_id, matrix.checkpoint_hash, cells, matrix.config)


@dataclass
class ScenarioResult:
    scenario: str
    train_modality: str
    models: dict[str, ParamStore] = field(default_factory=dict)
    logs: dict[str, TrainingLog] = field(default_factory=dict)
    matrices: dict[str, EvalMatrix] = field(default_factory=dict)


def run_scenario(
    scenario: str,
    base: ParamStore,
    dataset: Sequence[DocumentSample],
    vocab: Vocab,
    sft_cfg: SftConfig,
    grpo_cfg: GrpoConfig,
    train_modality: str = "image",
    methods: Sequence[str] | None = None,
    max_new: int = 48,
    out_dir: Path | None = None,
) -> ScenarioResult:
    """Train each requested method from ``base`` and evaluate it on the scenario grid.

    ``sft+rl`` starts GRPO from the merged SFT model.
    """
    methods = tuple(methods or DEFAULT_METHODS[scenario])
    data, eval_sets = scenario_eval_sets(scenario, dataset, train_modality)
    res = ScenarioResult(scenario, train_modality)
    for method in methods:
        if method == "sft":
            store, log = run_sft(base, data, vocab, sft_cfg)
        elif method == "rl":
            store, log = run_rl(base, data, vocab, grpo_cfg)
        elif method == "sft+rl":
            if "sft" not in res.models:
                res.models["sft"], res.logs["sft"] = run_sft(base, data, vocab, sft_cfg)
            store, log = run_rl(res.models["sft"], data, vocab, grpo_cfg)
        else:
            raise ValueError(f"unknown method {method!r}")
        res.models[method], res.logs[method] = store, log
        pred = out_dir / f"predictions_{method}_{train_modality}.jsonl" if out_dir is not None else None
        res.matrices[method] = evaluate_scenario(
            scenario, store, vocab, eval_sets, train_modality, f"{method}/{train_modality}", max_new, pred
        )
    return res


def method_delta(res: ScenarioResult, a: str, b: str):
    return compare(res.matrices[a], res.matrices[b], res.scenario, res.train_modality)
