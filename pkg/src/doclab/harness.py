"""Evaluation grids: prompt variant x test split (x modality x reasoning mode) accuracy matrices."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import IntegrityError, UsageError
from .policy import ParamStore, generate
from .synthdocs import PROMPT_VARIANTS, SPLIT_CLASSES, EvalSet
from .textio import R_CLOSE, R_OPEN, PromptSpec, Vocab, build_prompt, parse_response

REASONING_MODES = ("on", "off")
NO_REASONING_PREFILL = (R_OPEN, R_CLOSE)
CSV_COLUMNS = [
    "prompt_variant",
    "split",
    "modality",
    "reasoning_mode",
    "n",
    "accuracy",
    "format_rate",
    "in_prompt_rate",
    "mismatch",
]


def is_mismatch(prompt_variant: str, split: str) -> bool:
    """True when the prompted class set differs from the split's label set."""
    return set(PROMPT_VARIANTS[prompt_variant]) != set(SPLIT_CLASSES[split])


@dataclass(frozen=True)
class EvalCell:
    prompt_variant: str
    split: str
    modality: str
    reasoning_mode: str
    n: int
    accuracy: float
    format_rate: float
    in_prompt_rate: float
    mismatch: bool = field(init=False)

    def __post_init__(self):
        if self.prompt_variant not in PROMPT_VARIANTS:
            raise UsageError(f"unknown prompt variant {self.prompt_variant!r}")
        if self.split not in SPLIT_CLASSES:
            raise UsageError(f"unknown split {self.split!r}")
        if self.reasoning_mode not in REASONING_MODES:
            raise UsageError(f"unknown reasoning mode {self.reasoning_mode!r}")
        for name in ("accuracy", "format_rate", "in_prompt_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        object.__setattr__(self, "mismatch", is_mismatch(self.prompt_variant, self.split))

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.prompt_variant, self.split, self.modality, self.reasoning_mode)


@dataclass
class EvalMatrix:
    model_id: str
    checkpoint_hash: str
    cells: list[EvalCell]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = [c.key for c in self.cells]
        if len(set(keys)) != len(keys):
            raise UsageError("duplicate cells in evaluation matrix")

    def cell(self, prompt_variant: str, split: str, modality: str | None = None, reasoning_mode: str = "on") -> EvalCell:
        for c in self.cells:
            if (c.prompt_variant, c.split, c.reasoning_mode) == (prompt_variant, split, reasoning_mode) and (
                modality is None or c.modality == modality
            ):
                return c
        raise KeyError((prompt_variant, split, modality, reasoning_mode))

    def keys(self) -> set:
        return {c.key for c in self.cells}

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "checkpoint_hash": self.checkpoint_hash,
            "config": self.config,
            "cells": [{**asdict(c), "mismatch": c.mismatch} for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMatrix":
        cells = [EvalCell(**{k: v for k, v in c.items() if k != "mismatch"}) for c in d["cells"]]
        return cls(d["model_id"], d["checkpoint_hash"], cells, d.get("config", {}))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Prediction:
    sample_id: str
    prompt_variant: str
    split: str
    modality: str
    reasoning_mode: str
    response: list[int]
    reasoning: str
    label: str | None
    gold: str
    correct: bool
    format_ok: bool
    in_prompt: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _decode_all(prompts: list[list[int]], store: ParamStore, prefill, max_new: int, chunk: int) -> list[list[int]]:
    """Greedy responses in input order; prompts are bucketed by length for batching."""
    buckets: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(prompts):
        buckets[len(p)].append(i)
    out: list[list[int]] = [[] for _ in prompts]
    for length in sorted(buckets):
        idx = buckets[length]
        for s in range(0, len(idx), chunk):
            part = idx[s : s + chunk]
            rolls = generate([prompts[i] for i in part], store, max_new=max_new, prefill=prefill, greedy=True)
            for i, r in zip(part, rolls):
                out[i] = r.response
    return out


def score_cell(preds: Sequence[Prediction]) -> tuple[int, float, float, float]:
    """(n, accuracy, format rate, in-prompt rate); every sample is in every denominator."""
    n = len(preds)
    if n == 0:
        raise UsageError("cannot score an empty cell")
    return (
        n,
        sum(p.correct for p in preds) / n,
        sum(p.format_ok for p in preds) / n,
        sum(p.in_prompt for p in preds) / n,
    )


def evaluate(
    store: ParamStore | None,
    vocab: Vocab,
    eval_sets: Sequence[EvalSet],
    prompt_variants: Sequence[str] = ("all16", "train10", "heldout6"),
    reasoning_modes: Sequence[str] = ("on",),
    model_id: str = "model",
    max_new: int = 48,
    chunk: int = 64,
    predictions_path: str | Path | None = None,
    config: dict | None = None,
    responder: Callable[[list[list[int]], tuple], list[list[int]]] | None = None,
) -> tuple[EvalMatrix, list[Prediction]]:
    """Greedy-decode every (prompt variant, eval set, reasoning mode) combination.

    ``responder(prompts, prefill)`` replaces the policy when given (``store``
    may then be None); it must return full responses including the prefill.
    """
    if store is None and responder is None:
        raise UsageError("evaluate needs a store or a responder")
    if store is not None and len(vocab) != store.config.vocab_size:
        raise IntegrityError(f"vocabulary size {len(vocab)} does not match checkpoint ({store.config.vocab_size})")
    if responder is None:

        def responder(prompts, prefill):
            return _decode_all(prompts, store, prefill, max_new, chunk)

    for pv in prompt_variants:
        if pv not in PROMPT_VARIANTS:
            raise UsageError(f"unknown prompt variant {pv!r}")
    for mode in reasoning_modes:
        if mode not in REASONING_MODES:
            raise UsageError(f"unknown reasoning mode {mode!r}")
    cells, preds_all = [], []
    for mode in reasoning_modes:
        prefill = NO_REASONING_PREFILL if mode == "off" else ()
        for pv in prompt_variants:
            classes = PROMPT_VARIANTS[pv]
            for es in eval_sets:
                prompts = [
                    build_prompt(PromptSpec(classes, s.modality, tuple(s.document_words)), vocab) for s in es.samples
                ]
                responses = responder(prompts, prefill)
                preds = []
                for s, resp in zip(es.samples, responses):
                    parsed = parse_response(resp, vocab)
                    preds.append(
                        Prediction(
                            sample_id=s.id,
                            prompt_variant=pv,
                            split=es.split,
                            modality=es.modality,
                            reasoning_mode=mode,
                            response=list(resp),
                            reasoning=vocab.decode(parsed.reasoning),
                            label=parsed.label,
                            gold=s.label,
                            correct=parsed.label == s.label,
                            format_ok=parsed.order_ok,
                            in_prompt=parsed.label in classes,
                        )
                    )
                n, acc, fmt, inp = score_cell(preds)
                cells.append(EvalCell(pv, es.split, es.modality, mode, n, acc, fmt, inp))
                preds_all.extend(preds)
    digest = store.content_hash() if store is not None else ""
    matrix = EvalMatrix(model_id, digest, cells, dict(config or {}))
    if predictions_path is not None:
        write_predictions(preds_all, predictions_path)
    return matrix, preds_all


def write_predictions(preds: Iterable[Prediction], path: str | Path) -> None:
    Path(path).write_text("".join(p.to_json() + "\n" for p in preds))


def recount(predictions_path: str | Path) -> dict[tuple, tuple[int, float, float, float]]:
    """Recompute cell metrics from a predictions dump (independent of ``evaluate``)."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for line in Path(predictions_path).read_text().splitlines():
        rec = json.loads(line)
        key = (rec["prompt_variant"], rec["split"], rec["modality"], rec["reasoning_mode"])
        groups[key].append(rec)
    out = {}
    for key, recs in groups.items():
        n = len(recs)
        classes = set(PROMPT_VARIANTS[key[0]])
        out[key] = (
            n,
            sum(r["label"] is not None and r["label"] == r["gold"] for r in recs) / n,
            sum(bool(r["format_ok"]) for r in recs) / n,
            sum(r["label"] in classes for r in recs) / n,
        )
    return out


# ---------------------------------------------------------------------------
# scenario grids


def scenario_grid(scenario: str, train_modality: str = "image") -> list[tuple[str, str, str, str]]:
    """Cell keys each scenario must produce, in report order."""
    other = "ocr" if train_modality == "image" else "image"
    three = ("train10", "heldout6", "all16")
    if scenario == "ood-style":
        return [("all16", st, train_modality, "on") for st in ("vintage", "modern")]
    if scenario == "unseen-classes":
        return [(pv, sp, train_modality, "on") for pv in three for sp in three]
    if scenario == "modality":
        return [("all16", "all16", m, "on") for m in (train_modality, other)]
    if scenario == "reasoning-ablation":
        return [(pv, sp, train_modality, mode) for mode in REASONING_MODES for pv in three for sp in three]
    raise UsageError(f"unknown scenario {scenario!r}")


def id_ood_keys(scenario: str, train_modality: str = "image") -> tuple[tuple, tuple]:
    """Which cell is in-distribution and which is the out-of-distribution counterpart."""
    m = train_modality
    if scenario == "ood-style":
        return ("all16", "vintage", m, "on"), ("all16", "modern", m, "on")
    if scenario in ("unseen-classes", "reasoning-ablation"):
        return ("train10", "train10", m, "on"), ("heldout6", "heldout6", m, "on")
    if scenario == "modality":
        other = "ocr" if m == "image" else "image"
        return ("all16", "all16", m, "on"), ("all16", "all16", other, "on")
    raise UsageError(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# reports


def _fmt(v: float) -> str:
    return repr(float(v))


def to_csv(matrix: EvalMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in matrix.cells:
        w.writerow(
            [
                c.prompt_variant,
                c.split,
                c.modality,
                c.reasoning_mode,
                c.n,
                _fmt(c.accuracy),
                _fmt(c.format_rate),
                _fmt(c.in_prompt_rate),
                "true" if c.mismatch else "false",
            ]
        )
    return buf.getvalue()


def parse_csv(text: str, model_id: str = "", checkpoint_hash: str = "") -> EvalMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_COLUMNS:
        raise UsageError("not an evaluation matrix CSV")
    cells = []
    for r in rows[1:]:
        if not r:
            continue
        d = dict(zip(CSV_COLUMNS, r))
        cell = EvalCell(
            d["prompt_variant"],
            d["split"],
            d["modality"],
            d["reasoning_mode"],
            int(d["n"]),
            float(d["accuracy"]),
            float(d["format_rate"]),
            float(d["in_prompt_rate"]),
        )
        if cell.mismatch != (d["mismatch"] == "true"):
            raise IntegrityError(f"mismatch flag disagrees with class sets for {cell.key}")
        cells.append(cell)
    return EvalMatrix(model_id, checkpoint_hash, cells)


def to_json(matrix: EvalMatrix) -> str:
    return json.dumps(matrix.to_dict(), indent=2, sort_keys=True) + "\n"


PROMPT_LABELS = {"train10": "10 classes", "heldout6": "6 classes", "all16": "All classes"}
SPLIT_LABELS = {"train10": "10 classes", "heldout6": "6 classes", "all16": "All classes", "vintage": "vintage", "modern": "modern"}


def to_markdown(matrix: EvalMatrix, metric: str = "accuracy") -> str:
    """Rows are (reasoning mode, prompt), columns (split, modality).

    Values are percentages; cells whose prompt classes differ from the split's
    classes are shown in brackets.
    """
    rows_keys = list(dict.fromkeys((c.reasoning_mode, c.prompt_variant) for c in matrix.cells))
    col_keys = list(dict.fromkeys((c.split, c.modality) for c in matrix.cells))
    by_key = {c.key: c for c in matrix.cells}
    header = ["Reasoning", "Prompt"] + [f"{SPLIT_LABELS.get(s, s)} / {m}" for s, m in col_keys]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
    for mode, pv in rows_keys:
        vals = []
        for s, m in col_keys:
            c = by_key.get((pv, s, m, mode))
            if c is None:
                vals.append("")
                continue
            txt = f"{100 * getattr(c, metric):.2f}"
            vals.append(f"[{txt}]" if c.mismatch else txt)
        lines.append("| " + " | ".join([mode, PROMPT_LABELS.get(pv, pv)] + vals) + " |")
    lines.append("")
    lines.append(f"metric: {metric}; [bracketed] = prompt classes differ from the test classes")
    return "\n".join(lines) + "\n"


def render(matrix: EvalMatrix, fmt: str) -> str:
    if fmt == "csv":
        return to_csv(matrix)
    if fmt == "json":
        return to_json(matrix)
    if fmt in ("markdown", "md"):
        return to_markdown(matrix)
    raise UsageError(f"unknown report format {fmt!r}")


# ---------------------------------------------------------------------------
# comparison


@dataclass
class DeltaReport:
    cells: list[dict]
    summary: dict

    def to_json(self) -> str:
        return json.dumps({"cells": self.cells, "summary": self.summary}, indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        lines = [
            "| Prompt | Split | Modality | Reasoning | accuracy delta | format delta | in-prompt delta |",
            "|---|---|---|---|---|---|---|",
        ]
        for d in self.cells:
            lines.append(
                f"| {d['prompt_variant']} | {d['split']} | {d['modality']} | {d['reasoning_mode']} | "
                f"{d['accuracy']:+.4f} | {d['format_rate']:+.4f} | {d['in_prompt_rate']:+.4f} |"
            )
        s = self.summary
        if s.get("a") is not None:
            lines.append("")
            lines.append("| model | ID | OOD | gap |")
            lines.append("|---|---|---|---|")
            for side in ("a", "b"):
                v = s[side]
                lines.append(f"| {v['model_id']} | {v['id']:.4f} | {v['ood']:.4f} | {v['gap']:+.4f} |")
        return "\n".join(lines) + "\n"


def generalization_gap(id_acc: float, ood_acc: float) -> float:
    return id_acc - ood_acc


def summarize(matrix: EvalMatrix, scenario: str, train_modality: str = "image") -> dict:
    id_key, ood_key = id_ood_keys(scenario, train_modality)
    by_key = {c.key: c for c in matrix.cells}
    if id_key not in by_key or ood_key not in by_key:
        raise UsageError(f"matrix lacks the ID/OOD cells of scenario {scenario!r}")
    i, o = by_key[id_key].accuracy, by_key[ood_key].accuracy
    return {"model_id": matrix.model_id, "id": i, "ood": o, "gap": generalization_gap(i, o)}


def compare(a: EvalMatrix, b: EvalMatrix, scenario: str | None = None, train_modality: str | None = None) -> DeltaReport:
    """Per-cell ``b - a`` deltas plus ID/OOD/gap summaries when the scenario is known."""
    if a.keys() != b.keys():
        raise UsageError("matrices cover different grids")
    by_b = {c.key: c for c in b.cells}
    cells = []
    for ca in a.cells:
        cb = by_b[ca.key]
        cells.append(
            {
                "prompt_variant": ca.prompt_variant,
                "split": ca.split,
                "modality": ca.modality,
                "reasoning_mode": ca.reasoning_mode,
                "mismatch": ca.mismatch,
                "accuracy": cb.accuracy - ca.accuracy,
                "format_rate": cb.format_rate - ca.format_rate,
                "in_prompt_rate": cb.in_prompt_rate - ca.in_prompt_rate,
            }
        )
    scenario = scenario or a.config.get("scenario")
    train_modality = train_modality or a.config.get("train_modality", "image")
    summary: dict = {"a": None, "b": None}
    if scenario:
        sa, sb = summarize(a, scenario, train_modality), summarize(b, scenario, train_modality)
        summary = {
            "scenario": scenario,
            "a": sa,
            "b": sb,
            "delta_id": sb["id"] - sa["id"],
            "delta_ood": sb["ood"] - sa["ood"],
            "delta_gap": sb["gap"] - sa["gap"],
        }
    return DeltaReport(cells, summary)


def mean_matrix(matrices: Sequence[EvalMatrix], model_id: str = "mean") -> EvalMatrix:
    """Cell-wise average of seed replicates over one grid."""
    if not matrices:
        raise UsageError("no matrices to average")
    keys = matrices[0].keys()
    if any(m.keys() != keys for m in matrices):
        raise UsageError("matrices cover different grids")
    cells = []
    for c in matrices[0].cells:
        group = [next(x for x in m.cells if x.key == c.key) for m in matrices]
        cells.append(
            EvalCell(
                c.prompt_variant,
                c.split,
                c.modality,
                c.reasoning_mode,
                c.n,
                float(np.mean([x.accuracy for x in group])),
                float(np.mean([x.format_rate for x in group])),
                float(np.mean([x.in_prompt_rate for x in group])),
            )
        )
    return EvalMatrix(model_id, "", cells, dict(matrices[0].config))
