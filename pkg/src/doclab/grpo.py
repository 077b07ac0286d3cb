"""Group relative policy optimisation with verifiable rewards.

Each step samples G responses per prompt from the current adapters, scores
them with the rule-based rewards, standardises rewards within the group and
takes one Adam step on the clipped per-token surrogate minus a k3 KL penalty
against the adapters-off reference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, NonFiniteError, UsageError
from .policy import ParamStore, Rollout, generate, response_logprobs
from .rewards import RewardContext, total_reward
from .textio import Vocab, parse_response
from .trainlog import TrainingLog

GRPO_LOG_COLUMNS = [
    "step",
    "mean_total_reward",
    "mean_format_reward",
    "sample_accuracy",
    "mean_kl",
    "degenerate_fraction",
    "mean_response_length",
]


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    beta: float = 0.2
    temperature: float = 1.0
    max_new: int = 48
    steps: int = 500
    prompts_per_step: int = 4
    seed: int = 0
    lr: float = 1e-3
    max_grad_norm: float | None = 1.0

    def validate(self) -> None:
        if self.group_size < 2:
            raise ConfigError("group_size must be at least 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if not self.temperature > 0 or self.max_new <= 0:
            raise ConfigError("temperature and max_new must be positive")
        if self.steps < 0 or self.prompts_per_step <= 0 or not self.lr > 0:
            raise ConfigError("steps must be >= 0, prompts_per_step and lr positive")


@dataclass
class GroupBatch:
    prompt: list[int]
    rollouts: list[Rollout]
    gold: str
    degenerate: bool = False

    def __post_init__(self):
        if len(self.rollouts) < 2:
            raise UsageError("a group needs at least two rollouts")
        if any(r.prompt != self.prompt for r in self.rollouts):
            raise UsageError("all rollouts in a group must share the prompt")

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward.total for r in self.rollouts], dtype=np.float64)

    @property
    def advantages(self) -> np.ndarray:
        return np.array([r.advantage for r in self.rollouts], dtype=np.float64)


def group_seeds(seed, n: int) -> list[int]:
    """Independent per-rollout seeds spawned from one master seed."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def sample_group(
    prompt: Sequence[int],
    store: ParamStore,
    cfg: GrpoConfig,
    gold: str,
    vocab: Vocab,
    seed=0,
    greedy: bool = False,
) -> GroupBatch:
    prompt = [int(t) for t in prompt]
    rollouts = generate(
        [prompt] * cfg.group_size,
        store,
        temperature=cfg.temperature,
        max_new=cfg.max_new,
        seeds=group_seeds(seed, cfg.group_size),
        greedy=greedy,
    )
    for r in rollouts:
        r.gold = gold
        r.parsed = parse_response(r.response, vocab)
        r.reward = total_reward(RewardContext(gold, r.parsed))
    return compute_advantages(GroupBatch(prompt, rollouts, gold))


def compute_advantages(batch: GroupBatch) -> GroupBatch:
    r = batch.rewards
    std = r.std()
    if std == 0.0:
        adv = np.zeros_like(r)
    else:
        adv = (r - r.mean()) / std
    for roll, a in zip(batch.rollouts, adv):
        roll.advantage = float(a)
    batch.degenerate = bool(std == 0.0)
    return batch


def k3(logp_ref: np.ndarray, logp: np.ndarray) -> np.ndarray:
    d = logp_ref - logp
    return np.exp(d) - d - 1.0


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """Plain numpy form of the per-token min/clip term."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


@dataclass
class LossParts:
    loss: nc.Tensor
    surrogate: float
    kl: float
    ratio_max: float
    stats: dict = field(default_factory=dict)


def grpo_terms(batches: GroupBatch | Sequence[GroupBatch], store: ParamStore, cfg: GrpoConfig) -> LossParts:
    """Negated objective averaged over groups, rollouts (1/G) and tokens (1/|o_i|)."""
    if isinstance(batches, GroupBatch):
        batches = [batches]
    if not store.adapters:
        raise UsageError("GRPO needs adapters; the adapters-off model is the reference")
    rolls = [r for b in batches for r in b.rollouts]
    for r in rolls:
        if r.logprobs is None or len(r.logprobs) != len(r.generated):
            raise UsageError("rollout lacks sampling log-probs for its generated tokens")
    seqs = [r.context + r.generated for r in rolls]
    plens = [len(r.context) for r in rolls]
    logp, lengths = response_logprobs(seqs, plens, store, True, cfg.temperature)
    ref, _ = response_logprobs(seqs, plens, store, False, cfg.temperature)
    dtype = logp.data.dtype
    sampled = np.concatenate([r.logprobs for r in rolls]).astype(dtype)
    fresh = np.repeat([r.snapshot is not None and r.snapshot == store.snapshot for r in rolls], lengths)
    # rollouts drawn from the current parameters have theta_old == theta; the
    # detached teacher-forced values make the ratios exactly one, whereas the
    # cached sampling path agrees only to rounding
    old = np.where(fresh, logp.data, sampled)
    drift = float(np.abs(logp.data - sampled)[fresh].max()) if fresh.any() else 0.0
    adv = np.repeat([r.advantage for r in rolls], lengths).astype(dtype)
    weights = _token_weights(batches, lengths).astype(dtype)

    ratio = nc.exp(nc.sub(logp, old))
    if not np.all(np.isfinite(ratio.data)):
        bad = int(np.argmax(~np.isfinite(ratio.data)))
        raise NonFiniteError(
            f"non-finite ratio at token {bad}: logp={logp.data[bad]!r} old={old[bad]!r}"
        )
    unclipped = nc.mul(ratio, adv)
    clipped = nc.mul(nc.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv)
    surrogate = nc.minimum(unclipped, clipped)
    d = nc.sub(ref.data.astype(dtype), logp)
    kl = nc.sub(nc.sub(nc.exp(d), d), np.ones_like(d.data))
    per_token = nc.sub(surrogate, nc.scale(kl, cfg.beta))
    loss = nc.neg(nc.sum(nc.mul(per_token, weights)))
    return LossParts(
        loss=loss,
        surrogate=float((surrogate.data * weights).sum()),
        kl=float((kl.data * weights).sum()),
        ratio_max=float(ratio.data.max()),
        stats={"ratio_min": float(ratio.data.min()), "sampling_drift": drift, "fresh_fraction": float(fresh.mean())},
    )


def _token_weights(batches: Sequence[GroupBatch], lengths: np.ndarray) -> np.ndarray:
    out, i = [], 0
    for b in batches:
        g = len(b.rollouts)
        for _ in b.rollouts:
            n = int(lengths[i])
            out.append(np.full(n, 1.0 / (len(batches) * g * n)))
            i += 1
    return np.concatenate(out)


def grpo_loss(batches: GroupBatch | Sequence[GroupBatch], store: ParamStore, cfg: GrpoConfig) -> nc.Tensor:
    return grpo_terms(batches, store, cfg).loss


def _trace_rows(step: int, batches: Sequence[GroupBatch], vocab: Vocab):
    for gi, b in enumerate(batches):
        for ri, r in enumerate(b.rollouts):
            yield {
                "step": step,
                "group": gi,
                "rollout": ri,
                "gold": b.gold,
                "response": vocab.decode(r.response),
                "label": r.parsed.label,
                "format": r.reward.format,
                "classification": r.reward.classification,
                "total": r.reward.total,
                "advantage": r.advantage,
            }


def train_grpo(
    dataset: Sequence[tuple[Sequence[int], str]],
    cfg: GrpoConfig,
    store: ParamStore,
    vocab: Vocab,
    on_step: Callable[[int, dict], None] | None = None,
    trace_path: str | Path | None = None,
) -> TrainingLog:
    """Run ``cfg.steps`` updates over (prompt tokens, gold label) pairs.

    Row ``k`` of the log describes the samples drawn before update ``k + 1``,
    so row 0 measures the initial policy.
    """
    cfg.validate()
    if not dataset:
        raise UsageError("empty GRPO dataset")
    if not store.adapters:
        raise UsageError("inject adapters before GRPO training")
    params = store.trainable()
    opt = nc.OptimizerState(lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    log = TrainingLog(GRPO_LOG_COLUMNS)
    trace = open(trace_path, "w") if trace_path is not None else None
    n = len(dataset)
    order: list[int] = []
    epoch = 0
    try:
        for step in range(cfg.steps):
            picks = []
            while len(picks) < min(cfg.prompts_per_step, n):
                if not order:
                    order = list(np.random.default_rng([cfg.seed, 1, epoch]).permutation(n))
                    epoch += 1
                picks.append(int(order.pop(0)))
            batches = [
                sample_group(dataset[i][0], store, cfg, dataset[i][1], vocab, seed=[cfg.seed, step, j])
                for j, i in enumerate(picks)
            ]
            with nc.Tape() as tape:
                parts = grpo_terms(batches, store, cfg)
            nc.backward(parts.loss, tape)
            nc.optimizer_step(params, opt)
            store.bump()

            rolls = [r for b in batches for r in b.rollouts]
            row = dict(
                step=step,
                mean_total_reward=float(np.mean([r.reward.total for r in rolls])),
                mean_format_reward=float(np.mean([r.reward.format for r in rolls])),
                sample_accuracy=float(np.mean([r.reward.classification for r in rolls])),
                mean_kl=parts.kl,
                degenerate_fraction=float(np.mean([b.degenerate for b in batches])),
                mean_response_length=float(np.mean([len(r.generated) for r in rolls])),
            )
            log.append(**row)
            if trace is not None:
                for rec in _trace_rows(step, batches, vocab):
                    trace.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_step is not None:
                on_step(step, row)
    finally:
        if trace is not None:
            trace.close()
    return log
