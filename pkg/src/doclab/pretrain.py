"""Full-parameter pretraining of the base policy.

Fine-tuning methods need a starting model that already follows the prompt's
class list and the response format (group sampling learns nothing when every
reward in a group is equal). The base is trained on a generic stream of
documents where only part of every class lexicon is visible, with randomly
chosen and ordered class lists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError
from .policy import ParamStore, PolicyConfig, init_base
from .sft import sft_batch_loss
from .synthdocs import GenConfig, SftExample, pretraining_stream
from .textio import Vocab, build_prompt, canonical_response
from .trainlog import TrainingLog


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    seed: int = 0
    known_fraction: float = 0.5
    empty_reasoning_rate: float = 0.1
    absent_rate: float = 0.4
    unknown_noise_rate: float = 0.2
    copy_rate: float = 0.15
    max_grad_norm: float = 1.0

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size <= 0 or not self.lr > 0:
            raise ConfigError("pretrain steps must be >= 0, batch_size and lr positive")
        if not 0 < self.known_fraction <= 1:
            raise ConfigError("known_fraction must lie in (0, 1]")


def pretrain_base(
    vocab: Vocab,
    policy_config: PolicyConfig,
    cfg: PretrainConfig,
    gen: GenConfig | None = None,
) -> tuple[ParamStore, TrainingLog]:
    cfg.validate()
    store = init_base(policy_config, cfg.seed)
    params = store.trainable()
    opt = nc.OptimizerState(lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    stream = pretraining_stream(
        cfg.seed,
        cfg.known_fraction,
        gen,
        cfg.empty_reasoning_rate,
        cfg.absent_rate,
        cfg.unknown_noise_rate,
        cfg.copy_rate,
    )
    log = TrainingLog(["step", "loss", "token_accuracy"])
    for step in range(1, cfg.steps + 1):
        batch = []
        for _ in range(cfg.batch_size):
            spec, reasoning, label = next(stream)
            batch.append(SftExample(build_prompt(spec, vocab), canonical_response(reasoning, label, vocab), label))
        # linear warmup then cosine decay to 10%
        if step <= cfg.warmup:
            opt.lr = cfg.lr * step / max(1, cfg.warmup)
        else:
            frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
            opt.lr = cfg.lr * (0.1 + 0.45 * (1 + np.cos(np.pi * frac)))
        with nc.Tape() as tape:
            loss, acc = sft_batch_loss(batch, store)
        nc.backward(loss, tape)
        nc.optimizer_step(params, opt)
        log.append(step=step, loss=loss.item(), token_accuracy=acc)
    store.bump()
    return store, log
