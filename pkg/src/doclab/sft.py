"""Supervised fine-tuning: cross-entropy on response tokens only."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContextOverflowError, UsageError
from .policy import ParamStore, forward, forward_batch, pad_batch
from .synthdocs import SftExample
from .textio import A_CLOSE, A_OPEN
from .trainlog import TrainingLog

SFT_LOG_COLUMNS = ["step", "loss", "token_accuracy"]


@dataclass
class SftConfig:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 3e-3
    seed: int = 0
    shuffle: bool = True
    max_grad_norm: float = 1.0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or not self.lr > 0:
            raise ConfigError("sft epochs must be >= 0, batch_size and lr positive")


def _shifted(example: SftExample, context_length: int):
    seq = list(example.prompt) + list(example.response)
    if len(seq) - 1 > context_length:
        raise ContextOverflowError(f"example of length {len(seq)} exceeds context {context_length}")
    inputs, targets = seq[:-1], seq[1:]
    p = len(example.prompt)
    mask = [i >= p - 1 for i in range(len(targets))]
    return inputs, targets, mask


def sft_loss(example: SftExample, store: ParamStore, adapters_on: bool = True) -> nc.Tensor:
    """Mean cross-entropy over the response positions of one example."""
    inputs, targets, mask = _shifted(example, store.config.context_length)
    logits = forward(inputs, store, adapters_on)
    return nc.softmax_cross_entropy(logits, targets, mask)


def _label_positions(targets: Sequence[int], mask: Sequence[bool]) -> list[int]:
    """Target positions strictly inside the answer block."""
    out, inside = [], False
    for i, (t, m) in enumerate(zip(targets, mask)):
        if not m:
            continue
        if t == A_OPEN:
            inside = True
            continue
        if t == A_CLOSE:
            inside = False
        if inside:
            out.append(i)
    return out


def sft_batch_loss(
    examples: Sequence[SftExample], store: ParamStore, adapters_on: bool = True
) -> tuple[nc.Tensor, float]:
    """Batch loss (mean over all response tokens) and gold-label token accuracy."""
    shifted = [_shifted(e, store.config.context_length) for e in examples]
    ids = pad_batch([s[0] for s in shifted])
    targets = np.zeros_like(ids)
    mask = np.zeros(ids.shape, dtype=bool)
    for b, (_, t, m) in enumerate(shifted):
        targets[b, : len(t)] = t
        mask[b, : len(m)] = m
    logits = forward_batch(ids, store, adapters_on)
    loss = nc.softmax_cross_entropy(logits, targets, mask)
    hits = total = 0
    for b, (_, t, m) in enumerate(shifted):
        pos = _label_positions(t, m)
        if pos:
            pred = logits.data[b, pos].argmax(axis=-1)
            hits += int((pred == np.asarray(t)[pos]).sum())
            total += len(pos)
    return loss, (hits / total if total else 0.0)


def train_sft(
    dataset: Sequence[SftExample],
    cfg: SftConfig,
    store: ParamStore,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainingLog:
    """Adam on the store's trainable parameters (the adapters once the base is frozen)."""
    cfg.validate()
    if not dataset:
        raise UsageError("empty SFT dataset")
    params = store.trainable()
    if not params:
        raise UsageError("store has no trainable parameters")
    opt = nc.OptimizerState(lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    log = TrainingLog(SFT_LOG_COLUMNS)
    step = 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = np.arange(n)
        if cfg.shuffle:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            with nc.Tape() as tape:
                loss, acc = sft_batch_loss(batch, store)
            nc.backward(loss, tape)
            nc.optimizer_step(params, opt)
            store.bump()
            step += 1
            log.append(step=step, loss=loss.item(), token_accuracy=acc)
            if on_step is not None:
                on_step(step, loss.item())
    return log
