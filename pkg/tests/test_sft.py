import math

import numpy as np
import pytest

from doclab import numcore as nc
from doclab.errors import ContextOverflowError, UsageError
from doclab.policy import forward, init_base, inject_adapters, uniform_store
from doclab.sft import SftConfig, _shifted, sft_batch_loss, sft_loss, train_sft
from doclab.synthdocs import TRAIN_CLASSES, make_sft_targets
from conftest import tiny_config


@pytest.fixture
def examples(small_dataset, vocab):
    train = [s for s in small_dataset if s.split == "train" and s.label in TRAIN_CLASSES and s.modality == "ocr"]
    return make_sft_targets(train[:12], vocab)


def test_uniform_model_loss_is_log_v(vocab, examples):
    store = uniform_store(tiny_config(len(vocab), context_length=128))
    assert sft_loss(examples[0], store).item() == pytest.approx(math.log(len(vocab)), abs=1e-12)
    loss, _ = sft_batch_loss(examples[:4], store)
    assert loss.item() == pytest.approx(math.log(len(vocab)), abs=1e-12)


def test_prompt_targets_do_not_matter(vocab, examples):
    store = inject_adapters(init_base(tiny_config(len(vocab), context_length=128), 0), 0)
    ex = examples[0]
    inputs, targets, mask = _shifted(ex, 128)
    logits = nc.Tensor(forward(inputs, store).data, requires_grad=True)
    base = nc.softmax_cross_entropy(logits, targets, mask).item()
    bent = list(targets)
    for i, m in enumerate(mask):
        if not m:
            bent[i] = (bent[i] + 7) % len(vocab)
    assert nc.softmax_cross_entropy(logits, bent, mask).item() == base
    with nc.Tape() as tape:
        loss = nc.softmax_cross_entropy(logits, targets, mask)
    nc.backward(loss, tape)
    prompt_rows = [i for i, m in enumerate(mask) if not m]
    assert len(prompt_rows) == len(ex.prompt) - 1
    assert not logits.grad[prompt_rows].any()


def test_overlength_rejected(vocab, examples):
    store = init_base(tiny_config(len(vocab), context_length=16), 0)
    with pytest.raises(ContextOverflowError):
        sft_loss(examples[0], store)


def _store(vocab, seed=0):
    return inject_adapters(init_base(tiny_config(len(vocab), context_length=128, dtype="float32"), seed), seed)


def test_zero_epochs_leaves_adapters(vocab, examples):
    store = _store(vocab)
    before = store.adapter_hash()
    log = train_sft(examples, SftConfig(epochs=0), store)
    assert store.adapter_hash() == before and len(log.rows) == 0


def test_training_lowers_probe_loss_and_keeps_base(vocab, examples):
    store = _store(vocab)
    base = store.base_hash()
    probe = examples[:6]
    before = sft_batch_loss(probe, store)[0].item()
    log = train_sft(examples, SftConfig(epochs=3, batch_size=4, lr=3e-3), store)
    assert sft_batch_loss(probe, store)[0].item() < before
    assert store.base_hash() == base
    assert log.columns == ["step", "loss", "token_accuracy"] and len(log.rows) == 9


def test_same_seed_same_adapters(vocab, examples):
    a, b = _store(vocab), _store(vocab)
    cfg = SftConfig(epochs=1, batch_size=4, seed=5)
    la = train_sft(examples, cfg, a)
    lb = train_sft(examples, cfg, b)
    assert a.adapter_hash() == b.adapter_hash()
    assert la.to_csv() == lb.to_csv()


def test_empty_dataset(vocab):
    with pytest.raises(UsageError):
        train_sft([], SftConfig(), _store(vocab))


def test_label_token_accuracy_counts_answer_span(vocab, examples):
    store = _store(vocab)
    _, acc = sft_batch_loss(examples[:3], store)
    assert 0.0 <= acc <= 1.0
