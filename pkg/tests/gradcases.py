"""Random float64 instances for finite-difference checks of every primitive and both losses."""

import numpy as np

from doclab import numcore as nc
from doclab.grpo import GroupBatch, GrpoConfig, grpo_loss
from doclab.policy import PolicyConfig, Rollout, init_base, inject_adapters, logprobs
from doclab.sft import SftExample, sft_loss


def _t(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        x = np.abs(x) + lo
    return nc.Tensor(x.astype(np.float64), requires_grad=True)


def _project(out, rng):
    """Reduce to a scalar through fixed random weights so every output entry matters."""
    w = rng.normal(size=out.shape)
    return lambda o: nc.sum(nc.mul(o, w))


def _unary(fn, lo=None):
    def case(rng):
        x = _t(rng, *rng.integers(1, 6, size=2), lo=lo)
        proj = _project(fn(x), np.random.default_rng(rng.integers(1 << 31)))
        return (lambda: proj(fn(x))), [x]

    return case


def _binary(fn, broadcast=False):
    def case(rng):
        m, n = rng.integers(1, 6, size=2)
        a = _t(rng, m, n)
        b = _t(rng, 1, n) if broadcast else _t(rng, m, n)
        proj = _project(fn(a, b), np.random.default_rng(rng.integers(1 << 31)))
        return (lambda: proj(fn(a, b))), [a, b]

    return case


def _minimum(rng):
    m, n = rng.integers(1, 6, size=2)
    a = _t(rng, m, n)
    b = _t(rng, m, n)
    # keep entries away from ties, where the function has a kink
    b.data = np.where(np.abs(a.data - b.data) < 0.1, b.data + 0.3, b.data)
    proj = _project(nc.minimum(a, b), np.random.default_rng(1))
    return (lambda: proj(nc.minimum(a, b))), [a, b]


def _clip(rng):
    x = _t(rng, *rng.integers(1, 6, size=2))
    x.data = np.where(np.abs(np.abs(x.data) - 0.5) < 0.05, x.data + 0.2, x.data)
    proj = _project(nc.clip(x, -0.5, 0.5), np.random.default_rng(2))
    return (lambda: proj(nc.clip(x, -0.5, 0.5))), [x]


def _sum_axis(rng):
    x = _t(rng, 3, 4, 2)
    axis = int(rng.integers(0, 3))
    proj = _project(nc.sum(x, axis=axis), np.random.default_rng(3))
    return (lambda: proj(nc.sum(x, axis=axis))), [x]


def _mean(rng):
    x = _t(rng, *rng.integers(1, 6, size=2))
    w = rng.normal()
    return (lambda: nc.scale(nc.mean(nc.mul(x, x)), w)), [x]


def _reshape_transpose(rng):
    x = _t(rng, 2, 3, 4)
    proj = _project(nc.transpose(nc.reshape(x, (4, 6)), (1, 0)), np.random.default_rng(4))
    return (lambda: proj(nc.transpose(nc.reshape(x, (4, 6)), (1, 0)))), [x]


def _take(rng):
    x = _t(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)
    proj = _project(nc.take(x, idx), np.random.default_rng(5))
    return (lambda: proj(nc.take(x, idx))), [x]


def _matmul(rng):
    m, k, n = rng.integers(1, 7, size=3)
    a, b = _t(rng, 2, m, k), _t(rng, k, n)
    proj = _project(nc.matmul(a, b), np.random.default_rng(6))
    return (lambda: proj(nc.matmul(a, b))), [a, b]


def _linear(rng):
    m, k, d = rng.integers(1, 7, size=3)
    x, w = _t(rng, m, k), _t(rng, d, k)
    proj = _project(nc.linear(x, w), np.random.default_rng(7))
    return (lambda: proj(nc.linear(x, w))), [x, w]


def _embedding(rng):
    table = _t(rng, 6, 4)
    ids = rng.integers(0, 6, size=(2, 5))
    proj = _project(nc.embedding(table, ids), np.random.default_rng(8))
    return (lambda: proj(nc.embedding(table, ids))), [table]


def _layer_norm(rng):
    x, g, b = _t(rng, 3, 5), _t(rng, 5), _t(rng, 5)
    proj = _project(nc.layer_norm(x, g, b), np.random.default_rng(9))
    return (lambda: proj(nc.layer_norm(x, g, b))), [x, g, b]


def _attention(rng):
    T, hd = rng.integers(1, 6), rng.integers(1, 5)
    q, k, v = (_t(rng, 2, T, hd) for _ in range(3))
    proj = _project(nc.causal_attention(q, k, v), np.random.default_rng(10))
    return (lambda: proj(nc.causal_attention(q, k, v))), [q, k, v]


def _cross_entropy(rng):
    n, V = rng.integers(2, 7), rng.integers(2, 8)
    logits = _t(rng, n, V)
    targets = rng.integers(0, V, size=n)
    mask = rng.random(n) < 0.6
    mask[0] = True
    return (lambda: nc.softmax_cross_entropy(logits, targets, mask)), [logits]


def _log_softmax_gather(rng):
    n, V = rng.integers(1, 7), rng.integers(2, 8)
    logits = _t(rng, n, V)
    targets = rng.integers(0, V, size=n)
    temp = float(rng.uniform(0.5, 2.0))
    proj = _project(nc.log_softmax_gather(logits, targets, temp), np.random.default_rng(11))
    return (lambda: proj(nc.log_softmax_gather(logits, targets, temp))), [logits]


PRIMITIVES = {
    "add": _binary(nc.add, broadcast=True),
    "sub": _binary(nc.sub, broadcast=True),
    "mul": _binary(nc.mul, broadcast=True),
    "scale": _unary(lambda x: nc.scale(x, 1.7)),
    "neg": _unary(nc.neg),
    "exp": _unary(nc.exp),
    "log": _unary(nc.log, lo=0.2),
    "clip": _clip,
    "minimum": _minimum,
    "sum": _sum_axis,
    "mean": _mean,
    "reshape_transpose": _reshape_transpose,
    "take": _take,
    "matmul": _matmul,
    "linear": _linear,
    "embedding": _embedding,
    "layer_norm": _layer_norm,
    "gelu": _unary(nc.gelu),
    "causal_attention": _attention,
    "softmax_cross_entropy": _cross_entropy,
    "log_softmax_gather": _log_softmax_gather,
}


def _toy_store(rng, vocab_size=12):
    cfg = PolicyConfig(
        vocab_size=vocab_size, context_length=16, d_model=8, n_layers=1, n_heads=2, lora_rank=1, lora_alpha=2.0,
        dtype="float64",
    )
    store = inject_adapters(init_base(cfg, seed=int(rng.integers(1 << 31))), seed=int(rng.integers(1 << 31)))
    for pair in store.adapters.values():
        pair.B.data = rng.normal(0.0, 0.2, pair.B.shape)
    return store


def _adapter_params(store):
    return [p for pair in store.adapters.values() for p in (pair.A, pair.B)]


def sft_case(rng):
    store = _toy_store(rng)
    prompt = [int(t) for t in rng.integers(7, 12, size=rng.integers(2, 5))]
    response = [int(t) for t in rng.integers(0, 12, size=rng.integers(1, 5))]
    ex = SftExample(prompt, response, "x")
    return (lambda: sft_loss(ex, store)), _adapter_params(store)


def grpo_case(rng):
    store = _toy_store(rng)
    cfg = GrpoConfig(group_size=3, clip_eps=0.2, beta=float(rng.uniform(0.01, 0.5)), temperature=1.0)
    prompt = [int(t) for t in rng.integers(7, 12, size=3)]
    rollouts = []
    for _ in range(cfg.group_size):
        resp = [int(t) for t in rng.integers(1, 12, size=rng.integers(1, 5))]
        lp = logprobs(prompt + resp, len(prompt), store)
        # old-policy log-probs offset so that some ratios land outside the clip
        # range; offsets stay clear of the clip boundaries
        shift = rng.choice([-0.5, -0.05, 0.05, 0.5], size=len(resp))
        roll = Rollout(prompt=prompt, response=resp, logprobs=lp + shift)
        roll.advantage = float(rng.normal())
        rollouts.append(roll)
    batch = GroupBatch(prompt, rollouts, "x")
    return (lambda: grpo_loss(batch, store, cfg)), _adapter_params(store)


LOSSES = {"sft_loss": sft_case, "grpo_loss": grpo_case}
