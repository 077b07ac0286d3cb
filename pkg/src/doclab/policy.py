"""Decoder-only transformer policy with low-rank adapters on every projection.

Every adapted layer computes ``W0 x + scale * B (A x)`` where ``scale = alpha / r``.
``B`` starts at zero, so a freshly adapted model is exactly the base model, and
running with ``adapters_on=False`` always reproduces the frozen base model; that
is how the reference policy for the KL penalty is obtained without a second copy.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import ContextOverflowError, DegenerateInputError, IntegrityError, ShapeError
from .numcore import Tensor
from .textio import EOS, PAD

ADAPTED = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2")


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    context_length: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("vocab_size", "context_length", "d_model", "n_layers", "n_heads", "lora_rank"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not self.lora_alpha > 0:
            raise ValueError("lora_alpha must be positive")
        # smallest adapted matrix is d_model x d_model
        if not self.lora_rank < self.d_model / 4:
            raise ValueError(f"lora_rank {self.lora_rank} must be < d_model/4 = {self.d_model / 4}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank


@dataclass
class AdapterPair:
    A: Tensor  # r x k
    B: Tensor  # d x r
    scale: float
    enabled: bool = True


_STORE_IDS = itertools.count()


class ParamStore:
    """Base weights (optionally frozen) plus adapter pairs keyed by base weight name.

    ``snapshot`` identifies the current parameter values within this process:
    it changes on every :meth:`bump` and differs between store objects.
    """

    def __init__(
        self,
        config: PolicyConfig,
        base: dict[str, Tensor],
        adapters: dict[str, AdapterPair] | None = None,
        version: int = 0,
    ):
        self.config = config
        self.base = base
        self.adapters = adapters or {}
        self.version = version
        self._uid = next(_STORE_IDS)
        for name in self.adapters:
            if name not in base:
                raise IntegrityError(f"adapter {name!r} has no base weight")
        self.frozen = bool(self.adapters)
        self._sync_requires_grad()

    def _sync_requires_grad(self) -> None:
        for t in self.base.values():
            t.requires_grad = not self.frozen
        for pair in self.adapters.values():
            pair.A.requires_grad = pair.B.requires_grad = True

    def freeze_base(self, frozen: bool = True) -> None:
        self.frozen = frozen
        self._sync_requires_grad()

    def trainable(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if not self.frozen:
            out.update(self.base)
        for name, pair in self.adapters.items():
            out[f"{name}.lora_A"] = pair.A
            out[f"{name}.lora_B"] = pair.B
        return out

    def zero_grad(self) -> None:
        for t in self.base.values():
            t.grad = None
        for pair in self.adapters.values():
            pair.A.grad = pair.B.grad = None

    def base_hash(self) -> str:
        return _hash_tensors((name, self.base[name].data) for name in sorted(self.base))

    def adapter_hash(self) -> str:
        items = []
        for name in sorted(self.adapters):
            items.append((name + ".A", self.adapters[name].A.data))
            items.append((name + ".B", self.adapters[name].B.data))
        return _hash_tensors(items)

    def content_hash(self) -> str:
        return hashlib.sha256((self.base_hash() + self.adapter_hash()).encode()).hexdigest()

    def copy(self) -> "ParamStore":
        base = {k: Tensor(v.data.copy(), name=k) for k, v in self.base.items()}
        adapters = {
            k: AdapterPair(Tensor(p.A.data.copy()), Tensor(p.B.data.copy()), p.scale, p.enabled)
            for k, p in self.adapters.items()
        }
        store = ParamStore(self.config, base, adapters, self.version)
        store.freeze_base(self.frozen)
        return store

    def bump(self) -> None:
        self.version += 1

    @property
    def snapshot(self) -> tuple[int, int]:
        return (self._uid, self.version)


def _hash_tensors(items) -> str:
    h = hashlib.sha256()
    for name, arr in items:
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def init_base(config: PolicyConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    d, V = config.d_model, config.vocab_size
    resid_std = 0.02 / np.sqrt(2 * config.n_layers)

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape).astype(dt)

    base = {
        "tok_emb": normal((V, d), 0.02),
        "pos_emb": normal((config.context_length, d), 0.01),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        base[p + "ln1.g"] = np.ones(d, dt)
        base[p + "ln1.b"] = np.zeros(d, dt)
        base[p + "attn.wq"] = normal((d, d), 0.02)
        base[p + "attn.wk"] = normal((d, d), 0.02)
        base[p + "attn.wv"] = normal((d, d), 0.02)
        base[p + "attn.wo"] = normal((d, d), resid_std)
        base[p + "ln2.g"] = np.ones(d, dt)
        base[p + "ln2.b"] = np.zeros(d, dt)
        base[p + "mlp.w1"] = normal((4 * d, d), 0.02)
        base[p + "mlp.b1"] = np.zeros(4 * d, dt)
        base[p + "mlp.w2"] = normal((d, 4 * d), resid_std)
        base[p + "mlp.b2"] = np.zeros(d, dt)
    base["ln_f.g"] = np.ones(d, dt)
    base["ln_f.b"] = np.zeros(d, dt)
    base["head"] = normal((V, d), 0.02)
    return ParamStore(config, {k: Tensor(v, name=k) for k, v in base.items()})


def adapted_names(config: PolicyConfig) -> list[str]:
    return [f"layers.{i}.{m}" for i in range(config.n_layers) for m in ADAPTED]


def inject_adapters(store: ParamStore, seed: int = 0) -> ParamStore:
    """Attach fresh adapters (A ~ N(0, 1/k), B = 0) to every projection; freezes the base."""
    if store.adapters:
        raise IntegrityError("store already carries adapters; merge them first")
    rng = np.random.default_rng(seed)
    cfg = store.config
    r = cfg.lora_rank
    for name in adapted_names(cfg):
        d, k = store.base[name].shape
        A = rng.normal(0.0, 1.0 / np.sqrt(k), size=(r, k)).astype(store.base[name].dtype)
        B = np.zeros((d, r), dtype=store.base[name].dtype)
        store.adapters[name] = AdapterPair(Tensor(A, name=name + ".lora_A"), Tensor(B, name=name + ".lora_B"), cfg.lora_scale)
    store.freeze_base(True)
    store.bump()
    return store


def merge_adapters(store: ParamStore) -> ParamStore:
    """New store whose base weights are ``W0 + scale * B A``; no adapters remain."""
    base = {}
    for name, t in store.base.items():
        pair = store.adapters.get(name)
        w = t.data.copy()
        if pair is not None and pair.enabled:
            delta = (pair.B.data @ pair.A.data) * pair.scale
            if delta.shape != w.shape:
                raise ShapeError(f"adapter product {delta.shape} does not match {name} {w.shape}")
            w = (w + delta).astype(w.dtype)
        base[name] = Tensor(w, name=name)
    return ParamStore(store.config, base, version=store.version + 1)


def cast_store(store: ParamStore, dtype: str) -> ParamStore:
    """Copy with every tensor cast (float64 copies back gradient checks)."""
    cfg = PolicyConfig(**{**asdict(store.config), "dtype": dtype})
    out = store.copy()
    out.config = cfg
    for t in out.base.values():
        t.data = t.data.astype(dtype)
    for p in out.adapters.values():
        p.A.data = p.A.data.astype(dtype)
        p.B.data = p.B.data.astype(dtype)
    return out


# ---------------------------------------------------------------------------
# training-path forward (recorded on the active tape)


def _project(h: Tensor, store: ParamStore, name: str, adapters_on: bool) -> Tensor:
    out = nc.linear(h, store.base[name])
    pair = store.adapters.get(name)
    if adapters_on and pair is not None and pair.enabled:
        low = nc.linear(nc.linear(h, pair.A), pair.B)
        out = nc.add(out, nc.scale(low, pair.scale))
    return out


def _check_ids(ids: np.ndarray, config: PolicyConfig) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ShapeError(f"token id outside vocabulary of size {config.vocab_size}")
    if ids.shape[-1] > config.context_length:
        raise ContextOverflowError(
            f"sequence length {ids.shape[-1]} exceeds context length {config.context_length}"
        )


def hidden_states(ids, store: ParamStore, adapters_on: bool = True) -> Tensor:
    """Final-layer-normed hidden states ``[B, T, d]`` for right-padded ``ids[B, T]``."""
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(ids, store.config)
    cfg = store.config
    B, T = ids.shape
    H, dh = cfg.n_heads, cfg.head_dim
    x = nc.add(nc.embedding(store.base["tok_emb"], ids), nc.embedding(store.base["pos_emb"], np.arange(T)))
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = nc.layer_norm(x, store.base[p + "ln1.g"], store.base[p + "ln1.b"])

        def heads(t):
            return nc.transpose(nc.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = heads(_project(h, store, p + "attn.wq", adapters_on))
        k = heads(_project(h, store, p + "attn.wk", adapters_on))
        v = heads(_project(h, store, p + "attn.wv", adapters_on))
        a = nc.reshape(nc.transpose(nc.causal_attention(q, k, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = nc.add(x, _project(a, store, p + "attn.wo", adapters_on))
        h = nc.layer_norm(x, store.base[p + "ln2.g"], store.base[p + "ln2.b"])
        h = nc.gelu(nc.add(_project(h, store, p + "mlp.w1", adapters_on), store.base[p + "mlp.b1"]))
        x = nc.add(x, nc.add(_project(h, store, p + "mlp.w2", adapters_on), store.base[p + "mlp.b2"]))
    return nc.layer_norm(x, store.base["ln_f.g"], store.base["ln_f.b"])


def forward_batch(ids, store: ParamStore, adapters_on: bool = True) -> Tensor:
    return nc.linear(hidden_states(ids, store, adapters_on), store.base["head"])


def forward(tokens: Sequence[int], store: ParamStore, adapters_on: bool = True) -> Tensor:
    """Causal logits ``[n, V]`` for one token sequence."""
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    logits = forward_batch(ids, store, adapters_on)
    return nc.reshape(logits, logits.shape[1:])


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def response_logprobs(
    seqs: Sequence[Sequence[int]],
    prompt_lens: Sequence[int],
    store: ParamStore,
    adapters_on: bool = True,
    temperature: float = 1.0,
) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced log-probs of every response token, concatenated over the batch.

    Returns the flat tensor and the per-sequence response lengths.
    """
    lengths = np.array([len(s) - p for s, p in zip(seqs, prompt_lens)], dtype=np.int64)
    if (lengths <= 0).any():
        raise DegenerateInputError("empty response")
    ids = pad_batch(seqs)
    T = ids.shape[1]
    rows, targets = [], []
    for b, (s, p) in enumerate(zip(seqs, prompt_lens)):
        pos = np.arange(p - 1, len(s) - 1)
        rows.append(b * T + pos)
        targets.append(np.asarray(s[p:], dtype=np.int64))
    rows_flat = np.concatenate(rows)
    hidden = hidden_states(ids, store, adapters_on)
    picked = nc.take(nc.reshape(hidden, (-1, hidden.shape[-1])), rows_flat)
    logits = nc.linear(picked, store.base["head"])
    return nc.log_softmax_gather(logits, np.concatenate(targets), temperature), lengths


def logprobs(
    tokens: Sequence[int],
    prompt_len: int,
    store: ParamStore,
    adapters_on: bool = True,
    temperature: float = 1.0,
) -> np.ndarray:
    """log pi(o_t | q, o_<t) for the response part of ``tokens`` (no gradient)."""
    out, _ = response_logprobs([list(tokens)], [prompt_len], store, adapters_on, temperature)
    return out.data.copy()


# ---------------------------------------------------------------------------
# cached inference path (plain numpy, never recorded)


class _Runner:
    def __init__(self, store: ParamStore, adapters_on: bool):
        self.cfg = store.config
        self.w = {k: t.data for k, t in store.base.items()}
        self.ad = {}
        if adapters_on:
            for name, pair in store.adapters.items():
                if pair.enabled:
                    self.ad[name] = (pair.A.data, pair.B.data, pair.scale)

    def proj(self, h, name):
        out = h @ self.w[name].T
        if name in self.ad:
            A, B, s = self.ad[name]
            out = out + ((h @ A.T) @ B.T) * s
        return out

    def step(self, ids: np.ndarray, cache: list, offset: int) -> np.ndarray:
        """Advance ``ids[B, n]`` placed at ``offset``; returns logits of the last position."""
        cfg, w = self.cfg, self.w
        Bn, n = ids.shape
        H, dh = cfg.n_heads, cfg.head_dim
        x = w["tok_emb"][ids] + w["pos_emb"][offset : offset + n]
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            h, _, _ = nc.np_layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"])

            def heads(t):
                return t.reshape(Bn, n, H, dh).transpose(0, 2, 1, 3)

            q = heads(self.proj(h, p + "attn.wq"))
            k = heads(self.proj(h, p + "attn.wk"))
            v = heads(self.proj(h, p + "attn.wv"))
            if cache[i] is not None:
                k = np.concatenate([cache[i][0], k], axis=2)
                v = np.concatenate([cache[i][1], v], axis=2)
            cache[i] = (k, v)
            a, _ = nc.np_causal_attention(q, k, v, q_offset=offset)
            a = a.transpose(0, 2, 1, 3).reshape(Bn, n, cfg.d_model)
            x = x + self.proj(a, p + "attn.wo")
            h, _, _ = nc.np_layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"])
            h, _ = nc.np_gelu(self.proj(h, p + "mlp.w1") + w[p + "mlp.b1"])
            x = x + self.proj(h, p + "mlp.w2") + w[p + "mlp.b2"]
        x, _, _ = nc.np_layer_norm(x[:, -1], w["ln_f.g"], w["ln_f.b"])
        return x @ w["head"].T


@dataclass
class Rollout:
    """One sampled response. ``response`` includes forced prefill tokens;
    ``logprobs`` covers only the generated tokens after them."""

    prompt: list[int]
    response: list[int]
    logprobs: np.ndarray
    prefill_len: int = 0
    reward: object = None
    advantage: float = 0.0
    gold: str = ""
    parsed: object = field(default=None, repr=False)
    snapshot: tuple | None = None  # parameters the rollout was sampled from

    @property
    def generated(self) -> list[int]:
        return self.response[self.prefill_len :]

    @property
    def context(self) -> list[int]:
        return self.prompt + self.response[: self.prefill_len]


def generate(
    prompts: Sequence[Sequence[int]],
    store: ParamStore,
    temperature: float = 1.0,
    max_new: int = 64,
    prefill: Sequence[int] = (),
    seeds: Sequence[int] | None = None,
    greedy: bool = False,
    adapters_on: bool = True,
) -> list[Rollout]:
    """Batched autoregressive decoding for prompts of one common length.

    Each row draws from its own generator seeded by ``seeds[i]``, so results do
    not depend on batch composition.
    """
    if not prompts:
        return []
    if len({len(p) for p in prompts}) != 1:
        raise ValueError("generate() needs prompts of equal length; bucket them first")
    if not greedy and not temperature > 0:
        raise ValueError("temperature must be positive (use greedy=True for argmax decoding)")
    if max_new <= 0:
        raise ValueError("max_new must be positive")
    cfg = store.config
    ctx = [list(p) + list(prefill) for p in prompts]
    start = len(ctx[0])
    if start + max_new > cfg.context_length:
        raise ContextOverflowError(
            f"prompt+prefill ({start}) + max_new ({max_new}) exceeds context length {cfg.context_length}"
        )
    ids = np.asarray(ctx, dtype=np.int64)
    _check_ids(ids, cfg)
    nb = len(prompts)
    if seeds is None:
        seeds = list(range(nb))
    rngs = [np.random.default_rng(s) for s in seeds]
    runner = _Runner(store, adapters_on)
    cache: list = [None] * cfg.n_layers
    if all(p == ctx[0] for p in ctx):
        logits = np.repeat(runner.step(ids[:1], cache, 0), nb, axis=0)
        cache = [(np.repeat(k, nb, axis=0), np.repeat(v, nb, axis=0)) for k, v in cache]
    else:
        logits = runner.step(ids, cache, 0)
    out_tokens: list[list[int]] = [[] for _ in range(nb)]
    out_lp: list[list[float]] = [[] for _ in range(nb)]
    done = np.zeros(nb, dtype=bool)
    for t in range(max_new):
        if greedy:
            logp = nc.np_log_softmax(logits.astype(np.float64))
            nxt = logp.argmax(axis=-1)
        else:
            logp = nc.np_log_softmax(logits.astype(np.float64) / temperature)
            probs = np.exp(logp)
            cdf = np.cumsum(probs, axis=-1)
            nxt = np.empty(nb, dtype=np.int64)
            for b in range(nb):
                u = rngs[b].random() * cdf[b, -1]
                nxt[b] = min(int(np.searchsorted(cdf[b], u, side="right")), cdf.shape[1] - 1)
        for b in range(nb):
            if not done[b]:
                out_tokens[b].append(int(nxt[b]))
                out_lp[b].append(float(logp[b, nxt[b]]))
                if nxt[b] == EOS:
                    done[b] = True
        if done.all() or t == max_new - 1:
            break
        logits = runner.step(nxt[:, None], cache, start + t)
    return [
        Rollout(
            prompt=list(prompts[b]),
            response=list(prefill) + out_tokens[b],
            logprobs=np.asarray(out_lp[b]),
            prefill_len=len(prefill),
            snapshot=store.snapshot if adapters_on else None,
        )
        for b in range(nb)
    ]


def sample(
    prompt: Sequence[int],
    store: ParamStore,
    temperature: float = 1.0,
    max_new: int = 64,
    prefill: Sequence[int] = (),
    seed: int = 0,
    greedy: bool = False,
    adapters_on: bool = True,
) -> Rollout:
    return generate([prompt], store, temperature, max_new, prefill, [seed], greedy, adapters_on)[0]


# ---------------------------------------------------------------------------
# checkpoint archive: magic, u64 header length, JSON header, little-endian blobs

_MAGIC = b"DLCKPT01"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, store: ParamStore, adapters_only: bool = False) -> str:
    """Write ``store``; returns the sha256 of the file bytes."""
    tensors: list[tuple[str, np.ndarray]] = []
    if not adapters_only:
        tensors += [(f"base/{k}", store.base[k].data) for k in sorted(store.base)]
    elif not store.adapters:
        raise IntegrityError("adapter-only checkpoint requested but store has no adapters")
    adapters_meta = {}
    for name in sorted(store.adapters):
        pair = store.adapters[name]
        tensors.append((f"adapter/{name}/A", pair.A.data))
        tensors.append((f"adapter/{name}/B", pair.B.data))
        adapters_meta[name] = {"scale": pair.scale, "enabled": pair.enabled}
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "adapters" if adapters_only else "full",
        "config": asdict(store.config),
        "base_hash": store.base_hash(),
        "adapters": adapters_meta,
        "frozen": store.frozen,
        "version": store.version,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = _MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def _read_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint archive")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported format version {header.get('format_version')}")
    body = raw[16 + n :]
    arrays = {}
    for e in header["tensors"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise IntegrityError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header, arrays


def load_checkpoint(path: str | Path, base: ParamStore | None = None) -> ParamStore:
    """Load a full checkpoint, or an adapter-only one on top of ``base``."""
    header, arrays = _read_archive(path)
    config = PolicyConfig(**header["config"])
    if header["kind"] == "full":
        base_t = {k[5:]: Tensor(v, name=k[5:]) for k, v in arrays.items() if k.startswith("base/")}
    else:
        if base is None:
            raise IntegrityError("adapter-only checkpoint needs its base store")
        if base.base_hash() != header["base_hash"]:
            raise IntegrityError("adapter checkpoint was trained against a different base")
        base_t = {k: Tensor(v.data.copy(), name=k) for k, v in base.base.items()}
    adapters = {}
    for name, meta in header["adapters"].items():
        adapters[name] = AdapterPair(
            Tensor(arrays[f"adapter/{name}/A"], name=name + ".lora_A"),
            Tensor(arrays[f"adapter/{name}/B"], name=name + ".lora_B"),
            float(meta["scale"]),
            bool(meta["enabled"]),
        )
    store = ParamStore(config, base_t, adapters, header.get("version", 0))
    store.freeze_base(bool(header.get("frozen", bool(adapters))))
    if header["kind"] == "full" and store.base_hash() != header["base_hash"]:
        raise IntegrityError(f"{path}: base hash mismatch")
    return store


def checkpoint_header(path: str | Path) -> dict:
    return _read_archive(path)[0]


def uniform_store(config: PolicyConfig, seed: int = 0) -> ParamStore:
    """A model whose logits are identically zero (zero output head)."""
    store = init_base(config, seed)
    store.base["head"].data[:] = 0
    return store


def clone_config(config: PolicyConfig, **changes) -> PolicyConfig:
    return PolicyConfig(**{**asdict(config), **changes})
