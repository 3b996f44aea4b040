"""Tiny decoder-only transformer with pre-norm blocks.

GPT-2 conventions at desk scale: learned positional embeddings, tied
input/output embeddings, tanh-approximation gelu, causal attention.
Adapters hook into the six linear projections by name; evaluation runs
batched greedy decoding with right padding, which is exact per sample
because causal attention never looks past a sample's own length.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from . import tensor as T
from . import tokenizer
from .adapters import Adapter, adapted_forward
from .datasets import HASH_ALPHABET
from .errors import ContractError, ShapeError
from .tensor import Tensor

ATTENTION_TARGETS = ("Wq", "Wk", "Wv", "Wo")
MLP_TARGETS = ("W1", "W2")

WEIGHT_INIT_STD = 0.02


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 512
    vocab_size: int = tokenizer.VOCAB_SIZE

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def init_weights(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Fresh trainable weights; residual-writing matrices get 1/sqrt(2L) scale."""
    rng = np.random.default_rng(seed)
    resid_scale = 1.0 / math.sqrt(2.0 * config.n_layers)

    def normal(shape, s=WEIGHT_INIT_STD):
        return Tensor(rng.normal(0.0, s, size=shape).astype(np.float32), requires_grad=True)

    d, ff = config.d_model, config.d_ff
    w: dict[str, Tensor] = {
        "wte": normal((config.vocab_size, d)),
        "wpe": normal((config.max_seq_len, d)),
    }
    for li in range(config.n_layers):
        p = f"layer{li}."
        w[p + "Wq"] = normal((d, d))
        w[p + "Wk"] = normal((d, d))
        w[p + "Wv"] = normal((d, d))
        w[p + "Wo"] = normal((d, d), WEIGHT_INIT_STD * resid_scale)
        w[p + "W1"] = normal((d, ff))
        w[p + "W2"] = normal((ff, d), WEIGHT_INIT_STD * resid_scale)
        for ln in ("ln1", "ln2"):
            w[p + ln + ".g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
            w[p + ln + ".b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    w["lnf.g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    w["lnf.b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    return w


def set_trainable(weights: dict[str, Tensor], trainable: bool) -> None:
    for t in weights.values():
        t.requires_grad = trainable


def _project(x: Tensor, weights: dict[str, Tensor], layer: int, target: str,
             adapter: Adapter | None, capture: list | None) -> Tensor:
    W = weights[f"layer{layer}.{target}"]
    la = adapter.layers.get((layer, target)) if adapter is not None else None
    scaling = adapter.spec.scaling if adapter is not None else 1.0
    return adapted_forward(x, W, la, scaling, capture)


def forward_batch(weights: dict[str, Tensor], ids: np.ndarray, config: ModelConfig,
                  adapter: Adapter | None = None,
                  capture: list | None = None) -> Tensor:
    """Logits [B, T, vocab] for a [B, T] id batch."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"forward_batch expects [batch, seq] ids, got shape {ids.shape}")
    bsz, t = ids.shape
    if t > config.max_seq_len:
        raise ContractError(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    if t < 1:
        raise ContractError("empty sequence")

    tok = T.embed(weights["wte"], ids)
    pos = T.embed(weights["wpe"], np.arange(t))
    x = T.add(tok, T.broadcast_batch(pos, bsz))

    h, dh = config.n_heads, config.d_head
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    for li in range(config.n_layers):
        p = f"layer{li}."
        xn = T.layernorm(x, weights[p + "ln1.g"], weights[p + "ln1.b"])
        # 1/sqrt(dh) applied to q (cheaper than scaling the score tensor).
        q = T.scale(_project(xn, weights, li, "Wq", adapter, capture), inv_sqrt_dh)
        k = _project(xn, weights, li, "Wk", adapter, capture)
        v = _project(xn, weights, li, "Wv", adapter, capture)

        def heads(z):
            # [B,T,d] -> [B*H,T,dh]
            z = T.reshape(z, (bsz, t, h, dh))
            z = T.permute(z, (0, 2, 1, 3))
            return T.reshape(z, (bsz * h, t, dh))

        q, k, v = heads(q), heads(k), heads(v)
        scores = T.matmul(q, T.permute(k, (0, 2, 1)))
        att = T.softmax_last(scores, causal=True)
        ctx = T.matmul(att, v)
        ctx = T.reshape(ctx, (bsz, h, t, dh))
        ctx = T.permute(ctx, (0, 2, 1, 3))
        ctx = T.reshape(ctx, (bsz, t, h * dh))
        x = T.add(x, _project(ctx, weights, li, "Wo", adapter, capture))

        xn = T.layernorm(x, weights[p + "ln2.g"], weights[p + "ln2.b"])
        ff = T.gelu(_project(xn, weights, li, "W1", adapter, capture))
        x = T.add(x, _project(ff, weights, li, "W2", adapter, capture))

    x = T.layernorm(x, weights["lnf.g"], weights["lnf.b"])
    return T.matmul(x, T.transpose2d(weights["wte"]))


def forward(weights: dict[str, Tensor], ids, config: ModelConfig,
            adapter: Adapter | None = None) -> Tensor:
    """Logits [n, vocab] for a single id sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"forward expects a 1-d id sequence, got shape {ids.shape}")
    logits = forward_batch(weights, ids[None, :], config, adapter)
    return T.reshape(logits, (ids.shape[0], config.vocab_size))


def generate_greedy(weights: dict[str, Tensor], prompt_ids, n_new: int,
                    config: ModelConfig, adapter: Adapter | None = None) -> np.ndarray:
    """Argmax decoding of exactly n_new tokens; ties resolve to the lowest id."""
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if prompt_ids.ndim != 1 or prompt_ids.size < 1:
        raise ShapeError("prompt must be a non-empty 1-d id sequence")
    if n_new < 0:
        raise ContractError(f"n_new must be >= 0, got {n_new}")
    if prompt_ids.size + n_new > config.max_seq_len:
        raise ContractError(
            f"prompt length {prompt_ids.size} + n_new {n_new} exceeds "
            f"max_seq_len {config.max_seq_len}")
    out = generate_greedy_batch(weights, prompt_ids[None, :],
                                np.array([prompt_ids.size]), n_new, config, adapter)
    return out[0]


def generate_greedy_batch(weights: dict[str, Tensor], ids: np.ndarray,
                          lengths: np.ndarray, n_new: int, config: ModelConfig,
                          adapter: Adapter | None = None) -> np.ndarray:
    """Greedy decoding over a right-padded batch; exact per sample.

    ids is [B, T_max] with row i holding lengths[i] real tokens followed by
    padding. Rows decode in lockstep; because attention is causal, the pad
    tail after each row's frontier never influences its next token.
    Returns [B, n_new] generated ids.
    """
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    bsz = ids.shape[0]
    if lengths.shape != (bsz,):
        raise ShapeError("lengths must have one entry per batch row")
    max_len = int(lengths.max())
    if max_len + n_new > config.max_seq_len:
        raise ContractError(
            f"longest prompt {max_len} + n_new {n_new} exceeds max_seq_len {config.max_seq_len}")
    buf = np.full((bsz, max_len + n_new), tokenizer.PAD_ID, dtype=np.int64)
    for i in range(bsz):
        buf[i, :lengths[i]] = ids[i, :lengths[i]]
    generated = np.zeros((bsz, n_new), dtype=np.int64)
    rows = np.arange(bsz)
    for step in range(n_new):
        t_cur = max_len + step
        logits = forward_batch(weights, buf[:, :t_cur], config, adapter).data
        frontier = lengths + step - 1
        next_ids = np.argmax(logits[rows, frontier, :], axis=-1)
        buf[rows, lengths + step] = next_ids
        generated[:, step] = next_ids
    return generated


def chance_accuracy(hash_len: int) -> float:
    """Probability of matching a uniformly random hash of this length."""
    return (1.0 / len(HASH_ALPHABET)) ** hash_len


def evaluate_accuracy(weights: dict[str, Tensor], samples, config: ModelConfig,
                      adapter: Adapter | None = None,
                      batch_size: int = 32) -> dict[tuple, dict]:
    """Exact-match accuracy per bucket, with the random-chance baseline.

    A sample counts as correct when the greedily generated characters
    match its target hash exactly. Buckets come from sample.bucket():
    hops for the single-chain task, (num_chains, shortest length) for
    the multi-chain task.
    """
    if not samples:
        raise ContractError("evaluate_accuracy needs at least one sample")
    hits: dict[tuple, int] = {}
    totals: dict[tuple, int] = {}
    chance: dict[tuple, float] = {}
    order = sorted(range(len(samples)),
                   key=lambda i: len(samples[i].rendered), reverse=True)
    for lo in range(0, len(order), batch_size):
        group = order[lo:lo + batch_size]
        encoded = [tokenizer.encode(samples[i].rendered) for i in group]
        n_new = max(len(samples[i].target) for i in group)
        lengths = np.array([len(e) for e in encoded])
        buf = np.full((len(group), int(lengths.max())), tokenizer.PAD_ID, dtype=np.int64)
        for row, e in enumerate(encoded):
            buf[row, :len(e)] = e
        out = generate_greedy_batch(weights, buf, lengths, n_new, config, adapter)
        for row, i in enumerate(group):
            s = samples[i]
            want = np.asarray(tokenizer.encode(s.target), dtype=np.int64)
            key = s.bucket()
            totals[key] = totals.get(key, 0) + 1
            hits[key] = hits.get(key, 0) + int(np.array_equal(out[row, :len(want)], want))
            chance[key] = chance_accuracy(len(s.target))
    return {
        key: {
            "accuracy": hits[key] / totals[key],
            "n": totals[key],
            "chance": chance[key],
        }
        for key in sorted(totals)
    }


def overall_accuracy(table: dict[tuple, dict]) -> float:
    """Sample-weighted mean accuracy across buckets."""
    n = sum(v["n"] for v in table.values())
    if n == 0:
        raise ContractError("empty accuracy table")
    return sum(v["accuracy"] * v["n"] for v in table.values()) / n
