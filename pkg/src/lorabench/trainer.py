"""Training loops: full fine-tuning of the base model and frozen-base
adapter training, with per-group Adam learning rates, plateau stopping,
divergence handling, and a persisted run log.

Loss is next-token cross entropy masked to the target-hash positions
(plus the end-of-sequence token); the prompt is context only. Adapter
runs add the weighted covariance-entropy term captured from each
adapted layer's E output, averaged across adapted layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import checkpoint, model, tokenizer
from . import tensor as T
from .adapters import Adapter, AdapterSpec, ELORA, entropy_loss, init_adapter, save_adapter
from .errors import ContractError, TrainingDiverged
from .tensor import Tape, Tensor

LOSS_SMOOTH_WINDOW = 50
DEFAULT_THRESHOLDS = (2.0, 1.0, 0.5, 0.2, 0.1, 0.05, 0.01)


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 2000
    eval_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_base: float = 3e-4
    # The two adapter rates below are the published settings; recipes may
    # override them, the defaults themselves must stay put.
    lr_lora: float = 1e-5
    lr_entropy: float = 1e-3
    entropy_weight: float = 0.1
    plateau_window: int = 500
    plateau_delta: float = 0.01
    stop_on_plateau: bool = True
    clip_norm: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_base", "lr_lora", "lr_entropy"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be > 0")
        if not 0 < self.plateau_delta < 1:
            raise ContractError(f"plateau_delta must be in (0,1), got {self.plateau_delta}")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ContractError("batch_size and max_steps must be >= 1")
        if self.entropy_weight < 0:
            raise ContractError("entropy_weight must be >= 0")


@dataclass
class StepRecord:
    step: int
    loss: float
    entropy_loss: float
    grad_norm_base: float
    grad_norm_adapter: float


@dataclass
class RunLog:
    config: dict = field(default_factory=dict)
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[tuple[int, dict]] = field(default_factory=list)
    checkpoint_path: str | None = None
    steps_to_threshold: dict[float, int | None] = field(default_factory=dict)
    stopped_reason: str = ""

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.steps], dtype=np.float64)


class Adam:
    """Adam with per-parameter learning rates; skips gradient-free params."""

    def __init__(self, groups: list[tuple[str, Tensor, float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p, _ in groups}
        self.v = {name: np.zeros_like(p.data) for name, p, _ in groups}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p, lr in self.groups:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def encode_training_sequence(sample) -> tuple[list[int], int]:
    """Token ids for prompt+target+EOS and the prompt's token length."""
    prompt = tokenizer.encode(sample.rendered)
    tgt = tokenizer.encode(sample.target)
    return prompt + tgt + [tokenizer.EOS_ID], len(prompt)


def build_batch(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-padded (inputs, targets, mask) arrays, mask 1 on target+EOS."""
    seqs = [encode_training_sequence(s) for s in samples]
    width = max(len(ids) for ids, _ in seqs) - 1
    bsz = len(seqs)
    inputs = np.full((bsz, width), tokenizer.PAD_ID, dtype=np.int64)
    targets = np.full((bsz, width), tokenizer.PAD_ID, dtype=np.int64)
    mask = np.zeros((bsz, width), dtype=np.float32)
    for i, (ids, prompt_len) in enumerate(seqs):
        n = len(ids)
        inputs[i, :n - 1] = ids[:-1]
        targets[i, :n - 1] = ids[1:]
        mask[i, prompt_len - 1:n - 1] = 1.0
    return inputs, targets, mask


def _grad_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def _clip_grads(tensors, max_norm: float) -> None:
    norm = _grad_norm(tensors)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= factor

def _plateaued(losses: list[float], window: int, delta: float) -> bool:
    if len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window:-window]))
    cur = float(np.mean(losses[-window:]))
    if prev <= 0:
        return True
    return (prev - cur) / prev < delta


def steps_to_loss(log: RunLog, threshold: float) -> int | None:
    """First logged step whose trailing window-50 mean loss <= threshold."""
    if threshold < 0:
        raise ContractError(f"threshold must be >= 0, got {threshold}")
    losses = log.losses()
    for i in range(losses.size):
        lo = max(0, i - LOSS_SMOOTH_WINDOW + 1)
        if losses[lo:i + 1].mean() <= threshold:
            return log.steps[i].step
    return None


def _finish_log(log: RunLog, thresholds=DEFAULT_THRESHOLDS) -> None:
    log.steps_to_threshold = {float(t): steps_to_loss(log, float(t)) for t in thresholds}


def _maybe_eval(log, step, weights, eval_samples, config, adapter, batch_size):
    if eval_samples:
        table = model.evaluate_accuracy(weights, eval_samples, config,
                                        adapter=adapter, batch_size=batch_size)
        log.evals.append((step, table))


def train_base(config: model.ModelConfig, sampler, tc: TrainConfig,
               weights: dict[str, Tensor] | None = None,
               eval_samples=None, out_dir=None) -> tuple[dict[str, Tensor], RunLog]:
    """Adam on every weight until the loss plateaus or max_steps runs out."""
    rng = np.random.default_rng(tc.seed)
    if weights is None:
        weights = model.init_weights(config, seed=tc.seed)
    model.set_trainable(weights, True)
    params = sorted(weights.items())
    opt = Adam([(n, p, tc.lr_base) for n, p in params], tc.beta1, tc.beta2, tc.eps)
    log = RunLog(config={"kind": "base", "model": asdict(config), "train": asdict(tc)})
    snapshot = {n: p.data.copy() for n, p in params}
    losses: list[float] = []

    for step in range(tc.max_steps):
        batch = [sampler.sample(rng) for _ in range(tc.batch_size)]
        inputs, targets, mask = build_batch(batch)
        with Tape() as tape:
            logits = model.forward_batch(weights, inputs, config)
            flat = T.reshape(logits, (inputs.size, config.vocab_size))
            loss = T.cross_entropy(flat, targets.reshape(-1), mask.reshape(-1))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                path = _abort_checkpoint(snapshot, out_dir)
                raise TrainingDiverged(f"non-finite loss at step {step}", step, path)
            tape.backward(loss)
        tensors = [p for _, p in params]
        raw_norm = _grad_norm(tensors)
        if tc.clip_norm is not None:
            _clip_grads(tensors, tc.clip_norm)
        opt.step()
        for p in tensors:
            p.zero_grad()
        losses.append(loss_val)
        log.steps.append(StepRecord(step, loss_val, 0.0, raw_norm, 0.0))
        if (step + 1) % tc.eval_every == 0:
            snapshot = {n: p.data.copy() for n, p in params}
            _maybe_eval(log, step, weights, eval_samples, config, None, tc.batch_size)
        if tc.stop_on_plateau and _plateaued(losses, tc.plateau_window, tc.plateau_delta):
            log.stopped_reason = "plateau"
            break
    else:
        log.stopped_reason = "max_steps"

    _finish_log(log)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "base.lrlb"
        checkpoint.save({n: p.data for n, p in params}, path)
        log.checkpoint_path = str(path)
    return weights, log


def train_adapter(weights: dict[str, Tensor], adapter_or_spec, sampler,
                  tc: TrainConfig, config: model.ModelConfig,
                  eval_samples=None, out_dir=None,
                  name: str = "adapter") -> tuple[Adapter, RunLog]:
    """Frozen-base training of the low-rank factors (and E, at its own rate)."""
    model.set_trainable(weights, False)
    if isinstance(adapter_or_spec, Adapter):
        adapter = adapter_or_spec
    else:
        adapter = init_adapter(config, adapter_or_spec, seed=tc.seed)
    spec = adapter.spec
    rng = np.random.default_rng(tc.seed)
    groups = []
    for pname, p in adapter.trainable():
        lr = tc.lr_entropy if pname.endswith(".E") else tc.lr_lora
        groups.append((pname, p, lr))
    opt = Adam(groups, tc.beta1, tc.beta2, tc.eps)
    log = RunLog(config={"kind": spec.variant, "model": asdict(config),
                         "train": asdict(tc), "adapter": asdict(spec)})
    snapshot = {n: p.data.copy() for n, p, _ in groups}
    losses: list[float] = []
    use_entropy = spec.variant == ELORA and spec.entropy_weight > 0

    for step in range(tc.max_steps):
        batch = [sampler.sample(rng) for _ in range(tc.batch_size)]
        inputs, targets, mask = build_batch(batch)
        capture: list[Tensor] = []
        with Tape() as tape:
            logits = model.forward_batch(weights, inputs, config, adapter=adapter,
                                         capture=capture)
            flat = T.reshape(logits, (inputs.size, config.vocab_size))
            ce = T.cross_entropy(flat, targets.reshape(-1), mask.reshape(-1))
            ent_val = 0.0
            loss = ce
            if capture:
                terms = [entropy_loss(T.reshape(z, (z.shape[0] * z.shape[1], z.shape[2])))
                         for z in capture]
                ent = terms[0]
                for extra in terms[1:]:
                    ent = T.add(ent, extra)
                ent = T.scale(ent, 1.0 / len(terms))
                ent_val = float(ent.data)
                if use_entropy:
                    loss = T.add(ce, T.scale(ent, spec.entropy_weight))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                path = _abort_checkpoint(snapshot, out_dir, f"{name}_last_good.lrlb")
                raise TrainingDiverged(f"non-finite loss at step {step}", step, path)
            tape.backward(loss)
        tensors = [p for _, p, _ in groups]
        raw_norm = _grad_norm(tensors)
        if tc.clip_norm is not None:
            _clip_grads(tensors, tc.clip_norm)
        opt.step()
        for p in tensors:
            p.zero_grad()
        losses.append(loss_val)
        log.steps.append(StepRecord(step, loss_val, ent_val, 0.0, raw_norm))
        if (step + 1) % tc.eval_every == 0:
            snapshot = {n: p.data.copy() for n, p, _ in groups}
            _maybe_eval(log, step, weights, eval_samples, config, adapter, tc.batch_size)
        if tc.stop_on_plateau and _plateaued(losses, tc.plateau_window, tc.plateau_delta):
            log.stopped_reason = "plateau"
            break
    else:
        log.stopped_reason = "max_steps"

    _finish_log(log)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{name}.lrlb"
        save_adapter(adapter, path)
        log.checkpoint_path = str(path)
    return adapter, log


def _abort_checkpoint(snapshot: dict[str, np.ndarray], out_dir,
                      fname: str = "last_good.lrlb") -> str | None:
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / fname
    checkpoint.save(snapshot, path)
    return str(path)


def bucket_label(key: tuple) -> str:
    """Readable form of an accuracy-bucket key for CSV/JSON output."""
    if key and key[0] == "hops":
        return f"hops={key[1]}"
    return f"chains={key[0]},shortest={key[1]}"


def write_runlog(log: RunLog, out_dir, prefix: str) -> tuple[str, str]:
    """Persist per-step CSV and a JSON summary; returns the two paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{prefix}.csv"
    with open(csv_path, "w") as f:
        f.write("step,loss,entropy_loss,grad_norm_base,grad_norm_adapter\n")
        for r in log.steps:
            f.write(f"{r.step},{r.loss:.6f},{r.entropy_loss:.6f},"
                    f"{r.grad_norm_base:.6f},{r.grad_norm_adapter:.6f}\n")
    summary = {
        "config": log.config,
        "stopped_reason": log.stopped_reason,
        "checkpoint_path": log.checkpoint_path,
        "steps_to_threshold": {f"{thr:g}": step for thr, step in log.steps_to_threshold.items()},
        "final_accuracies": {},
        "evals": [],
    }
    for step, table in log.evals:
        summary["evals"].append({
            "step": step,
            "buckets": {bucket_label(k): v for k, v in table.items()},
        })
    if log.evals:
        last = log.evals[-1][1]
        summary["final_accuracies"] = {bucket_label(k): v["accuracy"] for k, v in last.items()}
        summary["overall_accuracy"] = model.overall_accuracy(last)
    json_path = out_dir / f"{prefix}.json"
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return str(csv_path), str(json_path)
