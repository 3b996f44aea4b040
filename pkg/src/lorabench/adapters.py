"""Low-rank adapters: plain LoRA and the entropy-regularized variant.

A LoRA layer adds (alpha/rank) * x @ A @ B next to a frozen base weight.
The entropy variant inserts a square linear map E in front of the A/B
pair (z = x @ E) and pushes z toward a flat covariance spectrum with an
auxiliary loss; E is linear, so the whole adapter still folds back into
the base weight after training.

At initialization B is zero, so both variants start bitwise-equal to the
base model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

LORA = "lora"
ELORA = "elora"

VALID_TARGETS = ("Wq", "Wk", "Wv", "Wo", "W1", "W2")

A_INIT_STD = 0.02


@dataclass
class AdapterSpec:
    variant: str = LORA
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("Wq", "Wv")
    entropy_weight: float = 0.1

    def __post_init__(self):
        if self.variant not in (LORA, ELORA):
            raise ContractError(f"unknown adapter variant {self.variant!r}")
        if self.rank < 1:
            raise ContractError(f"rank must be >= 1, got {self.rank}")
        if self.entropy_weight < 0:
            raise ContractError(f"entropy weight must be >= 0, got {self.entropy_weight}")
        bad = [t for t in self.targets if t not in VALID_TARGETS]
        if bad:
            raise ContractError(f"unknown adapter targets {bad}; valid: {VALID_TARGETS}")
        if not self.targets:
            raise ContractError("adapter needs at least one target")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class LayerAdapter:
    """Trainable factors for one (layer, target) pair."""
    A: Tensor
    B: Tensor
    E: Tensor | None = None

    @property
    def rank(self) -> int:
        return self.A.shape[1]


@dataclass
class Adapter:
    spec: AdapterSpec
    layers: dict[tuple[int, str], LayerAdapter] = field(default_factory=dict)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for (li, tgt), la in sorted(self.layers.items()):
            out[f"layer{li}.{tgt}.A"] = la.A
            out[f"layer{li}.{tgt}.B"] = la.B
            if la.E is not None:
                out[f"layer{li}.{tgt}.E"] = la.E
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        return sorted(self.named_tensors().items())


def target_dims(config, target: str) -> tuple[int, int]:
    d, ff = config.d_model, config.d_ff
    if target in ("Wq", "Wk", "Wv", "Wo"):
        return d, d
    if target == "W1":
        return d, ff
    return ff, d


def init_adapter(config, spec: AdapterSpec, seed: int) -> Adapter:
    """Gaussian A, zero B, identity E; the adapter contribution starts at 0."""
    rng = np.random.default_rng(seed)
    adapter = Adapter(spec=spec)
    for li in range(config.n_layers):
        for tgt in spec.targets:
            d_in, d_out = target_dims(config, tgt)
            if spec.rank > min(d_in, d_out):
                raise ContractError(
                    f"rank {spec.rank} exceeds min dimension of target {tgt} ({d_in}x{d_out})")
            a = Tensor(rng.normal(0.0, A_INIT_STD, size=(d_in, spec.rank)).astype(np.float32),
                       requires_grad=True)
            b = Tensor(np.zeros((spec.rank, d_out), dtype=np.float32), requires_grad=True)
            e = None
            if spec.variant == ELORA:
                e = Tensor(np.eye(d_in, dtype=np.float32), requires_grad=True)
            adapter.layers[(li, tgt)] = LayerAdapter(A=a, B=b, E=e)
    return adapter


def adapted_forward(x: Tensor, W: Tensor, layer_adapter: LayerAdapter | None,
                    scaling: float, capture: list | None = None) -> Tensor:
    """x @ W plus the scaled low-rank path; captures z = x @ E when asked.

    With no adapter this is a plain projection. The base W is typically
    frozen, so gradients reach only A, B, and E.
    """
    y = T.matmul(x, W)
    if layer_adapter is None:
        return y
    la = layer_adapter
    if la.A.shape[0] != W.shape[0] or la.B.shape[1] != W.shape[1]:
        raise ShapeError(
            f"adapter factors {la.A.shape}x{la.B.shape} do not fit base weight {W.shape}")
    z = x
    if la.E is not None:
        z = T.matmul(x, la.E)
        if capture is not None:
            capture.append(z)
    low = T.matmul(T.matmul(z, la.A), la.B)
    return T.add(y, T.scale(low, scaling))


def entropy_loss(z: Tensor, normalized: bool = True) -> Tensor:
    """log of the squared Frobenius norm of the (normalized) covariance.

    Rows of z are flattened batch x sequence positions. With Frobenius
    normalization the value is the negated Renyi-2 entropy of the
    covariance spectrum: it lives in [log(1/min(N, d)), 0], is 0 for
    rank-1 z, hits the lower bound on a flat spectrum, and is invariant
    under z -> c*z. Minimizing it maximizes entropy.

    The unnormalized form (normalized=False) is the raw log ||Z^T Z||_F^2,
    kept for ablation; it is scale-sensitive.
    """
    if z.data.ndim != 2:
        raise ShapeError(f"entropy_loss expects 2-d (rows, features), got shape {z.shape}")
    if z.shape[0] < 1:
        raise ContractError("entropy_loss needs at least one row")
    if not np.any(z.data):
        raise ContractError("entropy_loss is undefined for all-zero input")
    cov = T.matmul(T.transpose2d(z), z)
    sq_cov = T.sum_all(T.mul(cov, cov))
    if not normalized:
        return T.log(sq_cov)
    sq_z = T.sum_all(T.mul(z, z))
    return T.sub(T.log(sq_cov), T.scale(T.log(sq_z), 2.0))


def total_loss(task_ce: Tensor, entropy: Tensor | None, entropy_weight: float) -> Tensor:
    """task loss + weight * entropy term (weight 0 or no term: pure task)."""
    if entropy_weight < 0:
        raise ContractError(f"entropy weight must be >= 0, got {entropy_weight}")
    if entropy is None or entropy_weight == 0.0:
        return task_ce
    return T.add(task_ce, T.scale(entropy, entropy_weight))


def delta_matrix(adapter: Adapter, layer: int, target: str) -> np.ndarray:
    """The dense update (alpha/r) * (E) A B that the adapter adds to W."""
    la = adapter.layers.get((layer, target))
    if la is None:
        raise ContractError(f"adapter has no target layer{layer}.{target}")
    prod = la.A.data @ la.B.data
    if la.E is not None:
        prod = la.E.data @ prod
    return adapter.spec.scaling * prod


def merge(W: Tensor, adapter: Adapter, layer: int, target: str) -> Tensor:
    """Fold the adapter into the base weight: W' = W + delta."""
    delta = delta_matrix(adapter, layer, target)
    if delta.shape != W.shape:
        raise ShapeError(f"delta shape {delta.shape} does not match weight shape {W.shape}")
    return Tensor((W.data + delta.astype(W.data.dtype)), requires_grad=False)


def merge_all(weights: dict[str, Tensor], adapter: Adapter) -> dict[str, Tensor]:
    """New weight dict with every adapted target merged; base is untouched."""
    merged = {k: Tensor(v.data.copy(), requires_grad=False) for k, v in weights.items()}
    for (li, tgt) in adapter.layers:
        key = f"layer{li}.{tgt}"
        merged[key] = merge(weights[key], adapter, li, tgt)
    return merged


def save_adapter(adapter: Adapter, path) -> None:
    # container is f32-only, so alpha/entropy_weight round to f32 on the way through
    tensors = {name: t.data for name, t in adapter.named_tensors().items()}
    tensors["meta.alpha"] = np.array([adapter.spec.alpha], dtype=np.float32)
    tensors["meta.entropy_weight"] = np.array([adapter.spec.entropy_weight], dtype=np.float32)
    checkpoint.save(tensors, path)


def load_adapter(path) -> Adapter:
    """Rebuild an adapter from its checkpoint; rank and variant come from shapes."""
    tensors = checkpoint.load(path)
    alpha = float(tensors.pop("meta.alpha", np.array([16.0]))[0])
    entropy_weight = float(tensors.pop("meta.entropy_weight", np.array([0.0]))[0])
    groups: dict[tuple[int, str], dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        try:
            layer_s, tgt, part = name.split(".")
            li = int(layer_s.removeprefix("layer"))
        except ValueError as e:
            raise ContractError(f"unrecognized adapter tensor name {name!r}") from e
        groups.setdefault((li, tgt), {})[part] = arr
    if not groups:
        raise ContractError(f"{path}: no adapter tensors found")
    ranks = set()
    targets = set()
    variant = LORA
    layers = {}
    for (li, tgt), parts in groups.items():
        if "A" not in parts or "B" not in parts:
            raise ContractError(f"adapter target layer{li}.{tgt} is missing A or B")
        a = Tensor(parts["A"], requires_grad=True)
        b = Tensor(parts["B"], requires_grad=True)
        e = Tensor(parts["E"], requires_grad=True) if "E" in parts else None
        if e is not None:
            variant = ELORA
        ranks.add(a.shape[1])
        targets.add(tgt)
        layers[(li, tgt)] = LayerAdapter(A=a, B=b, E=e)
    if len(ranks) != 1:
        raise ContractError(f"inconsistent ranks across adapter targets: {sorted(ranks)}")
    spec = AdapterSpec(variant=variant, rank=ranks.pop(), alpha=alpha,
                       targets=tuple(sorted(targets)), entropy_weight=entropy_weight)
    return Adapter(spec=spec, layers=layers)
