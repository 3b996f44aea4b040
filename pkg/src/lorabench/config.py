"""Experiment configuration: a small key = value format with sections,
with JSON accepted as an alternative. A persisted config plus its seeds
reproduces a run exactly.

Sections map onto the dataclasses they configure:

    [run]      recipe, out_dir, seeds
    [model]    ModelConfig fields
    [train]    TrainConfig fields
    [adapter]  AdapterSpec fields
    [data]     free-form recipe parameters (step counts, grids, mixes)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapters import AdapterSpec
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

RECIPES = ("planning", "reasoning", "elora-compare")


@dataclass
class ExperimentConfig:
    recipe: str = "reasoning"
    out_dir: str = "runs/out"
    seeds: tuple[int, ...] = (0, 1, 2)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {self.recipe!r}; valid: {RECIPES}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")


def _scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low in ("none", "null"):
        return None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def parse_value(text: str):
    """Scalar, or a comma-separated list of scalars."""
    if "," in text:
        return [_scalar(p) for p in text.split(",") if p.strip()]
    return _scalar(text)


def parse_kv(text: str) -> dict[str, dict]:
    """Line-oriented `key = value` under [section] headers; # comments."""
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        sections[current][key.strip()] = parse_value(value)
    return sections


def _build(dc_cls, values: dict, section: str):
    allowed = {f.name: f for f in fields(dc_cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in allowed:
            raise ConfigError(f"[{section}] has no field {key!r} "
                              f"(valid: {sorted(allowed)})")
        default = allowed[key].default
        if isinstance(default, tuple):
            if isinstance(value, list):
                value = tuple(value)
            elif not isinstance(value, tuple):
                value = (value,)
        kwargs[key] = value
    return dc_cls(**kwargs)


def from_sections(sections: dict[str, dict]) -> ExperimentConfig:
    known = {"run", "model", "train", "adapter", "data"}
    unknown = set(sections) - known
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)} (valid: {sorted(known)})")
    run = dict(sections.get("run", {}))
    seeds = run.pop("seeds", (0, 1, 2))
    if isinstance(seeds, int):
        seeds = (seeds,)
    seeds = tuple(int(s) for s in seeds)
    extra = set(run) - {"recipe", "out_dir"}
    if extra:
        raise ConfigError(f"[run] has no field {sorted(extra)}")
    return ExperimentConfig(
        recipe=run.get("recipe", "reasoning"),
        out_dir=str(run.get("out_dir", "runs/out")),
        seeds=seeds,
        model=_build(ModelConfig, sections.get("model", {}), "model"),
        train=_build(TrainConfig, sections.get("train", {}), "train"),
        adapter=_build(AdapterSpec, sections.get("adapter", {}), "adapter"),
        data=dict(sections.get("data", {})),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            sections = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(sections, dict):
            raise ConfigError(f"{path}: top-level JSON must be an object of sections")
    else:
        sections = parse_kv(text)
    return from_sections(sections)


def to_sections(cfg: ExperimentConfig) -> dict:
    return {
        "run": {"recipe": cfg.recipe, "out_dir": cfg.out_dir, "seeds": list(cfg.seeds)},
        "model": asdict(cfg.model),
        "train": asdict(cfg.train),
        "adapter": {**asdict(cfg.adapter), "targets": list(cfg.adapter.targets)},
        "data": dict(cfg.data),
    }


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_sections(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
