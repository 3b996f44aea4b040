"""Experiment recipes: full pipelines from data generation through
training, evaluation, rank analysis, and plot emission.

Three recipes:

  planning      single-chain hop task; base fine-tune to plateau, then a
                LoRA pass over the same hop grid. The interesting output
                is where the adapter helps (hop counts the base already
                partially solves) and where it does not (deep hops).
  reasoning     multi-chain shortest-terminal task; base fine-tune on a
                3/4-chain mix, then LoRA and ELoRA passes focused on the
                4-chain weakness. Outputs accuracy tables per variant,
                adapter rank analysis, and convergence logs.
  elora-compare LoRA vs ELoRA on identical batches; outputs
                steps-to-threshold per seed and loss curves.

Every seed gets its own directory; the merged summary reports per-seed
values and across-seed medians (gains in absolute points, 0-100).
"""

from __future__ import annotations

import functools
import json
import math
import os
import statistics
from dataclasses import replace
from pathlib import Path

from . import model, rank, svgplot, trainer
from .adapters import AdapterSpec
from .config import ExperimentConfig, save_config
from .datasets import HashChainSampler, HashHopSampler, MixtureSampler, make_eval_samples
from .errors import ConfigError
from .trainer import TrainConfig, bucket_label, write_runlog

PLANNING_DATA = {
    "hops_lo": 1,
    "hops_hi": 10,
    "max_chain": 10,
    "eval_per_bucket": 50,
    "eval_seed": 9999,
    "base_max_steps": 4000,
    "adapter_steps": 1500,
    "high_hop": 8,
    "tau": 0.01,
}

REASONING_DATA = {
    "len_lo": 1,
    "len_hi": 3,
    "eval_per_bucket": 50,
    "eval_seed": 9999,
    "base_max_steps": 4000,
    "adapter_steps": 1500,
    "base_weight_3chain": 0.7,
    "adapter_weight_4chain": 0.8,
    "threshold": 1.0,
    "tau": 0.01,
}


def default_config(recipe: str, out_dir: str | None = None) -> ExperimentConfig:
    """Desk-scale defaults tuned so the trend gates run in minutes."""
    if recipe not in ("planning", "reasoning", "elora-compare"):
        raise ConfigError(f"unknown recipe {recipe!r}")
    data = dict(PLANNING_DATA if recipe == "planning" else REASONING_DATA)
    return ExperimentConfig(
        recipe=recipe,
        out_dir=out_dir or f"runs/{recipe}",
        seeds=(0, 1, 2),
        model=model.ModelConfig(d_model=48, n_layers=2, n_heads=4, d_ff=128,
                                max_seq_len=256),
        train=TrainConfig(batch_size=16, eval_every=500, lr_base=1e-3,
                          lr_lora=1e-3, lr_entropy=1e-2),
        adapter=AdapterSpec(rank=8, alpha=16.0, targets=("Wq", "Wv"),
                            entropy_weight=0.1),
        data=data,
    )


def _data(cfg: ExperimentConfig) -> dict:
    base = dict(PLANNING_DATA if cfg.recipe == "planning" else REASONING_DATA)
    base.update(cfg.data)
    return base


def _median(xs) -> float:
    return float(statistics.median(xs))


def _median_steps(vals) -> float | None:
    xs = [math.inf if v is None else v for v in vals]
    m = statistics.median(xs)
    return None if math.isinf(m) else float(m)


def _plain(table: dict) -> dict:
    return {bucket_label(k): dict(v) for k, v in table.items()}


def _chain_overall(table: dict, num_chains: int) -> float:
    keys = [k for k in table if k[0] == num_chains]
    n = sum(table[k]["n"] for k in keys)
    return sum(table[k]["accuracy"] * table[k]["n"] for k in keys) / n


def write_accuracy_csv(table: dict, path) -> None:
    with open(path, "w") as f:
        f.write("bucket,n,accuracy,chance\n")
        for k in sorted(table):
            v = table[k]
            f.write(f"{bucket_label(k)},{v['n']},{v['accuracy']:.4f},{v['chance']:.3e}\n")


def _attach_final_eval(log: trainer.RunLog, table: dict) -> None:
    last = log.steps[-1].step if log.steps else 0
    log.evals.append((last, table))


def _loss_series(log: trainer.RunLog) -> tuple[list[int], list[float]]:
    return [r.step for r in log.steps], [r.loss for r in log.steps]


def _rank_block(adapter, tau: float, csv_path) -> dict:
    reports, summary = rank.analyze_adapter(adapter, tau=tau)
    rank.write_rank_csv(reports, summary, csv_path)
    return {
        "mean_erank": summary["mean_erank_shannon"],
        "mean_cutoff": summary["mean_cutoff_rank"],
        "per_layer": {r.layer: r.erank_shannon for r in reports if r.error is None},
    }


def _map_seeds(fn, cfg: ExperimentConfig) -> list[dict]:
    seeds = list(cfg.seeds)
    workers = int(os.environ.get("LRLB_THREADS", "1") or "1")
    if workers > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            return list(pool.map(fn, seeds))
    return [fn(s) for s in seeds]


# ---------------------------------------------------------------------------
# planning: single-chain hop task

def _planning_seed(cfg: ExperimentConfig, seed: int) -> dict:
    d = _data(cfg)
    seed_dir = Path(cfg.out_dir) / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    hops = tuple(range(d["hops_lo"], d["hops_hi"] + 1))
    sampler = HashHopSampler(hops_values=hops, max_chain=d["max_chain"])
    eval_samples = make_eval_samples(sampler, d["eval_per_bucket"], d["eval_seed"])

    base_tc = replace(cfg.train, seed=seed, max_steps=d["base_max_steps"],
                      stop_on_plateau=True)
    weights, base_log = trainer.train_base(cfg.model, sampler, base_tc, out_dir=seed_dir)
    base_table = model.evaluate_accuracy(weights, eval_samples, cfg.model)
    _attach_final_eval(base_log, base_table)
    write_runlog(base_log, seed_dir, "base_log")
    write_accuracy_csv(base_table, seed_dir / "accuracy_base.csv")

    ad_tc = replace(cfg.train, seed=seed, max_steps=d["adapter_steps"],
                    stop_on_plateau=False)
    spec = replace(cfg.adapter, variant="lora")
    adapter, lora_log = trainer.train_adapter(weights, spec, sampler, ad_tc,
                                              cfg.model, out_dir=seed_dir, name="lora")
    lora_table = model.evaluate_accuracy(weights, eval_samples, cfg.model, adapter=adapter)
    _attach_final_eval(lora_log, lora_table)
    write_runlog(lora_log, seed_dir, "lora_log")
    write_accuracy_csv(lora_table, seed_dir / "accuracy_lora.csv")
    rank_lora = _rank_block(adapter, d["tau"], seed_dir / "rank_lora.csv")

    xs = list(hops)
    svgplot.line_chart(
        [("base", xs, [base_table[("hops", h)]["accuracy"] for h in xs]),
         ("lora", xs, [lora_table[("hops", h)]["accuracy"] for h in xs])],
        seed_dir / "accuracy.svg", title=f"seed {seed}", xlabel="hops",
        ylabel="exact-match accuracy", y_range=(0.0, 1.0))
    svgplot.line_chart(
        [("base", *_loss_series(base_log)), ("lora", *_loss_series(lora_log))],
        seed_dir / "loss.svg", title=f"seed {seed}", xlabel="step", ylabel="loss")

    return {
        "seed": seed,
        "base": _plain(base_table),
        "lora": _plain(lora_table),
        "rank_lora": rank_lora,
        "base_stopped": base_log.stopped_reason,
        "base_steps": len(base_log.steps),
    }


def run_planning(cfg: ExperimentConfig) -> dict:
    d = _data(cfg)
    per_seed = _map_seeds(functools.partial(_planning_seed, cfg), cfg)
    hops = list(range(d["hops_lo"], d["hops_hi"] + 1))
    buckets = {}
    for h in hops:
        label = f"hops={h}"
        base_vals = [r["base"][label]["accuracy"] for r in per_seed]
        lora_vals = [r["lora"][label]["accuracy"] for r in per_seed]
        gains = [(lv - bv) * 100 for bv, lv in zip(base_vals, lora_vals)]
        buckets[label] = {
            "chance": per_seed[0]["base"][label]["chance"],
            "base": base_vals,
            "lora": lora_vals,
            "base_median": _median(base_vals),
            "lora_median": _median(lora_vals),
            "gain_points_median": _median(gains),
        }
    qualifying = [f"hops={h}" for h in hops
                  if buckets[f"hops={h}"]["base_median"] > 2 * buckets[f"hops={h}"]["chance"]]
    high = [f"hops={h}" for h in hops if h >= d["high_hop"]]
    eranks = [r["rank_lora"]["mean_erank"] for r in per_seed]
    summary = {
        "recipe": "planning",
        "seeds": list(cfg.seeds),
        "buckets": buckets,
        "qualifying_buckets": qualifying,
        "median_gain_qualifying_points": (
            _median([buckets[b]["gain_points_median"] for b in qualifying])
            if qualifying else None),
        "median_gain_high_hops_points": (
            _median([buckets[b]["gain_points_median"] for b in high]) if high else None),
        "rank": {"lora": {"per_seed": eranks, "median_mean_erank": _median(eranks)}},
        "per_seed": per_seed,
    }
    plots = Path(cfg.out_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    svgplot.line_chart(
        [("base median", hops, [buckets[f"hops={h}"]["base_median"] for h in hops]),
         ("lora median", hops, [buckets[f"hops={h}"]["lora_median"] for h in hops])],
        plots / "accuracy_vs_hops.svg", title="hop task, median of seeds",
        xlabel="hops", ylabel="exact-match accuracy", y_range=(0.0, 1.0))
    layers = sorted(per_seed[0]["rank_lora"]["per_layer"])
    if layers:
        svgplot.bar_chart(
            layers,
            [_median([r["rank_lora"]["per_layer"][name] for r in per_seed
                      if name in r["rank_lora"]["per_layer"]]) for name in layers],
            plots / "erank_per_layer.svg", title="adapter delta effective rank",
            xlabel="layer", ylabel="effective rank")
    return summary


# ---------------------------------------------------------------------------
# reasoning: multi-chain shortest-terminal task

def _reasoning_samplers(d: dict):
    lr = (d["len_lo"], d["len_hi"])
    chain3 = HashChainSampler(num_chains_values=(3,), length_range=lr)
    chain4 = HashChainSampler(num_chains_values=(4,), length_range=lr)
    w3 = d["base_weight_3chain"]
    base_sampler = MixtureSampler([chain3, chain4], [w3, 1.0 - w3])
    w4 = d["adapter_weight_4chain"]
    adapter_sampler = MixtureSampler([chain4, chain3], [w4, 1.0 - w4])
    return chain3, chain4, base_sampler, adapter_sampler


def _reasoning_seed(cfg: ExperimentConfig, seed: int, variants=("lora", "elora"),
                    with_rank: bool = True) -> dict:
    d = _data(cfg)
    seed_dir = Path(cfg.out_dir) / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    chain3, chain4, base_sampler, adapter_sampler = _reasoning_samplers(d)
    eval_samples = (make_eval_samples(chain3, d["eval_per_bucket"], d["eval_seed"])
                    + make_eval_samples(chain4, d["eval_per_bucket"], d["eval_seed"] + 1))

    base_tc = replace(cfg.train, seed=seed, max_steps=d["base_max_steps"],
                      stop_on_plateau=True)
    weights, base_log = trainer.train_base(cfg.model, base_sampler, base_tc,
                                           out_dir=seed_dir)
    base_table = model.evaluate_accuracy(weights, eval_samples, cfg.model)
    _attach_final_eval(base_log, base_table)
    write_runlog(base_log, seed_dir, "base_log")
    write_accuracy_csv(base_table, seed_dir / "accuracy_base.csv")

    result = {
        "seed": seed,
        "base": _plain(base_table),
        "overall": {"base": {"3": _chain_overall(base_table, 3),
                             "4": _chain_overall(base_table, 4)}},
        "steps_to_threshold": {},
        "base_stopped": base_log.stopped_reason,
        "base_steps": len(base_log.steps),
    }
    ad_tc = replace(cfg.train, seed=seed, max_steps=d["adapter_steps"],
                    stop_on_plateau=False)
    logs = {}
    for variant in variants:
        spec = replace(cfg.adapter, variant=variant)
        adapter, log = trainer.train_adapter(weights, spec, adapter_sampler, ad_tc,
                                             cfg.model, out_dir=seed_dir, name=variant)
        table = model.evaluate_accuracy(weights, eval_samples, cfg.model, adapter=adapter)
        _attach_final_eval(log, table)
        write_runlog(log, seed_dir, f"{variant}_log")
        write_accuracy_csv(table, seed_dir / f"accuracy_{variant}.csv")
        result[variant] = _plain(table)
        result["overall"][variant] = {"3": _chain_overall(table, 3),
                                      "4": _chain_overall(table, 4)}
        result["steps_to_threshold"][variant] = trainer.steps_to_loss(log, d["threshold"])
        if with_rank:
            result[f"rank_{variant}"] = _rank_block(adapter, d["tau"],
                                                    seed_dir / f"rank_{variant}.csv")
        logs[variant] = log

    series = [("base", *_loss_series(base_log))]
    series += [(v, *_loss_series(logs[v])) for v in variants]
    svgplot.line_chart(series, seed_dir / "loss.svg", title=f"seed {seed}",
                       xlabel="step", ylabel="loss")
    return result


def run_reasoning(cfg: ExperimentConfig) -> dict:
    d = _data(cfg)
    per_seed = _map_seeds(functools.partial(_reasoning_seed, cfg), cfg)
    variants = ("base", "lora", "elora")
    labels = sorted(per_seed[0]["base"])
    buckets = {}
    for label in labels:
        entry = {"chance": per_seed[0]["base"][label]["chance"]}
        for v in variants:
            vals = [r[v][label]["accuracy"] for r in per_seed]
            entry[v] = vals
            entry[f"{v}_median"] = _median(vals)
        buckets[label] = entry

    overall = {}
    for v in variants:
        overall[v] = {c: _median([r["overall"][v][c] for r in per_seed]) for c in ("3", "4")}
    gains = {
        "lora_gain_4chain_points": _median(
            [(r["overall"]["lora"]["4"] - r["overall"]["base"]["4"]) * 100 for r in per_seed]),
        "elora_gain_4chain_points": _median(
            [(r["overall"]["elora"]["4"] - r["overall"]["base"]["4"]) * 100 for r in per_seed]),
        "lora_drop_3chain_points": _median(
            [(r["overall"]["base"]["3"] - r["overall"]["lora"]["3"]) * 100 for r in per_seed]),
        "elora_drop_3chain_points": _median(
            [(r["overall"]["base"]["3"] - r["overall"]["elora"]["3"]) * 100 for r in per_seed]),
    }
    rank_summary = {}
    for v in ("lora", "elora"):
        eranks = [r[f"rank_{v}"]["mean_erank"] for r in per_seed]
        rank_summary[v] = {"per_seed": eranks, "median_mean_erank": _median(eranks)}
    steps = {v: [r["steps_to_threshold"][v] for r in per_seed] for v in ("lora", "elora")}
    summary = {
        "recipe": "reasoning",
        "seeds": list(cfg.seeds),
        "buckets": buckets,
        "overall_median": overall,
        "gains": gains,
        "rank": rank_summary,
        "convergence": {
            "threshold": d["threshold"],
            "steps_lora": steps["lora"],
            "steps_elora": steps["elora"],
            "median_steps_lora": _median_steps(steps["lora"]),
            "median_steps_elora": _median_steps(steps["elora"]),
        },
        "per_seed": per_seed,
    }
    plots = Path(cfg.out_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    for c in (3, 4):
        xs = sorted({int(lbl.split("shortest=")[1]) for lbl in labels
                     if lbl.startswith(f"chains={c},")})
        if not xs:
            continue
        series = []
        for v in variants:
            series.append((v, xs,
                           [buckets[f"chains={c},shortest={x}"][f"{v}_median"] for x in xs]))
        svgplot.line_chart(series, plots / f"accuracy_vs_length_{c}chain.svg",
                           title=f"{c}-chain task, median of seeds",
                           xlabel="shortest chain length",
                           ylabel="exact-match accuracy", y_range=(0.0, 1.0))
    layers = sorted(per_seed[0]["rank_lora"]["per_layer"])
    if layers:
        svgplot.bar_chart(
            layers,
            [_median([r["rank_lora"]["per_layer"][name] for r in per_seed
                      if name in r["rank_lora"]["per_layer"]]) for name in layers],
            plots / "erank_per_layer.svg", title="adapter delta effective rank",
            xlabel="layer", ylabel="effective rank")
    return summary


# ---------------------------------------------------------------------------
# elora-compare: convergence race on identical batches

def run_elora_compare(cfg: ExperimentConfig) -> dict:
    d = _data(cfg)
    per_seed = _map_seeds(
        functools.partial(_reasoning_seed, cfg, variants=("lora", "elora"),
                          with_rank=False), cfg)
    steps = {v: [r["steps_to_threshold"][v] for r in per_seed] for v in ("lora", "elora")}
    summary = {
        "recipe": "elora-compare",
        "seeds": list(cfg.seeds),
        "threshold": d["threshold"],
        "per_seed": [{
            "seed": r["seed"],
            "steps_lora": r["steps_to_threshold"]["lora"],
            "steps_elora": r["steps_to_threshold"]["elora"],
            "overall": r["overall"],
        } for r in per_seed],
        "median_steps_lora": _median_steps(steps["lora"]),
        "median_steps_elora": _median_steps(steps["elora"]),
        "full": per_seed,
    }
    plots = Path(cfg.out_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    labels = []
    values = []
    for r in per_seed:
        for v in ("lora", "elora"):
            labels.append(f"s{r['seed']} {v}")
            st = r["steps_to_threshold"][v]
            values.append(float(st) if st is not None else 0.0)
    svgplot.bar_chart(labels, values, plots / "steps_to_threshold.svg",
                      title=f"steps to smoothed loss <= {d['threshold']}",
                      xlabel="run", ylabel="steps")
    return summary


def run_recipe(cfg: ExperimentConfig) -> dict:
    """Execute a recipe end to end; returns and persists the merged summary."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    if cfg.recipe == "planning":
        summary = run_planning(cfg)
    elif cfg.recipe == "reasoning":
        summary = run_reasoning(cfg)
    elif cfg.recipe == "elora-compare":
        summary = run_elora_compare(cfg)
    else:
        raise ConfigError(f"unknown recipe {cfg.recipe!r}")
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary
