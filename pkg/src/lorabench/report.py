"""Combined markdown report over one or more recipe run directories.

Pure function of the run artifacts: same inputs give byte-identical
output. Measured toy-scale numbers are shown next to the published
GPT-2-scale reference values, clearly labeled, because the two scales
are not comparable and only the orderings are expected to transfer.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError

# Published reference values at GPT-2 scale, for context rows only.
REFERENCE_ACCURACY = {
    "hop task": {"base": 0.283, "lora": 0.302, "elora": 0.303},
    "3-chain": {"base": 0.391, "lora": 0.452, "elora": 0.473},
    "4-chain": {"base": 0.192, "lora": 0.369, "elora": 0.451},
}
REFERENCE_RANK = {"hop task": {"erank": 17.87, "cutoff": 158.0}}

THIS_RUN = "this run (toy scale)"
PAPER_SCALE = "paper (GPT-2 scale)"


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise ConfigError(f"no summary.json in {run_dir}; not a finished run directory")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.3f}"
    return str(x)


def _planning_overall(summary: dict, variant: str) -> float:
    vals = [b[f"{variant}_median"] for b in summary["buckets"].values()]
    return sum(vals) / len(vals)


def _accuracy_rows(summaries: list[dict]) -> list[tuple[str, str, str, str, str]]:
    rows = []
    for s in summaries:
        if s["recipe"] == "planning":
            rows.append(("hop task", THIS_RUN,
                         _fmt(_planning_overall(s, "base")),
                         _fmt(_planning_overall(s, "lora")), "-"))
            rows.append(("hop task", PAPER_SCALE,
                         *[_fmt(REFERENCE_ACCURACY["hop task"][v])
                           for v in ("base", "lora", "elora")]))
        elif s["recipe"] == "reasoning":
            om = s["overall_median"]
            for c in ("3", "4"):
                task = f"{c}-chain"
                rows.append((task, THIS_RUN, _fmt(om["base"][c]),
                             _fmt(om["lora"][c]), _fmt(om["elora"][c])))
                rows.append((task, PAPER_SCALE,
                             *[_fmt(REFERENCE_ACCURACY[task][v])
                               for v in ("base", "lora", "elora")]))
    return rows


def build_report(run_dirs) -> str:
    if not run_dirs:
        raise ConfigError("no run directories given")
    summaries = [load_summary(d) for d in run_dirs]
    # Order by content, not by directory name, so identical runs give
    # identical bytes wherever they live.
    summaries.sort(key=lambda s: (s["recipe"], json.dumps(s, sort_keys=True)))

    lines = ["# Adapter workbench report", ""]

    acc_rows = _accuracy_rows(summaries)
    if acc_rows:
        lines += ["## Accuracy (exact match)", "",
                  "| task | source | base | LoRA | ELoRA |",
                  "| --- | --- | --- | --- | --- |"]
        lines += [f"| {a} | {b} | {c} | {d} | {e} |" for a, b, c, d, e in acc_rows]
        lines.append("")

    rank_rows = []
    for s in summaries:
        task = "hop task" if s["recipe"] == "planning" else "4-chain"
        for variant, block in s.get("rank", {}).items():
            rank_rows.append((task, variant, THIS_RUN, _fmt(block["median_mean_erank"])))
    if rank_rows:
        lines += ["## Adapter delta effective rank (mean over layers, median of seeds)", "",
                  "| task | adapter | source | mean effective rank |",
                  "| --- | --- | --- | --- |"]
        lines += [f"| {a} | {b} | {c} | {d} |" for a, b, c, d in rank_rows]
        ref = REFERENCE_RANK["hop task"]
        lines.append(f"| hop task | lora | {PAPER_SCALE} | "
                     f"{_fmt(ref['erank'])} (cutoff {_fmt(ref['cutoff'])}) |")
        lines.append("")
        eranks = {task: float(d) for task, variant, _, d in rank_rows if variant == "lora"}
        if "hop task" in eranks and "4-chain" in eranks and eranks["4-chain"] > 0:
            ratio = eranks["hop task"] / eranks["4-chain"]
            lines.append(f"Rank ratio (hop task / 4-chain, LoRA deltas): {ratio:.2f}x")
            lines.append("")

    conv_rows = []
    for s in summaries:
        if s["recipe"] in ("reasoning", "elora-compare"):
            block = s.get("convergence", s)
            conv_rows.append((s["recipe"], _fmt(block.get("threshold")),
                              _fmt(block.get("median_steps_lora")),
                              _fmt(block.get("median_steps_elora"))))
    if conv_rows:
        lines += ["## Convergence (median steps to smoothed-loss threshold)", "",
                  "| recipe | threshold | LoRA | ELoRA |",
                  "| --- | --- | --- | --- |"]
        lines += [f"| {a} | {b} | {c} | {d} |" for a, b, c, d in conv_rows]
        lines.append("")

    lines += ["## Plots", ""]
    for i, s in enumerate(summaries, start=1):
        lines.append(f"Run {i} ({s['recipe']}):")
        for name in _plot_names(s["recipe"]):
            lines.append(f"- plots/{name}")
        lines.append("")
    return "\n".join(lines)


def _plot_names(recipe: str) -> list[str]:
    if recipe == "planning":
        return ["accuracy_vs_hops.svg", "erank_per_layer.svg"]
    if recipe == "reasoning":
        return ["accuracy_vs_length_3chain.svg", "accuracy_vs_length_4chain.svg",
                "erank_per_layer.svg"]
    return ["steps_to_threshold.svg"]
