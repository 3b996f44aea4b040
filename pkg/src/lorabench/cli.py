"""Command-line entry point.

Subcommands: gen (dataset emission), run-recipe (full experiment
pipelines), rank (adapter delta analysis), report (combined markdown).
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import os

# Thread cap must land in the environment before numpy loads its BLAS.
_threads = os.environ.get("LRLB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import rank, recipes, report, svgplot
from .config import load_config
from .datasets import derive_seeds, emit_jsonl, gen_hashchain, gen_hashhop
from .errors import ConfigError, DatasetError, LorabenchError, VocabError


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    p = _Parser(prog="lorabench",
                description="Adapter workbench: hash-task benchmarks, "
                            "low-rank adapter training, rank analysis.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="emit a JSONL dataset file")
    gsub = g.add_subparsers(dest="task", required=True, parser_class=_Parser)

    gh = gsub.add_parser("hashhop", help="single-chain hop samples")
    gh.add_argument("--seed", type=int, default=0)
    gh.add_argument("--count", type=int, default=100)
    gh.add_argument("--hops", type=int, default=1)
    gh.add_argument("--chain-length", type=int, default=5)
    gh.add_argument("--out", type=Path, required=True)
    gh.set_defaults(func=_cmd_gen_hashhop)

    gc = gsub.add_parser("hashchain", help="multi-chain shortest-terminal samples")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--count", type=int, default=100)
    gc.add_argument("--chains", type=int, default=3)
    gc.add_argument("--min-length", type=int, default=1)
    gc.add_argument("--max-length", type=int, default=3)
    gc.add_argument("--out", type=Path, required=True)
    gc.set_defaults(func=_cmd_gen_hashchain)

    r = sub.add_parser("run-recipe", help="run a full experiment pipeline")
    r.add_argument("recipe", choices=("planning", "reasoning", "elora-compare"))
    r.add_argument("--config", type=Path, default=None,
                   help="key=value or JSON config; defaults are recipe-tuned")
    r.add_argument("--out", type=Path, default=None, help="output directory")
    r.add_argument("--seeds", type=str, default=None, help="comma-separated seeds")
    r.set_defaults(func=_cmd_run_recipe)

    k = sub.add_parser("rank", help="rank-analyze an adapter checkpoint")
    k.add_argument("--checkpoint", type=Path, required=True)
    k.add_argument("--tau", type=float, default=rank.DEFAULT_TAU)
    k.add_argument("--out-dir", type=Path, default=None,
                   help="where to write rank.csv and the bar chart "
                        "(default: next to the checkpoint)")
    k.set_defaults(func=_cmd_rank)

    t = sub.add_parser("report", help="combined markdown report over run dirs")
    t.add_argument("--runs", type=Path, nargs="+", required=True)
    t.add_argument("--out", type=Path, default=None,
                   help="output file (default: print to stdout)")
    t.set_defaults(func=_cmd_report)
    return p


def _cmd_gen_hashhop(args) -> int:
    seeds = derive_seeds(args.seed, args.count)
    samples = [gen_hashhop(s, args.chain_length, args.hops) for s in seeds]
    emit_jsonl(samples, args.out)
    print(f"wrote {args.count} hashhop samples "
          f"(hops={args.hops}, chain_length={args.chain_length}, seed={args.seed}) "
          f"to {args.out}")
    return 0


def _cmd_gen_hashchain(args) -> int:
    seeds = derive_seeds(args.seed, args.count)
    samples = [gen_hashchain(s, args.chains, (args.min_length, args.max_length))
               for s in seeds]
    emit_jsonl(samples, args.out)
    print(f"wrote {args.count} hashchain samples "
          f"(chains={args.chains}, lengths={args.min_length}-{args.max_length}, "
          f"seed={args.seed}) to {args.out}")
    return 0


def _cmd_run_recipe(args) -> int:
    if args.config is not None:
        cfg = load_config(args.config)
        if cfg.recipe != args.recipe:
            raise ConfigError(f"config says recipe {cfg.recipe!r} but the "
                              f"command asked for {args.recipe!r}")
    else:
        cfg = recipes.default_config(args.recipe)
    if args.out is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    if args.seeds is not None:
        try:
            seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}")
        cfg = replace(cfg, seeds=seeds)
    summary = recipes.run_recipe(cfg)
    print(f"recipe {cfg.recipe} finished: seeds={list(cfg.seeds)}, "
          f"artifacts in {cfg.out_dir}")
    _print_headline(summary)
    return 0


def _print_headline(summary: dict) -> None:
    if summary["recipe"] == "planning":
        print(f"  median gain on qualifying hop buckets: "
              f"{summary['median_gain_qualifying_points']} points")
        print(f"  median gain at deep hops: "
              f"{summary['median_gain_high_hops_points']} points")
    elif summary["recipe"] == "reasoning":
        g = summary["gains"]
        print(f"  4-chain gains: lora {g['lora_gain_4chain_points']:.1f}, "
              f"elora {g['elora_gain_4chain_points']:.1f} points")
        print(f"  3-chain drops: lora {g['lora_drop_3chain_points']:.1f}, "
              f"elora {g['elora_drop_3chain_points']:.1f} points")
    else:
        print(f"  median steps to threshold: lora {summary['median_steps_lora']}, "
              f"elora {summary['median_steps_elora']}")


def _cmd_rank(args) -> int:
    reports, summary = rank.analyze_adapter(args.checkpoint, tau=args.tau)
    out_dir = args.out_dir or args.checkpoint.parent
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "rank.csv"
    rank.write_rank_csv(reports, summary, csv_path)
    valid = [r for r in reports if r.error is None]
    if valid:
        svgplot.bar_chart([r.layer for r in valid],
                          [r.erank_shannon for r in valid],
                          out_dir / "erank_per_layer.svg",
                          title="adapter delta effective rank",
                          xlabel="layer", ylabel="effective rank")
    for r in reports:
        if r.error is not None:
            print(f"{r.layer}: {r.error}")
        else:
            print(f"{r.layer}: erank={r.erank_shannon:.3f} "
                  f"cutoff_rank={r.cutoff_rank} (tau={r.tau})")
    print(f"mean erank={summary['mean_erank_shannon']:.3f} "
          f"mean cutoff={summary['mean_cutoff_rank']:.3f} "
          f"({summary['layers_valid']}/{summary['layers']} layers); wrote {csv_path}")
    return 0


def _cmd_report(args) -> int:
    text = report.build_report(args.runs)
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote report to {args.out}")
    else:
        print(text)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        code = e.code
        return code if isinstance(code, int) else 0
    try:
        return args.func(args)
    except (DatasetError, ConfigError, VocabError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except LorabenchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
