"""Pair-ratio sweep, ablation and report for one config, then a verdict summary.

    python scripts/pair_ratio_experiment.py --config configs/default.yaml --out runs
"""

import argparse
from pathlib import Path

from infomae.cli import dispatch
from infomae.config import parse_config
from infomae.evaluation import median_accuracy, ratio_trend, read_results


def summarize(sweep_dir: Path, ablate_dir: Path, ratio: float):
    rows = read_results(sweep_dir / "results.tsv")
    variants = sorted({r.variant for r in rows})
    print(f"median probe accuracy at pair ratio {ratio}:")
    for v in variants:
        print(f"  {v:10s} {median_accuracy(rows, v, ratio):.3f}")
    if "full" in variants:
        print(f"Spearman(ratio, full accuracy) = {ratio_trend(rows, 'full'):.2f}")
    rows = read_results(ablate_dir / "results.tsv")
    print("ablations:")
    for v in sorted({r.variant for r in rows}):
        print(f"  {v:10s} {median_accuracy(rows, v):.3f}")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", default="runs")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    cfg = parse_config(args.config, [*args.overrides, ("out", args.out)])
    sweep = dispatch("sweep", cfg)
    ablate = dispatch("ablate", cfg)
    report = dispatch("report", cfg, [str(sweep), str(ablate)])
    summarize(sweep, ablate, cfg.experiment.ratios[0])
    print(f"report: {report}")


if __name__ == "__main__":
    main()
