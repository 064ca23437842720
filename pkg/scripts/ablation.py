"""Matched-seed comparison of search with and without crossover.

    python3 scripts/ablation.py [--seeds 5] [--out runs/ablation]
"""

import argparse
from pathlib import Path

from morphnas.cli import run_ablation
from morphnas.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=ROOT / "configs" / "desk.json")
    p.add_argument("--out", default=ROOT / "runs" / "ablation")
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    cfg = load_config(args.config)
    summary = run_ablation(cfg, Path(args.out), list(range(cfg.seed, cfg.seed + args.seeds)))
    print("seed  crossover  no_crossover")
    for a, b in zip(summary["crossover"]["per_seed"], summary["no_crossover"]["per_seed"]):
        print(f"{a['seed']:4d}  {a['best_fitness']:9.4f}  {b['best_fitness']:12.4f}")
    print(f"mean  {summary['crossover']['mean_best_fitness']:9.4f}  {summary['no_crossover']['mean_best_fitness']:12.4f}")


if __name__ == "__main__":
    main()
