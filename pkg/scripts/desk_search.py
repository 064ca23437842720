"""Run one desk-scale search and print the headline numbers.

    python3 scripts/desk_search.py [--config configs/desk.json] [--out runs/desk]
"""

import argparse
import json
import time
from pathlib import Path

from morphnas.cli import run_search
from morphnas.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=ROOT / "configs" / "desk.json")
    p.add_argument("--out", default=ROOT / "runs" / "desk")
    p.add_argument("--set", action="append", default=[])
    args = p.parse_args()
    cfg = load_config(args.config, args.set)
    started = time.perf_counter()
    run_search(cfg, Path(args.out))
    report = json.loads((Path(args.out) / "report.json").read_text())
    ops = report["effect_report"]["operators"]
    print(f"initial {report['initial_fitness']:.4f} -> best {report['best_fitness']:.4f} "
          f"({report['param_count']} params, {report['stop_reason']}) in {time.perf_counter() - started:.0f}s")
    for name, row in ops.items():
        if row["total"]:
            print(f"  {name:14s} {row['better']:3d}/{row['total']:3d} better")


if __name__ == "__main__":
    main()
