"""Command-line interface: search, verify, export-tree, ablate, eval.

Exit codes: 0 ok, 1 usage, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import pickle
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, validate
from .data import DataError, LoadedData, load_dataset
from .evolution import BudgetError, EvolutionResult, Search, effect_report
from .lineage import phylo_dot, phylo_json
from .morphisms import OPS, MorphConfig, MutationError, MutationRecord, apply_mutation, legal_sites, sample_plan
from .netgraph import FormatError, build_initial_model, decode_network, encode_network, evaluate, forward

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
OUTPUT_ENV = "MORPHNAS_OUTPUT_DIR"
CHECKPOINT = "checkpoint.pkl"

log = logging.getLogger("morphnas")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, data: bytes | str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _output_dir(cfg: RunConfig, flag: str | None) -> Path:
    out = flag or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    return Path(out)


def _initial_model(cfg: RunConfig, data: LoadedData):
    m = cfg.model
    seed = cfg.seed if m.init_seed is None else m.init_seed
    return build_initial_model(data.input_shape, data.classes, m.stem, m.block, m.final, seed, cfg.dtype)


def _rounds_jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def write_artifacts(out: Path, result: EvolutionResult) -> dict:
    store = result.store
    best = store[result.best_id]
    _atomic_write(out / "rounds.jsonl", _rounds_jsonl(result.log))
    _atomic_write(out / "best.mnet", encode_network(best.snapshot))
    _atomic_write(out / "best_genotype.json", json.dumps(best.genotype_json(), indent=1))
    genotypes = [n.genotype_json() for n in store.nodes.values()]
    _atomic_write(out / "genotypes.json", json.dumps(genotypes, indent=1))
    doc = phylo_json(store)
    _atomic_write(out / "lineage.json", json.dumps(doc, indent=1, sort_keys=True))
    _atomic_write(out / "phylo.dot", phylo_dot(doc))
    report = {
        "best_id": result.best_id,
        "best_fitness": result.best_fitness,
        "initial_fitness": result.initial_fitness,
        "param_count": best.param_count,
        "stop_reason": result.stop_reason,
        "rounds": max((r["round"] for r in result.log), default=0),
        "best_trace": result.best_trace,
        "effect_report": effect_report(result.log),
    }
    _atomic_write(out / "report.json", json.dumps(report, indent=1, sort_keys=True))
    return report


def run_search(cfg: RunConfig, out: Path, resume: bool = False, data: LoadedData | None = None, stop_after=None):
    """Run (or resume) one search, writing every artifact into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_dataset(cfg.dataset, cfg.dtype)
    ckpt = out / CHECKPOINT

    def on_round(search: Search, rec: dict) -> None:
        _atomic_write(out / "rounds.jsonl", _rounds_jsonl(search.log))
        log.info("round %s %s -> fitness %s (best %s)", rec["round"], rec["action"],
                 rec.get("fitness_child"), rec.get("best_after"))
        if stop_after is not None and search.round >= stop_after:
            raise KeyboardInterrupt

    if resume and ckpt.exists():
        search = Search.resume(ckpt, data.train, data.val, cfg.dataset.augmenter(), on_round)
    else:
        _atomic_write(out / "config.json", json.dumps(cfg.to_json(), indent=1, sort_keys=True))
        search = Search(
            cfg.evolution_config(), data.train, data.val, _initial_model(cfg, data),
            cfg.morph_config(), cfg.training.to_train_config(), cfg.dataset.augmenter(), ckpt, on_round,
        )
    result = search.run()
    return result, write_artifacts(out, result)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def verify_network(g, trials: int, noise_max: float, seed: int = 0, batch: int = 4) -> dict[str, float]:
    """Max |delta logits| per operator over ``trials`` random applications."""
    rng = np.random.default_rng(seed)
    cfg = MorphConfig(noise_max=noise_max)
    x = rng.standard_normal((batch,) + tuple(g.input_shape)).astype(g.dtype)
    base = forward(g, x, "infer")
    worst = {}
    for op in OPS:
        dev = 0.0
        for t in range(trials):
            sites = legal_sites(g, op)
            if not sites:
                break
            h = g.copy()
            loc = sites[int(rng.integers(len(sites)))]
            rec = MutationRecord(10**6 + t, op, loc, sample_plan(h, op, loc, cfg, rng))
            apply_mutation(h, rec)
            dev = max(dev, float(np.abs(forward(h, x, "infer") - base).max()))
        worst[op] = dev
    return worst


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_search(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _output_dir(cfg, args.output_dir)
    result, report = run_search(cfg, out, resume=args.resume)
    print(json.dumps({k: report[k] for k in ("best_id", "best_fitness", "initial_fitness", "param_count", "stop_reason")}))
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        g = decode_network(Path(args.network).read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read {args.network}: {exc}") from exc
    if args.precision:
        g = g.astype(args.precision)
    worst = verify_network(g, args.trials, args.delta, args.seed)
    ok = args.delta > 0 or all(v <= args.tolerance for v in worst.values())
    report = {"trials": args.trials, "delta": args.delta, "tolerance": args.tolerance,
              "max_deviation": worst, "passed": ok}
    print(json.dumps(report, indent=1))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_export_tree(args) -> int:
    run = Path(args.run_dir)
    lineage = run / "lineage.json"
    if lineage.exists():
        doc = json.loads(lineage.read_text())
    elif (run / CHECKPOINT).exists():
        with open(run / CHECKPOINT, "rb") as fh:
            doc = phylo_json(pickle.load(fh).store)
    else:
        raise DataError(f"{run} holds no lineage.json or checkpoint")
    validate(doc, "phylogeny")
    text = phylo_dot(doc) if args.format == "dot" else json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        _atomic_write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def run_ablation(cfg: RunConfig, out: Path, seeds: list[int], results: dict | None = None) -> dict:
    """Matched-seed searches with and without crossover.

    Both arms are identical until the first crossover round, so the
    crossover-free arm is forked from the other arm's state just before it.
    ``results``, when given, receives the in-memory EvolutionResult of every
    (seed, arm) pair.
    """
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg.dataset, cfg.dtype)
    arms = {"crossover": [], "no_crossover": []}
    for seed in seeds:
        c = RunConfig.from_json({**cfg.to_json(), "seed": seed})
        ev = c.evolution_config()
        ev.crossover = True
        fork_round = ev.crossover_period - 1
        forked = {}

        def on_round(search, rec, forked=forked):
            if search.warm and search.round == fork_round and not forked:
                forked["state"] = pickle.dumps(search)

        arm_dir = out / f"seed{seed}"
        started = time.perf_counter()
        search = Search(ev, data.train, data.val, _initial_model(c, data), c.morph_config(),
                        c.training.to_train_config(), c.dataset.augmenter(), None, on_round)
        res_x = search.run()
        wall_x = time.perf_counter() - started
        write_artifacts(_mk(arm_dir / "crossover"), res_x)
        if "state" in forked:
            other = pickle.loads(forked["state"])
            other.train, other.val, other.augment = data.train, data.val, c.dataset.augmenter()
            other.config.crossover = False
        else:
            ev_off = c.evolution_config()
            ev_off.crossover = False
            other = Search(ev_off, data.train, data.val, _initial_model(c, data), c.morph_config(),
                           c.training.to_train_config(), c.dataset.augmenter())
        res_n = other.run()
        write_artifacts(_mk(arm_dir / "no_crossover"), res_n)
        for name, res, s, wall in (("crossover", res_x, search, wall_x), ("no_crossover", res_n, other, None)):
            if results is not None:
                results[(seed, name)] = res
            arms[name].append({
                "seed": seed,
                "best_fitness": res.best_fitness,
                "initial_fitness": res.initial_fitness,
                "crossover_rounds": sum(1 for r in res.log if r["action"] == "crossover"),
                "rounds": res.log[-1]["round"],
                "stop_reason": res.stop_reason,
                "search_seconds": round(s.elapsed, 1),
                "wall_seconds": None if wall is None else round(wall, 1),
            })
            log.info("seed %d %s: best %.4f", seed, name, res.best_fitness)
    summary = {}
    for name, rows in arms.items():
        f = [r["best_fitness"] for r in rows]
        summary[name] = {"per_seed": rows, "mean_best_fitness": float(np.mean(f)), "best_fitness": float(max(f))}
    pairs = list(zip(arms["crossover"], arms["no_crossover"]))
    summary["crossover_not_worse_on_mean"] = (
        summary["crossover"]["mean_best_fitness"] >= summary["no_crossover"]["mean_best_fitness"]
    )
    summary["crossover_worse_on_every_seed"] = all(a["best_fitness"] < b["best_fitness"] for a, b in pairs)
    _atomic_write(out / "ablation.json", json.dumps(summary, indent=1, sort_keys=True))
    return summary


def _mk(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _output_dir(cfg, args.output_dir)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    summary = run_ablation(cfg, out, seeds)
    print(json.dumps({k: v for k, v in summary.items() if not isinstance(v, dict)} |
                     {arm: {k: summary[arm][k] for k in ("mean_best_fitness", "best_fitness")}
                      for arm in ("crossover", "no_crossover")}, indent=1))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    try:
        g = decode_network(Path(args.network).read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read {args.network}: {exc}") from exc
    data = load_dataset(cfg.dataset, g.dtype)
    result = {
        "validation_accuracy": evaluate(g, data.val),
        "train_accuracy": evaluate(g, data.train),
        "param_count": g.param_count(),
    }
    print(json.dumps(result))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="morphnas", description="evolutionary architecture search with function-preserving mutations")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("search", help="run an evolutionary search")
    s.add_argument("config")
    s.add_argument("--output-dir")
    s.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. evolution.max_rounds=5")
    s.set_defaults(func=cmd_search)

    v = sub.add_parser("verify", help="check function preservation of every operator on a network")
    v.add_argument("network")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--delta", type=float, default=0.0, help="widen noise upper bound")
    v.add_argument("--tolerance", type=float, default=None)
    v.add_argument("--precision", choices=["float32", "float64"])
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("export-tree", help="export the phylogenetic tree of a run")
    e.add_argument("run_dir")
    e.add_argument("--format", choices=["dot", "json"], default="dot")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export_tree)

    a = sub.add_parser("ablate", help="compare searches with and without crossover on matched seeds")
    a.add_argument("config")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--output-dir")
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)

    ev = sub.add_parser("eval", help="evaluate a network document on the configured dataset")
    ev.add_argument("network")
    ev.add_argument("config")
    ev.add_argument("--set", action="append", metavar="KEY=VALUE")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "tolerance", 1) is None:
        args.tolerance = 1e-8 if args.precision == "float64" else 1e-4
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, BudgetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MutationError as exc:
        print(f"verification error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
