"""Population management: tournament selection, aging/non-aging discard,
the mutation/crossover round loop, checkpointing and effect statistics."""

from __future__ import annotations

import logging
import os
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .lineage import CrossoverError, LineageStore, crossover
from .morphisms import MorphConfig, OPS, sample_mutation
from .netgraph import Dataset, NetworkGraph, TrainConfig, evaluate, train_epochs

log = logging.getLogger(__name__)


class BudgetError(RuntimeError):
    pass


@dataclass
class EvolutionConfig:
    k: int = 3
    lam: float = 0.5
    population: int = 20
    initial_count: int = 12
    crossover_period: int = 5
    crossover: bool = True
    p_inherit: float = 0.5
    epochs_mutation: int = 15
    epochs_crossover: tuple[int, int] = (7, 15)
    epochs_initial: int = 63
    patience: int = 25
    max_rounds: int | None = None
    max_seconds: float | None = None
    seed: int = 0
    log_wall_time: bool = True

    def __post_init__(self):
        self.epochs_crossover = tuple(self.epochs_crossover)
        if not 1 <= self.k <= self.initial_count:
            raise ValueError(f"tournament size k={self.k} must lie in [1, initial_count={self.initial_count}]")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not 1 <= self.initial_count <= self.population:
            raise ValueError("initial_count must lie in [1, N]")
        if self.crossover_period < 1:
            raise ValueError("crossover_period must be positive")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")
        if not 0 < self.p_inherit <= 1:
            raise ValueError("p_inherit must lie in (0, 1]")


@dataclass
class Individual:
    id: int
    fitness: float
    birth_round: int
    trained_epochs: int
    graph: NetworkGraph = field(repr=False, compare=False)


# ---------------------------------------------------------------------------
# selection and discard
# ---------------------------------------------------------------------------


def _fitter_key(ind: Individual):
    # higher fitness, then younger, then lower id
    return (ind.fitness, ind.birth_round, -ind.id)


def tournament_select(pop: list[Individual], k: int, rng: np.random.Generator) -> int:
    """Fittest of ``k`` individuals drawn uniformly without replacement."""
    if not pop:
        raise ValueError("tournament on an empty population")
    if not 1 <= k <= len(pop):
        raise ValueError(f"tournament size {k} vs population of {len(pop)}")
    picks = rng.choice(len(pop), size=k, replace=False)
    return max((pop[i] for i in picks), key=_fitter_key).id


def select_crossover_parents(pop: list[Individual], store: LineageStore) -> tuple[int, int]:
    """The fittest individual and the fittest one with a different genotype."""
    ranked = sorted(pop, key=_fitter_key, reverse=True)
    if not ranked:
        raise CrossoverError("empty population")
    first = ranked[0]
    g1 = store[first.id].genotype
    for other in ranked[1:]:
        if store[other.id].genotype != g1:
            return first.id, other.id
    raise CrossoverError("all individuals share one genotype")


def discard_one(pop: list[Individual], lam: float, rng: np.random.Generator, protected=()) -> int:
    """Remove the worst with probability ``lam``, otherwise the oldest.

    Worst ties go to the older individual; oldest ties go to the less fit.
    Protected ids (this round's parents) are never removed.
    """
    candidates = [p for p in pop if p.id not in set(protected)]
    if not candidates:
        raise ValueError("no individual may be discarded")
    if rng.random() < lam:
        victim = min(candidates, key=lambda p: (p.fitness, p.birth_round, p.id))
    else:
        victim = min(candidates, key=lambda p: (p.birth_round, p.fitness, p.id))
    pop.remove(victim)
    return victim.id


def _rank(value: float, others) -> int:
    return 1 + sum(1 for o in others if o > value)


# ---------------------------------------------------------------------------
# the search loop
# ---------------------------------------------------------------------------


@dataclass
class EvolutionResult:
    best_id: int
    best_fitness: float
    initial_fitness: float
    store: LineageStore
    log: list[dict]
    population: list[int]
    best_trace: list[float]
    stop_reason: str

    @property
    def best_graph(self) -> NetworkGraph:
        return self.store[self.best_id].snapshot


class Search:
    """Resumable evolutionary search.

    All state that influences future rounds lives on this object and is
    pickled at every round boundary when ``checkpoint_path`` is set.
    """

    _transient = ("train", "val", "augment", "on_round", "checkpoint_path")

    def __init__(
        self,
        config: EvolutionConfig,
        train: Dataset,
        val: Dataset,
        initial_graph: NetworkGraph,
        morph: MorphConfig | None = None,
        train_config: TrainConfig | None = None,
        augment: Callable | None = None,
        checkpoint_path=None,
        on_round: Callable[["Search", dict], None] | None = None,
    ):
        self.config = config
        self.morph = morph or MorphConfig()
        self.train_config = train_config or TrainConfig()
        self.train = train
        self.val = val
        self.augment = augment
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.on_round = on_round

        self.initial_graph = initial_graph.copy()
        self.store = LineageStore()
        self.population: list[Individual] = []
        self.rng = np.random.default_rng(config.seed)
        self.round = 0
        self.bursts = 0
        self.log: list[dict] = []
        self.best_trace: list[float] = []
        self.best_id: int | None = None
        self.stale = 0
        self.warm = False
        self.done: str | None = None
        self.elapsed = 0.0

    # -- persistence ---------------------------------------------------------

    def __getstate__(self):
        state = self.__dict__.copy()
        for k in self._transient:
            state[k] = None
        return state

    def checkpoint(self) -> None:
        if self.checkpoint_path is None:
            return
        tmp = self.checkpoint_path.with_suffix(self.checkpoint_path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)
        os.replace(tmp, self.checkpoint_path)

    @classmethod
    def resume(cls, path, train: Dataset, val: Dataset, augment=None, on_round=None) -> "Search":
        with open(path, "rb") as fh:
            obj = pickle.load(fh)
        if not isinstance(obj, cls):
            raise ValueError(f"{path} is not a search checkpoint")
        obj.train, obj.val, obj.augment, obj.on_round = train, val, augment, on_round
        obj.checkpoint_path = Path(path)
        return obj

    # -- helpers -------------------------------------------------------------

    def _train(self, g: NetworkGraph, epochs: int, offset: int) -> None:
        self.bursts += 1
        rng = np.random.default_rng([self.config.seed, self.bursts])
        train_epochs(g, self.train, epochs, self.train_config, offset, rng, self.augment)

    def _best_fitness(self) -> float:
        return self.store[self.best_id].fitness

    def _note_best(self, node_id: int) -> bool:
        f = self.store[node_id].fitness
        if self.best_id is None or f > self._best_fitness():
            self.best_id = node_id
            return True
        return False

    def _individual(self, node_id: int) -> Individual:
        n = self.store[node_id]
        return Individual(n.id, n.fitness, n.birth_round, n.trained_epochs, n.snapshot)

    def _mutate_child(self, parent_id: int, birth_round: int) -> tuple[int, str]:
        parent = self.store[parent_id]
        g = parent.snapshot.copy()
        gid = self.store.allocate_global_id()
        record, _ = sample_mutation(g, self.morph, self.rng, gid)
        epochs = self.config.epochs_mutation
        self._train(g, epochs, parent.trained_epochs)
        fit = evaluate(g, self.val)
        cid = self.store.record_mutation(
            parent_id, record, g, birth_round, fit, parent.trained_epochs + epochs
        )
        return cid, record.kind

    def _crossover_child(self, p1: int, p2: int, birth_round: int) -> int:
        res = crossover(self.store, p1, p2, self.config.p_inherit, self.rng, self.morph, birth_round=birth_round)
        g = res.graph
        offset = self.store[res.offspring_id].trained_epochs
        for epochs in self.config.epochs_crossover:
            self._train(g, epochs, offset)
            offset += epochs
        self.store.update(res.offspring_id, g, evaluate(g, self.val), offset)
        return res.offspring_id

    def _out_of_time(self, started: float) -> bool:
        limit = self.config.max_seconds
        return limit is not None and self.elapsed + (time.perf_counter() - started) > limit

    # -- phases --------------------------------------------------------------

    def warm_up(self) -> None:
        """Train the initial model and spawn the single-mutation population."""
        started = time.perf_counter()
        g = self.initial_graph.copy()
        self._train(g, self.config.epochs_initial, 0)
        root = self.store.add_root(g, evaluate(g, self.val), self.config.epochs_initial)
        self._note_best(root)
        if self._out_of_time(started):
            raise BudgetError("search budget exhausted before initial training completed")
        self.log.append(self._record(0, "initial", [], root, None, None, 0.0))
        for _ in range(self.config.initial_count):
            t0 = time.perf_counter()
            before = self._best_fitness()
            cid, kind = self._mutate_child(root, 0)
            self.population.append(self._individual(cid))
            self._note_best(cid)
            rec = self._record(0, "mutate", [root], cid, kind, before, time.perf_counter() - t0)
            self.log.append(rec)
        self.warm = True
        self.best_trace.append(self._best_fitness())
        self.elapsed += time.perf_counter() - started
        self.checkpoint()

    def _record(self, rnd, action, parents, child, operator, best_before, wall, **extra) -> dict:
        node = self.store[child]
        others = [p.fitness for p in self.population if p.id != child]
        rec = {
            "round": rnd,
            "action": action,
            "parents": list(parents),
            "parent_fitness": [self.store[p].fitness for p in parents],
            "child": child,
            "operator": operator,
            "fitness_before_best": best_before,
            "fitness_child": node.fitness,
            "child_rank": _rank(node.fitness, others),
            "param_count": node.param_count,
            "trained_epochs": node.trained_epochs,
            "wall_time": round(wall, 3) if self.config.log_wall_time else None,
        }
        rec.update(extra)
        return rec

    def step(self) -> dict:
        """Run one round; returns its log record."""
        started = time.perf_counter()
        self.round += 1
        r = self.round
        cfg = self.config
        best_before = self._best_fitness()
        ranks_before = {p.id: _rank(p.fitness, [q.fitness for q in self.population if q.id != p.id])
                        for p in self.population}
        parents, action, operator = [], "mutate", None
        if cfg.crossover and r % cfg.crossover_period == 0:
            try:
                p1, p2 = select_crossover_parents(self.population, self.store)
            except CrossoverError as exc:
                log.info("round %d: crossover skipped (%s)", r, exc)
                rec = {"round": r, "action": "skip", "parents": [], "child": None, "operator": None,
                       "fitness_before_best": best_before, "fitness_child": None, "reason": str(exc),
                       "wall_time": None}
                self._finish_round(rec, improved=False)
                return rec
            parents, action, operator = [p1, p2], "crossover", "crossover"
            child = self._crossover_child(p1, p2, r)
        else:
            p = tournament_select(self.population, cfg.k, self.rng)
            parents = [p]
            child, operator = self._mutate_child(p, r)
        self.population.append(self._individual(child))
        improved = self._note_best(child)
        child_rank = _rank(self.store[child].fitness, [q.fitness for q in self.population if q.id != child])
        discarded = None
        if len(self.population) > cfg.population:
            discarded = discard_one(self.population, cfg.lam, self.rng, protected=parents)
        rec = self._record(
            r, action, parents, child, operator, best_before, time.perf_counter() - started,
            child_rank=child_rank,
            parent_top2=all(ranks_before.get(p, 99) <= 2 for p in parents),
            discarded=discarded,
            population_size=len(self.population),
        )
        self.elapsed += time.perf_counter() - started
        self._finish_round(rec, improved)
        return rec

    def _finish_round(self, rec: dict, improved: bool) -> None:
        self.stale = 0 if improved else self.stale + 1
        self.best_trace.append(self._best_fitness())
        rec["best_after"] = self._best_fitness()
        self.log.append(rec)
        cfg = self.config
        if self.stale > cfg.patience:
            self.done = "patience"
        elif cfg.max_rounds is not None and self.round >= cfg.max_rounds:
            self.done = "max_rounds"
        elif cfg.max_seconds is not None and self.elapsed >= cfg.max_seconds:
            self.done = "max_seconds"
        self.checkpoint()
        if self.on_round is not None:
            self.on_round(self, rec)

    def run(self) -> EvolutionResult:
        if not self.warm:
            self.warm_up()
            if self.on_round is not None:
                self.on_round(self, self.log[-1])
        while self.done is None:
            self.step()
        return self.result()

    def result(self) -> EvolutionResult:
        return EvolutionResult(
            best_id=self.best_id,
            best_fitness=self._best_fitness(),
            initial_fitness=self.store[self.store.root_id].fitness,
            store=self.store,
            log=list(self.log),
            population=[p.id for p in self.population],
            best_trace=list(self.best_trace),
            stop_reason=self.done or "running",
        )


def evolve(
    config: EvolutionConfig,
    train: Dataset,
    val: Dataset,
    initial_graph: NetworkGraph,
    morph: MorphConfig | None = None,
    train_config: TrainConfig | None = None,
    augment=None,
    checkpoint_path=None,
    on_round=None,
) -> EvolutionResult:
    if len(val) == 0 or len(train) == 0:
        raise ValueError("training and validation sets must be non-empty")
    search = Search(config, train, val, initial_graph, morph, train_config, augment, checkpoint_path, on_round)
    return search.run()


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def _outcome_row(pairs) -> dict:
    better = sum(1 for child, ref in pairs if child > ref)
    worse = sum(1 for child, ref in pairs if child < ref)
    same = sum(1 for child, ref in pairs if child == ref)
    total = better + worse + same
    frac = (lambda x: x / total) if total else (lambda x: 0.0)
    return {
        "total": total,
        "better": better,
        "worse": worse,
        "unchanged": same,
        "better_frac": frac(better),
        "worse_frac": frac(worse),
        "unchanged_frac": frac(same),
    }


def effect_report(round_log: list[dict]) -> dict:
    """Fitness-change statistics per operator, and Top1/Top5 yield of
    offspring bred from Top2 parents (mutation vs crossover)."""
    per_op: dict[str, list] = {op: [] for op in OPS}
    per_op["crossover"] = []
    top = {a: {"top2_parents": 0, "top1": 0, "top5": 0} for a in ("mutate", "crossover")}
    for rec in round_log:
        action = rec.get("action")
        if action not in ("mutate", "crossover") or rec.get("fitness_child") is None:
            continue
        ref = max(rec["parent_fitness"])
        key = rec["operator"] if action == "mutate" else "crossover"
        per_op.setdefault(key, []).append((rec["fitness_child"], ref))
        if rec.get("parent_top2"):
            t = top[action]
            t["top2_parents"] += 1
            t["top1"] += rec["child_rank"] <= 1
            t["top5"] += rec["child_rank"] <= 5
    rows = {op: _outcome_row(pairs) for op, pairs in per_op.items()}
    mutation_pairs = [p for op, pairs in per_op.items() if op != "crossover" for p in pairs]
    rows["all_mutations"] = _outcome_row(mutation_pairs)
    for t in top.values():
        n = t["top2_parents"]
        t["top1_frac"] = t["top1"] / n if n else 0.0
        t["top5_frac"] = t["top5"] / n if n else 0.0
    return {"operators": rows, "top_yield": top}
