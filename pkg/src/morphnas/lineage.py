"""Mutation-history genomes, common ancestors, crossover and phylogeny export."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .morphisms import MorphConfig, MutationError, MutationRecord, apply_mutation, propose_mutation
from .netgraph import NetworkGraph

log = logging.getLogger(__name__)

REMAP_ATTEMPTS = 5


class CrossoverError(ValueError):
    pass


@dataclass(frozen=True)
class Genotype:
    history: tuple[MutationRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.history)

    def global_ids(self) -> list[int]:
        return [r.global_id for r in self.history]

    def is_prefix_of(self, other: "Genotype") -> bool:
        return len(self) <= len(other) and all(a == b for a, b in zip(self.history, other.history))

    def extend(self, record: MutationRecord) -> "Genotype":
        if self.history and record.global_id <= self.history[-1].global_id:
            raise ValueError(
                f"global id {record.global_id} does not follow {self.history[-1].global_id}"
            )
        return Genotype(self.history + (record,))


def common_ancestor(a: Genotype, b: Genotype) -> Genotype:
    """Longest common prefix of two histories (records compared in full)."""
    k = 0
    for ra, rb in zip(a.history, b.history):
        if ra != rb:
            break
        k += 1
    return Genotype(a.history[:k])


@dataclass
class LineageNode:
    id: int
    parents: tuple[int, ...]
    genotype: Genotype
    birth_round: int
    action: str
    operator: str | None = None
    fitness: float | None = None
    trained_epochs: int = 0
    snapshot: NetworkGraph | None = None
    param_count: int | None = None
    dropped: list[dict] = field(default_factory=list)

    def genotype_json(self) -> dict:
        return {
            "individual_id": self.id,
            "parents": list(self.parents),
            "records": [r.to_json() for r in self.genotype.history],
            "fitness": self.fitness,
            "birth_round": self.birth_round,
        }


class LineageStore:
    """Append-only ancestry log with a weight snapshot per individual."""

    def __init__(self):
        self.nodes: dict[int, LineageNode] = {}
        self._next_id = 0
        self._next_gid = 0
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> LineageNode:
        return self.nodes[node_id]

    def allocate_global_id(self) -> int:
        with self._lock:
            gid = self._next_gid
            self._next_gid += 1
            return gid

    def _add(self, node: LineageNode) -> int:
        with self._lock:
            node.id = self._next_id
            self._next_id += 1
            self.nodes[node.id] = node
            return node.id

    @property
    def root_id(self) -> int:
        for n in self.nodes.values():
            if not n.parents:
                return n.id
        raise KeyError("store has no root individual")

    def add_root(self, graph: NetworkGraph, fitness: float | None = None, trained_epochs: int = 0) -> int:
        if self.nodes:
            raise ValueError("store already has a root")
        return self._add(
            LineageNode(
                0, (), Genotype(), 0, "root", fitness=fitness, trained_epochs=trained_epochs,
                snapshot=graph.copy(), param_count=graph.param_count(),
            )
        )

    def record_mutation(
        self,
        parent_id: int,
        record: MutationRecord,
        child: NetworkGraph,
        birth_round: int = 0,
        fitness: float | None = None,
        trained_epochs: int | None = None,
    ) -> int:
        """Register a child one mutation away from ``parent_id``."""
        parent = self.nodes[parent_id]
        node = LineageNode(
            0, (parent_id,), parent.genotype.extend(record), birth_round, "mutate", record.kind,
            fitness=fitness,
            trained_epochs=parent.trained_epochs if trained_epochs is None else trained_epochs,
            snapshot=child.copy(), param_count=child.param_count(),
        )
        return self._add(node)

    def update(self, node_id: int, graph: NetworkGraph, fitness: float, trained_epochs: int) -> None:
        n = self.nodes[node_id]
        n.snapshot = graph.copy()
        n.fitness = fitness
        n.trained_epochs = trained_epochs
        n.param_count = graph.param_count()

    def children(self, node_id: int) -> list[int]:
        return [n.id for n in self.nodes.values() if node_id in n.parents]

    def find_base(self, target: Genotype) -> LineageNode:
        """Stored individual whose history is the longest prefix of ``target``
        (ties: higher fitness, then lower id)."""
        best = None
        for n in self.nodes.values():
            if n.snapshot is None or n.fitness is None or not n.genotype.is_prefix_of(target):
                continue
            key = (len(n.genotype), n.fitness, -n.id)
            if best is None or key > best[0]:
                best = (key, n)
        if best is None:
            raise KeyError("no stored individual is an ancestor of the requested history")
        return best[1]

    def materialize(self, target: Genotype) -> tuple[NetworkGraph, LineageNode]:
        """Network (with inherited trained weights) for an arbitrary history.

        Starts from the closest stored ancestor and replays whatever records
        are missing; every replayed record is function preserving.
        """
        base = self.find_base(target)
        g = base.snapshot.copy()
        for record in target.history[len(base.genotype):]:
            apply_mutation(g, record)
        return g, base


def _select_records(diff: list[MutationRecord], p_inherit: float, rng, flips: dict | None) -> list[MutationRecord]:
    if flips is not None:
        return [r for r in diff if flips.get(r.global_id, False)]
    for _ in range(100):
        keep = [r for r in diff if rng.random() < p_inherit]
        if keep:
            return keep
    return [diff[int(rng.integers(len(diff)))]]


@dataclass
class CrossoverResult:
    offspring_id: int
    graph: NetworkGraph
    ancestor: Genotype
    base_id: int
    inherited: list[MutationRecord]
    dropped: list[MutationRecord]
    remapped: list[tuple[MutationRecord, MutationRecord]]


def crossover(
    store: LineageStore,
    parent1: int,
    parent2: int,
    p_inherit: float = 0.5,
    rng: np.random.Generator | None = None,
    config: MorphConfig | None = None,
    flips: dict[int, bool] | None = None,
    birth_round: int = 0,
) -> CrossoverResult:
    """Graft the parents' differing mutations onto their common ancestor.

    Records present in only one parent are inherited independently with
    probability ``p_inherit`` (``flips`` maps global ids to forced outcomes);
    records present in both parents beyond the shared prefix are always
    kept.  Selected records are re-applied in global-id order to the
    ancestor's trained network.  A record whose site no longer exists is
    re-sited within its block, up to five attempts, before being dropped.
    The offspring is registered untrained (fitness None).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    config = config or MorphConfig()
    a = store[parent1].genotype
    b = store[parent2].genotype
    if a == b:
        raise CrossoverError("crossover parents have identical genotypes")
    anc = common_ancestor(a, b)
    k = len(anc)
    sa, sb = a.history[k:], b.history[k:]
    shared = [r for r in sa if r in sb]
    diff = sorted([r for r in sa if r not in sb] + [r for r in sb if r not in sa], key=lambda r: r.global_id)
    chosen = _select_records(diff, p_inherit, rng, flips) if diff else []
    todo = sorted(shared + chosen, key=lambda r: r.global_id)

    graph, base = store.materialize(anc)
    applied, dropped, remapped = [], [], []
    for record in todo:
        try:
            apply_mutation(graph, record)
            applied.append(record)
            continue
        except MutationError:
            pass
        new = None
        kind_only = MorphConfig(config.noise_max, (record.kind,), config.widen_max_fraction, config.kernel, 1)
        for _ in range(REMAP_ATTEMPTS):
            try:
                cand = propose_mutation(graph, kind_only, rng, record.global_id, record.location.get("block"))
                apply_mutation(graph, cand)
            except MutationError:
                continue
            new = cand
            break
        if new is None:
            log.info("crossover %s x %s: dropped unreplayable %s", parent1, parent2, record.label())
            dropped.append(record)
        else:
            remapped.append((record, new))
            applied.append(new)

    history = Genotype(anc.history + tuple(applied))
    node = LineageNode(
        0, (parent1, parent2), history, birth_round, "crossover", "crossover",
        trained_epochs=base.trained_epochs, snapshot=graph.copy(), param_count=graph.param_count(),
        dropped=[r.to_json() for r in dropped],
    )
    oid = store._add(node)
    return CrossoverResult(oid, graph, anc, base.id, applied, dropped, remapped)


# ---------------------------------------------------------------------------
# phylogeny export
# ---------------------------------------------------------------------------

# light-to-dark sequential palette, one colour per fitness bin
PALETTE = ("#ffffcc", "#c2e699", "#78c679", "#31a354", "#006837")


def _fitness_bin(f: float | None, lo: float, hi: float) -> int | None:
    if f is None:
        return None
    if hi <= lo:
        return len(PALETTE) - 1
    return min(int((f - lo) / (hi - lo) * len(PALETTE)), len(PALETTE) - 1)


def phylo_json(store: LineageStore) -> dict:
    nodes = []
    for n in store.nodes.values():
        nodes.append(
            {
                "id": n.id,
                "parents": list(n.parents),
                "action": n.action,
                "operator": n.operator,
                "fitness": n.fitness,
                "birth_round": n.birth_round,
                "trained_epochs": n.trained_epochs,
                "param_count": n.param_count,
                "records": [r.to_json() for r in n.genotype.history],
                "dropped": n.dropped,
            }
        )
    edges = [[p, n.id] for n in store.nodes.values() for p in n.parents]
    return {"format": "phylogeny", "version": 1, "nodes": nodes, "edges": edges}


def phylo_dot(doc: dict) -> str:
    """Graphviz digraph: one node per individual, parent -> child edges."""
    fits = [n["fitness"] for n in doc["nodes"] if n["fitness"] is not None]
    lo, hi = (min(fits), max(fits)) if fits else (0.0, 1.0)
    lines = [
        "digraph phylogeny {",
        "  rankdir=LR;",
        '  node [shape=box, style=filled, fontname="Helvetica"];',
    ]
    for n in doc["nodes"]:
        fit = "untrained" if n["fitness"] is None else f"{n['fitness']:.4f}"
        op = n["operator"] or n["action"]
        b = _fitness_bin(n["fitness"], lo, hi)
        colour = "#dddddd" if b is None else PALETTE[b]
        lines.append(f'  n{n["id"]} [label="{n["id"]}\\n{op}\\n{fit}", fillcolor="{colour}"];')
    for p, c in doc["edges"]:
        lines.append(f"  n{p} -> n{c};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_phylo(store: LineageStore, format: str = "dot") -> str:
    doc = phylo_json(store)
    if format == "json":
        return json.dumps(doc, indent=1, sort_keys=True)
    if format == "dot":
        return phylo_dot(doc)
    raise ValueError(f"unknown phylogeny format {format!r}")
