"""Evolutionary architecture search over function-preserving network mutations."""

from .evolution import EvolutionConfig, Search, effect_report, evolve
from .lineage import LineageStore, common_ancestor, crossover
from .morphisms import OPS, MorphConfig, MutationRecord, apply_mutation, replay
from .netgraph import NetworkGraph, build_initial_model, evaluate, forward, topology_signature

__all__ = [
    "EvolutionConfig", "Search", "effect_report", "evolve",
    "LineageStore", "common_ancestor", "crossover",
    "OPS", "MorphConfig", "MutationRecord", "apply_mutation", "replay",
    "NetworkGraph", "build_initial_model", "evaluate", "forward", "topology_signature",
]
