import pickle

import numpy as np
import pytest

from morphnas.data import DatasetSpec, load_dataset
from morphnas.evolution import (
    BudgetError,
    EvolutionConfig,
    Individual,
    Search,
    discard_one,
    effect_report,
    evolve,
    select_crossover_parents,
    tournament_select,
)
from morphnas.lineage import CrossoverError, LineageStore
from morphnas.morphisms import MutationRecord
from morphnas.netgraph import TrainConfig, build_initial_model
from oracles import tournament_probabilities


def _pop(fits, births=None):
    births = births or [0] * len(fits)
    return [Individual(i, f, b, 0, None) for i, (f, b) in enumerate(zip(fits, births))]


@pytest.fixture(scope="module")
def tiny():
    data = load_dataset(DatasetSpec(classes=2, image_size=8, samples=120, augment_pad=1))
    g = build_initial_model(data.input_shape, 2, 4, 4, 4, seed=0)
    return data, g


def _cfg(**kw):
    base = dict(k=2, population=4, initial_count=3, epochs_initial=1, epochs_mutation=1,
                epochs_crossover=(1, 1), crossover_period=2, max_rounds=5, log_wall_time=False)
    base.update(kw)
    return EvolutionConfig(**base)


def _search(tiny, cfg, **kw):
    data, g = tiny
    return Search(cfg, data.train, data.val, g, train_config=TrainConfig(batch_size=16), **kw)


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(k=0), dict(lam=1.5), dict(initial_count=30), dict(k=4, initial_count=3)])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        EvolutionConfig(**{"population": 20, **bad})


# -- tournament ------------------------------------------------------------------


def test_tournament_single():
    assert tournament_select(_pop([0.3]), 1, np.random.default_rng(0)) == 0


def test_tournament_exhaustive_is_global_best():
    pop = _pop([0.1, 0.9, 0.5, 0.7])
    rng = np.random.default_rng(0)
    assert {tournament_select(pop, 4, rng) for _ in range(50)} == {1}


def test_tournament_ties_prefer_younger_then_lower_id():
    pop = _pop([0.5, 0.5, 0.5], births=[1, 3, 3])
    assert tournament_select(pop, 3, np.random.default_rng(0)) == 1


def test_tournament_frequencies_match_enumeration():
    fits = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    pop = _pop(fits)
    rng = np.random.default_rng(1)
    draws = 20_000
    counts = np.bincount([tournament_select(pop, 3, rng) for _ in range(draws)], minlength=6)
    np.testing.assert_allclose(counts / draws, tournament_probabilities(6, 3), atol=0.01)


def test_enumerated_probabilities():
    assert tournament_probabilities(6, 3) == [10 / 20, 6 / 20, 3 / 20, 1 / 20, 0, 0]


# -- crossover parents -------------------------------------------------------


def _store_with(genotypes):
    store = LineageStore()
    from morphnas.lineage import Genotype, LineageNode

    for i, hist in enumerate(genotypes):
        recs = tuple(MutationRecord(g, "identity", {"block": 0, "edge": ["a", "b"]}) for g in hist)
        store._add(LineageNode(0, () if i == 0 else (0,), Genotype(recs), 0, "mutate"))
    return store


def test_parents_distinct_pair():
    store = _store_with([(1,), (2,)])
    assert select_crossover_parents(_pop([0.4, 0.6]), store) == (1, 0)


def test_parents_skip_shared_genotype():
    store = _store_with([(1,), (1,), (2,)])
    assert select_crossover_parents(_pop([0.9, 0.8, 0.1]), store) == (0, 2)


def test_parents_all_identical():
    store = _store_with([(1,), (1,)])
    with pytest.raises(CrossoverError):
        select_crossover_parents(_pop([0.9, 0.8]), store)


# -- discard -------------------------------------------------------------------------


def test_discard_lambda_one_removes_worst():
    pop = _pop([0.5, 0.2, 0.9], births=[0, 1, 2])
    assert discard_one(pop, 1.0, np.random.default_rng(0)) == 1
    assert [p.id for p in pop] == [0, 2]


def test_discard_lambda_zero_removes_oldest():
    pop = _pop([0.5, 0.2, 0.9], births=[3, 1, 2])
    assert discard_one(pop, 0.0, np.random.default_rng(0)) == 1
    pop = _pop([0.5, 0.2, 0.9], births=[0, 1, 2])
    assert discard_one(pop, 0.0, np.random.default_rng(0)) == 0


def test_discard_tie_rules():
    pop = _pop([0.2, 0.2, 0.9], births=[5, 1, 0])
    assert discard_one(pop, 1.0, np.random.default_rng(0)) == 1  # worst tie: older
    pop = _pop([0.5, 0.2, 0.9], births=[0, 0, 1])
    assert discard_one(pop, 0.0, np.random.default_rng(0)) == 1  # oldest tie: less fit


def test_discard_protects_parents():
    pop = _pop([0.1, 0.5, 0.9], births=[0, 1, 2])
    assert discard_one(pop, 1.0, np.random.default_rng(0), protected=[0]) == 1
    pop = _pop([0.1, 0.5, 0.9], births=[0, 1, 2])
    assert discard_one(pop, 0.0, np.random.default_rng(0), protected=[0]) == 1


def test_discard_half_worst_frequency():
    rng = np.random.default_rng(3)
    hits = 0
    for _ in range(4000):
        pop = _pop([0.1, 0.5, 0.9], births=[2, 0, 1])  # worst is not oldest
        hits += discard_one(pop, 0.5, rng) == 0
    assert abs(hits / 4000 - 0.5) <= 0.03


# -- effect report ------------------------------------------------------------------


def test_effect_report_empty():
    rep = effect_report([])
    for row in rep["operators"].values():
        assert row["total"] == 0 and row["better_frac"] == row["worse_frac"] == row["unchanged_frac"] == 0
    assert rep["top_yield"]["mutate"]["top1"] == 0


def test_effect_report_known_fractions():
    def rec(op, parent, child, rank, top2, action="mutate"):
        return {"action": action, "operator": op, "parent_fitness": parent, "fitness_child": child,
                "child_rank": rank, "parent_top2": top2}

    log = [
        rec("widen", [0.5], 0.6, 1, True),
        rec("widen", [0.5], 0.4, 7, True),
        rec("widen", [0.5], 0.5, 3, False),
        rec("dense", [0.7], 0.8, 2, True),
        rec("crossover", [0.7, 0.6], 0.75, 1, True, "crossover"),
        {"action": "skip", "fitness_child": None},
    ]
    rep = effect_report(log)
    w = rep["operators"]["widen"]
    assert (w["better"], w["worse"], w["unchanged"], w["total"]) == (1, 1, 1, 3)
    assert w["better_frac"] == pytest.approx(1 / 3)
    x = rep["operators"]["crossover"]
    assert (x["better"], x["total"]) == (1, 1)  # compared against the fitter parent
    assert rep["operators"]["all_mutations"]["total"] == 4
    m = rep["top_yield"]["mutate"]
    assert (m["top2_parents"], m["top1"], m["top5"]) == (3, 1, 2)
    assert rep["top_yield"]["crossover"]["top1"] == 1


# -- the search loop ---------------------------------------------------------------


def test_tiny_search_invariants(tiny):
    cfg = _cfg(max_rounds=6)
    res = _search(tiny, cfg).run()
    log = res.log
    assert log[0]["action"] == "initial"
    assert sum(1 for r in log if r["round"] == 0 and r["action"] == "mutate") == cfg.initial_count
    assert all(b >= a for a, b in zip(res.best_trace, res.best_trace[1:]))
    assert res.best_fitness == max(n.fitness for n in res.store.nodes.values() if n.fitness is not None)
    sizes = [r["population_size"] for r in log if "population_size" in r]
    assert max(sizes) <= cfg.population
    full = sizes.index(cfg.population)
    assert all(s == cfg.population for s in sizes[full:])
    assert not any(r.get("discarded") is not None for r in log[: cfg.initial_count + 1 + full])
    assert {r["round"] for r in log if r["action"] in ("crossover", "skip")} <= {2, 4, 6}
    assert any(r["action"] == "crossover" for r in log)
    # every child trained at least its burst beyond the network it started from
    for r in log:
        if r["action"] == "mutate" and r["parents"]:
            assert r["trained_epochs"] == res.store[r["parents"][0]].trained_epochs + cfg.epochs_mutation
        if r["action"] == "crossover":
            assert r["trained_epochs"] >= sum(cfg.epochs_crossover)


def test_same_seed_identical_log(tiny):
    a = _search(tiny, _cfg()).run().log
    b = _search(tiny, _cfg()).run().log
    assert a == b


def test_patience_zero_stops_after_first_non_improving_round(tiny):
    res = _search(tiny, _cfg(patience=0, max_rounds=50)).run()
    assert res.stop_reason == "patience"
    last = res.log[-1]
    assert last["best_after"] == last["fitness_before_best"]
    # every earlier round improved
    for r in res.log:
        if r["round"] >= 1 and r is not last:
            assert r["best_after"] > r["fitness_before_best"]


def test_crossover_disabled_runs_without_crossover(tiny):
    res = _search(tiny, _cfg(crossover=False)).run()
    assert res.stop_reason == "max_rounds"
    assert not any(r["action"] in ("crossover", "skip") for r in res.log)


def test_budget_exhausted_before_initial_training(tiny):
    with pytest.raises(BudgetError):
        _search(tiny, _cfg(max_seconds=1e-9)).run()


def test_checkpoint_resume_matches_uninterrupted(tiny, tmp_path):
    full = _search(tiny, _cfg(max_rounds=6)).run().log
    ckpt = tmp_path / "ck.pkl"

    def stop(search, rec):
        if search.round == 3:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        _search(tiny, _cfg(max_rounds=6), checkpoint_path=ckpt, on_round=stop).run()
    data, _ = tiny
    resumed = Search.resume(ckpt, data.train, data.val).run().log
    assert resumed == full


def test_forked_search_equals_fresh_crossover_free_search(tiny):
    data, g = tiny
    fresh = _search(tiny, _cfg(crossover=False, max_rounds=6)).run().log
    saved = {}

    def grab(search, rec):
        if search.warm and search.round == 1 and not saved:
            saved["s"] = pickle.dumps(search)

    _search(tiny, _cfg(max_rounds=6), on_round=grab).run()
    fork = pickle.loads(saved["s"])
    fork.train, fork.val = data.train, data.val
    fork.config.crossover = False
    assert fork.run().log == fresh


def test_evolve_wrapper(tiny):
    data, g = tiny
    res = evolve(_cfg(max_rounds=2), data.train, data.val, g, train_config=TrainConfig(batch_size=16))
    assert res.best_graph is not None and res.stop_reason == "max_rounds"
