import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thzjcs import assign, gnn, jcs
from thzjcs.scenario import SensingParams, generate_topology
from tests.geometry import topology_from
from tests.oracles import scalar_physics as oracle

# frozen from tests/oracles/scalar_physics.py
TWO_SPV_BEST = ((1, 0), 77887321671.60338)
CROWD_BEST = ((1, 2, 0), 163529624224.85858)
ECHO_BEST = ((2, 0, 0), 88019124767.09497)
ECHO_BASELINE_OBJECTIVE = 76342389413.20224  # objective of choice (2, 0, 1)

HOPELESS = jcs.SystemParams(sensing=SensingParams(min_sensing_sinr=1e30))


def test_frozen_values_match_oracle():
    v = oracle.frozen()
    assert tuple(v["two_spv_best"][0]) == TWO_SPV_BEST[0]
    assert tuple(v["crowd_best"][0]) == CROWD_BEST[0]
    assert v["crowd_best"][1] == pytest.approx(CROWD_BEST[1], rel=1e-15)
    assert tuple(v["echo_best"][0]) == ECHO_BEST[0]
    assert v["echo_best"][1] == pytest.approx(ECHO_BEST[1], rel=1e-15)


@pytest.mark.parametrize("fx,best", [(oracle.TWO_SPV, TWO_SPV_BEST), (oracle.CROWD, CROWD_BEST),
                                     (oracle.ECHO, ECHO_BEST)], ids=["two", "crowd", "echo"])
def test_exhaustive_search_matches_oracle(fx, best):
    res, labels = assign.enumerate_optimal(topology_from(fx))
    assert res.feasible
    assert res.choice == best[0]
    assert res.objective_true == pytest.approx(best[1], rel=1e-9)
    assert labels.shape == (len(fx["spv"]), len(fx["comm"]) + len(fx["sense"]) + 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_exhaustive_search_matches_oracle_brute_force(seed):
    topo = generate_topology(seed, counts=(3, 1, 1))
    pos = [tuple(map(float, p)) for p in topo.positions]
    spv = [pos[i] for i in topo.spvs]
    comm = [pos[i] for i in topo.comm]
    sense = [pos[i] for i in topo.sense]
    ref = oracle.brute_force(spv, comm, sense)
    res, _ = assign.enumerate_optimal(topo)
    if ref is None:
        assert not res.feasible
    else:
        assert res.feasible and res.choice == ref[0]
        assert res.objective_true == pytest.approx(ref[1], rel=1e-9)


def test_optimum_dominates_every_feasible_choice():
    topo = generate_topology(10, counts=(4, 2, 1))  # a feasible draw
    res, _ = assign.enumerate_optimal(topo)
    assert res.feasible
    K, M, N = topo.counts
    for c in itertools.product(range(K), repeat=M + N):
        if set(c[:M]) & set(c[M:]):
            continue
        rep = jcs.evaluate(topo, jcs.Assignment.from_choice(c, K, M, N))
        if rep.feasible:
            assert rep.objective <= res.objective_true * (1 + 1e-12)


def test_tie_goes_to_lowest_spv():
    fx = {"spv": [(10.0, 10.0), (30.0, 10.0)], "comm": [(20.0, 10.0)], "sense": []}
    res, labels = assign.enumerate_optimal(topology_from(fx))
    assert res.choice == (0,)
    assert labels.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_infeasible_everywhere():
    topo = topology_from(oracle.TWO_SPV)
    res, labels = assign.enumerate_optimal(topo, HOPELESS)
    assert not res.feasible
    assert res.assignment is not None and labels is not None
    probs = np.full((2, 3), 0.5)
    assert assign.solve_surrogate(topo, probs, HOPELESS).assignment is None
    assert assign.enumerate_surrogate(topo, probs, HOPELESS).assignment is None
    assert not assign.baseline_location(topo, HOPELESS).feasible


def test_budget_exceeded():
    with pytest.raises(assign.BudgetExceeded, match="exceeds the budget"):
        assign.enumerate_optimal(generate_topology(0), budget=100)


def test_labels_round_trip():
    a = jcs.Assignment.from_choice((1, 2, 0), 4, 2, 1)
    z = assign.labels_from_assignment(a)
    assert z.tolist() == [[0, 0, 1, 0], [1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1]]
    back = assign.assignment_from_labels(z, 2, 1)
    assert back.choice() == (1, 2, 0)


def test_assignment_rows():
    topo = topology_from(oracle.CROWD)
    a = jcs.Assignment.from_choice((1, 2, 0), 3, 2, 1)
    assert assign.assignment_rows(topo, a) == [(0, "sense", 5), (1, "comm", 3), (2, "comm", 4)]


probability_tables = st.integers(0, 10**6).map(lambda s: np.random.default_rng(s).random((4, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), probability_tables)
def test_branch_and_bound_matches_brute_force(seed, probs):
    topo = generate_topology(seed, counts=(4, 2, 1))
    bb = assign.solve_surrogate(topo, probs)
    ref = assign.enumerate_surrogate(topo, probs)
    assert bb.choice == ref.choice
    if ref.assignment is not None:
        assert bb.objective_surrogate == pytest.approx(ref.objective_surrogate, rel=1e-12)
        assert bb.feasible
        assert bb.nodes_explored <= 1 + 4 + 16 + 64


def test_uniform_probabilities_give_first_feasible_choice():
    topo = generate_topology(12, counts=(4, 2, 1))  # a feasible draw
    lb = jcs.LinkBudget(topo)
    C = np.array(list(itertools.product(range(4), repeat=3)))
    _, _, sense = lb.metrics(C)
    ok = lb.mode_ok(C) & lb.sensing_feasible(sense)
    first = tuple(int(x) for x in C[np.flatnonzero(ok)[0]])
    assert assign.solve_surrogate(topo, np.full((4, 4), 0.5)).choice == first


def test_one_hot_probabilities_recover_the_labels():
    for fx in (oracle.TWO_SPV, oracle.CROWD, oracle.ECHO):
        topo = topology_from(fx)
        res, labels = assign.enumerate_optimal(topo)
        got = assign.solve_surrogate(topo, labels)
        assert got.choice == res.choice
        assert got.objective_true == pytest.approx(res.objective_true, rel=1e-12)


def test_surrogate_value_and_validation():
    P = np.array([[0.2, 0.9, 0.0], [0.7, 0.1, 1.0]])
    assert assign.surrogate_value(P, (1, 0)) == pytest.approx(1.6)
    topo = topology_from(oracle.TWO_SPV)
    with pytest.raises(ValueError):
        assign.solve_surrogate(topo, np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        assign.solve_surrogate(topo, np.full((2, 3), 1.5))


def test_location_baseline_can_be_worse():
    topo = topology_from(oracle.ECHO)
    base = assign.baseline_location(topo)
    assert base.choice == (2, 0, 1)
    assert base.objective_true == pytest.approx(ECHO_BASELINE_OBJECTIVE, rel=1e-9)
    assert base.objective_true < ECHO_BEST[1]


def test_location_baseline_tie_lowest_index():
    fx = {"spv": [(10.0, 10.0), (30.0, 10.0)], "comm": [(20.0, 10.0)], "sense": []}
    assert assign.baseline_location(topology_from(fx)).choice == (0,)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_location_baseline_respects_modes(seed):
    topo = generate_topology(seed, counts=(5, 2, 2))
    res = assign.baseline_location(topo)
    assert res.assignment.violations() == []
    if res.feasible:
        best, _ = assign.enumerate_optimal(topo)
        assert res.objective_true <= best.objective_true * (1 + 1e-12)


def test_solve_result_json():
    res, _ = assign.enumerate_optimal(topology_from(oracle.CROWD))
    doc = json.loads(res.to_json())
    assert doc["schema"] == "thzjcs.solve_result/1"
    assert doc["solver_stats"]["nodes_explored"] == 27
    assert doc["objective_true_bps"] == pytest.approx(CROWD_BEST[1], rel=1e-9)


def small_model(L, seed=0):
    hyper = gnn.GnnHyperParams(embedding_dim=8, sample_sizes=(4, 4), head_layer_sizes=(6,))
    return gnn.init_model(L, hyper, np.random.default_rng(seed))


def test_predict_and_decide():
    topo = generate_topology(2, counts=(4, 2, 1))
    model = small_model(3)
    probs = assign.predict_probabilities(topo, model, np.random.default_rng(0))
    assert probs.shape == (4, 4) and np.all((probs > 0) & (probs < 1))
    res, p2 = assign.decide(topo, model, np.random.default_rng(0))
    assert np.array_equal(p2, probs)
    assert res.choice == assign.solve_surrogate(topo, probs).choice


def test_predict_rejects_wrong_target_count():
    with pytest.raises(ValueError, match="L=4"):
        assign.predict_probabilities(generate_topology(2, counts=(4, 2, 1)), small_model(4),
                                     np.random.default_rng(0))


def test_spv_samples_one_per_spv_in_order():
    topo = generate_topology(2, counts=(4, 2, 1))
    samples = assign.spv_samples(topo, 3, 3, np.random.default_rng(0))
    assert [s.source for s in samples] == topo.spvs
    labels = np.eye(4)
    samples = assign.spv_samples(topo, 3, 3, np.random.default_rng(0), labels=labels)
    assert np.array_equal(np.stack([s.label for s in samples]), labels)
