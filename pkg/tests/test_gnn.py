import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thzjcs import gnn
from thzjcs import hetgraph as hg
from thzjcs.scenario import generate_topology
from tests.geometry import topology_from
from tests.oracles import scalar_gnn as oracle

# frozen from tests/oracles/scalar_gnn.py
LINE_HETERO = [-0.023119368327221505, -0.012211776441686889, 0.041322764050163815, 0.13582190352629453]
LINE_HOMO = [-0.05035538064172164, -0.0855010067221557, -0.02780256404233747, 0.11911924951392941]
SOFTPLUS_MINUS20 = 2.061153620314381e-09

LINE_GRAPH = hg.build_graph(topology_from(oracle.LINE))
SMALL = gnn.GnnHyperParams(embedding_dim=4, sample_sizes=(10, 10), head_layer_sizes=(2,),
                           batch_size=4, iterations=10)


def hand_model(mode):
    p = {k: np.array(v, dtype=float) for k, v in oracle.hand_params(3).items()}
    hyper = gnn.GnnHyperParams(**{**SMALL.__dict__, "mode": mode})
    if mode is gnn.Mode.HOMOGENEOUS:
        for name in gnn.TIED:
            del p[name]
    return gnn.GnnModel(3, hyper, p)


def samples_for(graph, seed, labels=None, s=(10, 10)):
    rng = np.random.default_rng(seed)
    out = []
    for row, node in enumerate(graph.spv_nodes):
        nb = hg.sample_neighborhood(graph, node, s[0], s[1], rng)
        out.append(gnn.make_sample(graph, nb, None if labels is None else labels[row]))
    return out


def line_sample():
    nb = hg.sample_neighborhood(LINE_GRAPH, 0, 10, 10, np.random.default_rng(0))
    return nb, gnn.make_sample(LINE_GRAPH, nb)


def test_frozen_values_match_oracle():
    v = oracle.frozen()
    assert v["line_hetero"] == pytest.approx(LINE_HETERO, rel=1e-15)
    assert v["line_homo"] == pytest.approx(LINE_HOMO, rel=1e-15)


@pytest.mark.parametrize("mode,expected", [(gnn.Mode.HETEROGENEOUS, LINE_HETERO),
                                           (gnn.Mode.HOMOGENEOUS, LINE_HOMO)])
def test_hand_model_logits(mode, expected):
    _, sample = line_sample()
    got = gnn.forward(hand_model(mode), [sample])[0]
    assert got == pytest.approx(expected, rel=1e-12, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(list(gnn.Mode)), st.integers(0, 6), st.integers(0, 12))
def test_batched_forward_matches_scalar_oracle(seed, mode, s1, s2):
    topo = generate_topology(seed, counts=(4, 2, 1))
    graph = hg.build_graph(topo)
    hyper = gnn.GnnHyperParams(embedding_dim=8, sample_sizes=(s1, s2), head_layer_sizes=(5, 3), mode=mode)
    model = gnn.init_model(3, hyper, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    nbs = [hg.sample_neighborhood(graph, v, s1, s2, rng) for v in graph.spv_nodes]
    got = gnn.forward(model, [gnn.make_sample(graph, nb) for nb in nbs])
    params = {k: v.tolist() for k, v in model.params.items()}
    for row, nb in zip(got, nbs):
        want = oracle.forward(params, graph, nb, hetero=mode is gnn.Mode.HETEROGENEOUS)
        assert row == pytest.approx(want, rel=1e-10, abs=1e-12)


def test_aggregate_means_and_empty_types():
    nb, s = line_sample()
    L = 3
    sc = [u for u in nb.first_hop if u.type is hg.EdgeType.SC]
    expected = np.mean([list(LINE_GRAPH.features[u.node]) + [gnn.edge_feature(u.weight)] for u in sc], axis=0)
    assert s.self_sum[hg.EdgeType.SC] / s.self_cnt[hg.EdgeType.SC] == pytest.approx(expected)
    assert s.self_cnt.tolist() == [2, 1, 2]
    # a comm target's neighbours are all SPVs: no SC/SS second-hop entries for it
    j = [u.node for u in nb.first_hop].index(3)
    assert s.hop_cnt[j, hg.EdgeType.SC] == 2 and s.hop_cnt[j, hg.EdgeType.I] == 0
    batch = gnn.Batch([s])
    assert np.all(batch.hop_agg[0, j, hg.EdgeType.I] == 0)
    assert batch.self_agg.shape == (1, 3, L + 1)


def test_edge_feature_scale():
    assert gnn.edge_feature(1e-14) == pytest.approx(0.0)
    assert gnn.edge_feature(1e-10) == pytest.approx(1.0)


def test_bce_examples():
    assert gnn.bce_loss([0.0], [1.0]) == pytest.approx(math.log(2))
    assert gnn.bce_loss([-20.0], [0.0]) == pytest.approx(SOFTPLUS_MINUS20, rel=1e-9)
    assert gnn.bce_loss([1000.0], [0.0]) == pytest.approx(1000.0)
    assert gnn.bce_loss([1000.0], [1.0]) == 0.0
    assert gnn.bce_loss([[0.0, 0.0], [2.0, -2.0]], [[1.0, 0.0], [1.0, 0.0]]).shape == (2,)
    with pytest.raises(gnn.ShapeError):
        gnn.bce_loss([0.0, 1.0], [1.0])


@given(st.floats(-50, 50), st.sampled_from([0.0, 1.0]))
def test_bce_matches_scalar(y, z):
    assert float(gnn.bce_loss([y], [z])) == pytest.approx(oracle.bce(y, z), rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("mode", list(gnn.Mode))
def test_gradients_match_central_differences(mode):
    topo = generate_topology(3, counts=(4, 1, 1))
    graph = hg.build_graph(topo, settings=hg.GraphSettings(blocker_radius=8.0))
    rng = np.random.default_rng(0)
    labels = np.eye(3)[[0, 1, 2, 2]]
    samples = samples_for(graph, 1, labels, s=(3, 4))
    hyper = gnn.GnnHyperParams(embedding_dim=8, sample_sizes=(3, 4), head_layer_sizes=(6, 5), mode=mode)
    model = gnn.init_model(2, hyper, rng)
    _, grads = gnn.backward(model, samples)
    h = 1e-6
    for name, arr in model.params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = gnn.mean_loss(model, samples)
            arr[idx] = old - h
            down = gnn.mean_loss(model, samples)
            arr[idx] = old
            assert grads[name][idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-7), (name, idx)


def test_homogeneous_ignores_edge_types():
    topo = generate_topology(4, counts=(4, 2, 1))
    graph = hg.build_graph(topo)
    rotated = hg.HeteroGraph(graph.node_types, graph.node_ids, graph.features,
                             tuple(e._replace(type=hg.EdgeType((e.type + 1) % 3)) for e in graph.edges),
                             graph.target_nodes)
    for mode, same in ((gnn.Mode.HOMOGENEOUS, True), (gnn.Mode.HETEROGENEOUS, False)):
        hyper = gnn.GnnHyperParams(embedding_dim=8, head_layer_sizes=(4,), mode=mode)
        model = gnn.init_model(3, hyper, np.random.default_rng(1))
        a = gnn.forward(model, samples_for(graph, 2))
        b = gnn.forward(model, samples_for(rotated, 2))
        assert np.allclose(a, b, rtol=1e-12) is same


def test_homogeneous_parameter_tying():
    hyper = gnn.GnnHyperParams(embedding_dim=8, mode=gnn.Mode.HOMOGENEOUS)
    model = gnn.init_model(4, hyper, np.random.default_rng(0))
    assert "w3" not in model.params and model.weight("w3") is model.params["w2"]
    assert model.weight("w8") is model.params["w6"]
    assert model.to_dict()["tied"] == gnn.TIED
    het = gnn.init_model(4, gnn.GnnHyperParams(embedding_dim=8), np.random.default_rng(0))
    n_het = sum(v.size for v in het.params.values())
    n_hom = sum(v.size for v in model.params.values())
    assert n_het - n_hom == 2 * 2 * 5 + 2 * 2 * 9  # two copies each of w2 (q x L+1) and w6 (q x lam+1)


def test_encode_shape_and_head():
    model = gnn.init_model(4, gnn.GnnHyperParams(), np.random.default_rng(0))
    graph = hg.build_graph(generate_topology(1))
    samples = samples_for(graph, 0)
    h2 = gnn.encode(model, samples)
    assert h2.shape == (5, 64) and np.all(h2 >= 0)
    assert np.allclose(gnn.head_forward(model, h2), gnn.forward(model, samples))
    with pytest.raises(gnn.ShapeError):
        gnn.head_forward(model, h2[:, :10])
    with pytest.raises(ValueError):
        gnn.homogeneous_encode(model, samples)


def test_L_mismatch_raises():
    model = gnn.init_model(9, gnn.GnnHyperParams(), np.random.default_rng(0))
    samples = samples_for(hg.build_graph(generate_topology(1)), 0)
    with pytest.raises(gnn.ShapeError):
        gnn.forward(model, samples)
    with pytest.raises(gnn.ShapeError):
        gnn.train(model, samples)


def test_label_length_checked():
    nb, _ = line_sample()
    with pytest.raises(gnn.ShapeError):
        gnn.make_sample(LINE_GRAPH, nb, np.zeros(3))


def test_hyper_validation():
    for bad in ({"embedding_dim": 6}, {"hop_count": 3}, {"learning_rate": -1.0},
                {"iterations": 0}, {"sample_sizes": (1,)}):
        with pytest.raises(ValueError):
            gnn.GnnHyperParams(**bad)


def test_checkpoint_round_trip_and_shape_errors():
    for mode in gnn.Mode:
        model = gnn.init_model(4, gnn.GnnHyperParams(embedding_dim=8, mode=mode), np.random.default_rng(2), seed=2)
        again = gnn.GnnModel.from_dict(json.loads(model.to_json()))
        assert again.hyper == model.hyper and again.seed == 2
        for k in model.params:
            assert np.array_equal(again.params[k], model.params[k])
    doc = json.loads(model.to_json())
    doc["params"]["w1"]["shape"] = [1, 2]
    doc["params"]["w1"]["data"] = [[0.0, 0.0]]
    with pytest.raises(gnn.ShapeError):
        gnn.GnnModel.from_dict(doc)


def training_set(n_topologies=6):
    samples = []
    for seed in range(n_topologies):
        topo = generate_topology(seed, counts=(4, 1, 1))
        graph = hg.build_graph(topo)
        labels = np.zeros((4, 3))
        labels[:, 2] = 1
        labels[seed % 4] = [1, 0, 0]
        labels[(seed + 1) % 4] = [0, 1, 0]
        samples += samples_for(graph, seed, labels, s=(4, 4))
    return samples


def test_training_reduces_loss():
    data = training_set()
    hyper = gnn.GnnHyperParams(embedding_dim=16, sample_sizes=(4, 4), head_layer_sizes=(16,),
                               learning_rate=0.2, batch_size=8, iterations=1500)
    model = gnn.init_model(2, hyper, np.random.default_rng(0))
    res = gnn.train(model, data, rng=np.random.default_rng(1))
    assert len(res.losses) == 1500
    assert gnn.mean_loss(res.model, data) < 0.5 * gnn.mean_loss(model, data)


def test_zero_learning_rate_leaves_parameters():
    data = training_set(2)
    hyper = gnn.GnnHyperParams(embedding_dim=8, sample_sizes=(4, 4), learning_rate=0.0, iterations=5)
    model = gnn.init_model(2, hyper, np.random.default_rng(0))
    res = gnn.train(model, data)
    for k, v in model.params.items():
        assert np.array_equal(res.model.params[k], v)


def test_training_deterministic():
    data = training_set(2)
    hyper = gnn.GnnHyperParams(embedding_dim=8, sample_sizes=(4, 4), iterations=30, batch_size=4)
    model = gnn.init_model(2, hyper, np.random.default_rng(0))
    a = gnn.train(model, data, rng=np.random.default_rng(5))
    b = gnn.train(model, data, rng=np.random.default_rng(5))
    assert a.losses == b.losses
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in model.params)


def test_validation_selects_best_checkpoint():
    data = training_set(4)
    val = training_set(6)[-8:]
    hyper = gnn.GnnHyperParams(embedding_dim=8, sample_sizes=(4, 4), head_layer_sizes=(8,),
                               learning_rate=0.5, batch_size=4, iterations=200)
    model = gnn.init_model(2, hyper, np.random.default_rng(0))
    res = gnn.train(model, data, rng=np.random.default_rng(3), validation=val, validate_every=25)
    its = [it for it, _ in res.validation]
    assert its == list(range(25, 201, 25))
    best_it, best = min(res.validation, key=lambda t: t[1])
    assert res.selected_iteration == best_it
    assert gnn.mean_loss(res.model, val) == pytest.approx(best, rel=1e-12)
    assert gnn.mean_loss(res.final_model, val) == pytest.approx(res.validation[-1][1], rel=1e-12)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_detected():
    data = training_set(1)
    hyper = gnn.GnnHyperParams(embedding_dim=8, sample_sizes=(4, 4), iterations=3)
    model = gnn.init_model(2, hyper, np.random.default_rng(0))
    model.params["b_out"][:] = 1.7e308  # finite, but the summed loss overflows
    with pytest.raises(gnn.DivergenceError):
        gnn.train(model, data)


def test_sigmoid_range():
    x = np.array([-1000.0, 0.0, 1000.0])
    assert gnn.sigmoid(x).tolist() == [0.0, 0.5, 1.0]
