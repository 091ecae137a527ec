import numpy as np
import pytest

from gpeft import autodiff as ad
from gpeft.gnn import GnnConfig, count_params, encode, encode_one, enumerate_params, init_gnn
from gpeft.graph import NeighborSample, TextRichGraph, sample_neighbors
from gpeft.params import ParameterStore


@pytest.fixture(autouse=True)
def f64():
    with ad.precision("float64"):
        yield


def build(cfg, seed=0):
    store = ParameterStore()
    init_gnn(store, cfg, np.random.default_rng(seed))
    store.astype(np.float64)
    return store


@pytest.mark.parametrize("dims, expected", [
    ((768, 2, 2, 4096), 5_505_024),
    ((1, 1, 1, 1), 2),
    ((32, 2, 2, 64), 6144),
])
def test_parameter_count_formula(dims, expected):
    d_gnn, k, n_rel, d_model = dims
    cfg = GnnConfig(d_feat=d_gnn, d_gnn=d_gnn, k_layers=k, n_rel=n_rel, d_model=d_model)
    c = count_params(cfg)
    assert c["formula"] == c["enumerated"] == expected
    assert enumerate_params(build(cfg))["enumerated"] == expected


def test_input_projection_counted_separately():
    cfg = GnnConfig(d_feat=10, d_gnn=8, k_layers=1, n_rel=1, d_model=4)
    e = enumerate_params(build(cfg))
    assert e["input_projection"] == 80 and e["bias"] == 8 + 4
    assert e["total"] == count_params(cfg)["total"]


def star_sample(center, nbrs, t=0):
    return NeighborSample(center, [[(v, t, 0) for v in nbrs]], [len(nbrs)])


def identity_store(d):
    cfg = GnnConfig(d_feat=d, d_gnn=d, k_layers=1, n_rel=2, d_model=d)
    store = build(cfg)
    for name in store.names(["g"]):
        t = store[name]
        t.data = np.eye(d) if t.ndim == 2 else np.zeros(d)
    return cfg, store


def test_identity_weights_give_self_plus_neighbour_mean():
    cfg, store = identity_store(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    z = encode([star_sample(0, [1, 2, 3])], x, store, cfg).data[0]
    np.testing.assert_allclose(z, x[0] + x[1:].mean(axis=0), atol=1e-12)


def test_relations_are_averaged_separately():
    cfg, store = identity_store(2)
    x = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [0.0, 5.0]])
    s = NeighborSample(0, [[(1, 0, 0), (2, 0, 0), (3, 1, 0)]], [3])
    z = encode([s], x, store, cfg).data[0]
    np.testing.assert_allclose(z, [2.0, 5.0], atol=1e-12)


def test_neighbour_order_does_not_matter():
    cfg = GnnConfig(d_feat=4, d_gnn=6, k_layers=1, n_rel=1, d_model=5)
    store = build(cfg, 1)
    x = np.random.default_rng(1).normal(size=(5, 4))
    a = encode([star_sample(0, [1, 2, 3, 4])], x, store, cfg).data
    b = encode([star_sample(0, [4, 2, 1, 3])], x, store, cfg).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_isolated_node_uses_only_itself():
    cfg = GnnConfig(d_feat=4, d_gnn=4, k_layers=2, n_rel=2, d_model=3)
    store = build(cfg)
    x = np.random.default_rng(2).normal(size=(3, 4))
    s = NeighborSample(1, [[], []], [2, 2])
    z = encode([s], x, store, cfg).data[0]
    h = np.maximum(x[1] + store["gnn.layers.0.bias"].data, 0) + store["gnn.layers.1.bias"].data
    np.testing.assert_allclose(z, h @ store["gnn.M"].data + store["gnn.M_bias"].data, atol=1e-12)


def test_duplicate_neighbour_counts_twice():
    cfg, store = identity_store(2)
    x = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
    z = encode([star_sample(0, [1, 1, 2])], x, store, cfg).data[0]
    np.testing.assert_allclose(z, [2.0, 1.0], atol=1e-12)


def test_output_depends_only_on_sampled_nodes():
    cfg = GnnConfig(d_feat=4, d_gnn=4, k_layers=2, n_rel=1, d_model=3)
    store = build(cfg)
    texts = [np.array([1])] * 6
    g = TextRichGraph(texts, np.zeros((6, 4)), {"t": [(0, 1), (1, 2), (3, 4), (4, 5)]})
    x = np.random.default_rng(3).normal(size=(6, 4))
    s = sample_neighbors(g, 0, (5, 5), 0)
    y = x.copy()
    y[[3, 4, 5]] += 10.0
    assert np.array_equal(encode([s], x, store, cfg).data, encode([s], y, store, cfg).data)


def test_batch_matches_single():
    cfg = GnnConfig(d_feat=4, d_gnn=5, k_layers=2, n_rel=1, d_model=3)
    store = build(cfg, 4)
    g = TextRichGraph([np.array([1])] * 5, np.zeros((5, 4)), {"t": [(0, 1), (1, 2), (2, 3), (3, 4)]})
    x = np.random.default_rng(4).normal(size=(5, 4))
    samples = [sample_neighbors(g, v, (2, 2), v) for v in range(5)]
    batch = encode(samples, x, store, cfg).data
    for v, s in enumerate(samples):
        np.testing.assert_allclose(batch[v], encode_one(x[v], s, x, store, cfg).z, atol=1e-12)


def test_feature_width_mismatch():
    cfg = GnnConfig(d_feat=4, d_gnn=4, k_layers=1, n_rel=1, d_model=3)
    with pytest.raises(ad.ShapeError, match="d_feat"):
        encode([star_sample(0, [1])], np.zeros((2, 5)), build(cfg), cfg)


def test_gnn_grad_check():
    cfg = GnnConfig(d_feat=3, d_gnn=4, k_layers=2, n_rel=2, d_model=3)
    store = build(cfg, 5)
    g = TextRichGraph([np.array([1])] * 6, np.zeros((6, 3)),
                      {"a": [(0, 1), (1, 2), (0, 3)], "b": [(0, 4), (4, 5)]})
    x = np.random.default_rng(5).normal(size=(6, 3))
    samples = [sample_neighbors(g, v, (3, 3), v) for v in (0, 1)]
    params = {n: store[n] for n in store.names(["g"])}
    for p in params.values():
        p.requires_grad = True
    w = np.random.default_rng(6).normal(size=(2, 3))
    rep = ad.grad_check(lambda: (encode(samples, x, store, cfg) * ad.Tensor(w)).sum(), params)
    assert rep.passed(1e-6), rep.errors
