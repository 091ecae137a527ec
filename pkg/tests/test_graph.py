import numpy as np
import pytest

from gpeft.graph import (EdgeSplit, GraphError, NegativeSampler, NegativeSamplingError, TextRichGraph,
                         observed_graph, read_graph, read_split, sample_neighbors, split_edges, write_graph,
                         write_split)
from gpeft.synthetic import TASK_TYPE


def test_edges_are_canonical_and_sorted():
    g = TextRichGraph([np.array([1])] * 3, np.zeros((3, 1)), {"t": [(2, 0), (1, 0)]})
    assert g.edges["t"] == [(0, 1), (0, 2)]


@pytest.mark.parametrize("edges, msg", [
    ({"t": [(0, 0)]}, "self-loop"),
    ({"t": [(0, 1), (1, 0)]}, "duplicate"),
    ({"t": [(0, 5)]}, "invalid endpoint"),
])
def test_validate_rejects_bad_edges(edges, msg):
    g = TextRichGraph([np.array([1])] * 3, np.zeros((3, 1)), edges)
    with pytest.raises(GraphError, match=msg):
        g.validate()


def test_validate_rejects_empty_and_long_texts():
    g = TextRichGraph([np.array([1]), np.array([], dtype=int)], np.zeros((2, 1)), {"t": []})
    with pytest.raises(GraphError, match="empty"):
        g.validate()
    g = TextRichGraph([np.arange(5)], np.zeros((1, 1)), {"t": []})
    with pytest.raises(GraphError, match="max_seq"):
        g.validate(max_seq=4)


def test_split_partitions_task_edges(small_graph):
    graph, _ = small_graph
    sp = split_edges(graph, TASK_TYPE, 50, 10, seed=3)
    assert len(sp.train) == 50 and len(sp.val) == 10
    parts = [set(sp.train), set(sp.val), set(sp.test)]
    assert sum(map(len, parts)) == len(graph.edges[TASK_TYPE])
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])


def test_split_is_seeded(small_graph):
    graph, _ = small_graph
    a = split_edges(graph, TASK_TYPE, 50, 10, seed=3)
    b = split_edges(graph, TASK_TYPE, 50, 10, seed=3)
    c = split_edges(graph, TASK_TYPE, 50, 10, seed=4)
    assert a.train == b.train and a.train != c.train


def test_split_too_small(tiny_graph):
    with pytest.raises(GraphError, match="need at least"):
        split_edges(tiny_graph, "task", 5, 1, 0)


def test_observed_view_hides_val_and_test(small_graph):
    graph, _ = small_graph
    sp = split_edges(graph, TASK_TYPE, 50, 10, seed=0)
    obs = observed_graph(graph, sp)
    assert set(obs.edges[TASK_TYPE]) == set(sp.train)
    assert obs.edges["base"] == graph.edges["base"]
    held = set(sp.val) | set(sp.test)
    for v in range(graph.n_nodes):
        for s in range(3):
            sample = sample_neighbors(obs, v, (5, 5), [s, v])
            ti = obs.type_index(TASK_TYPE)
            pairs = {(v, u) for u, t, _ in sample.layers[0] if t == ti}
            assert not {tuple(sorted(p)) for p in pairs} & held


def test_sampler_respects_fanout_and_seed(small_graph):
    graph, _ = small_graph
    a = sample_neighbors(graph, 0, (3, 2), 7)
    b = sample_neighbors(graph, 0, (3, 2), 7)
    assert a.layers == b.layers
    assert len(a.layers[0]) <= 3
    assert len(a.layers[1]) <= 2 * len(a.layers[0])
    adj = {u for u, _ in graph.adjacency()[0]}
    assert all(u in adj for u, _, _ in a.layers[0])


def test_sampler_keeps_all_when_degree_small(tiny_graph):
    s = sample_neighbors(tiny_graph, 4, (10,), 0)
    assert sorted(u for u, _, _ in s.layers[0]) == [1, 2, 3]


def test_sampler_isolated_node():
    g = TextRichGraph([np.array([1])] * 3, np.zeros((3, 1)), {"t": [(0, 1)]})
    s = sample_neighbors(g, 2, (2, 2), 0)
    assert s.size == 0 and s.nodes() == {2}


def test_negative_avoids_task_edges(small_graph):
    graph, _ = small_graph
    sp = split_edges(graph, TASK_TYPE, 50, 10, seed=0)
    task = sp.task_edges()
    sampler = NegativeSampler(graph.n_nodes, task)
    rng = np.random.default_rng(0)
    for i, j in sp.train[:20]:
        for _ in range(10):
            v = sampler.draw((i, j), rng)
            assert v not in (i, j) and tuple(sorted((i, v))) not in task


def test_negative_exhaustion_raises():
    sampler = NegativeSampler(3, [(0, 1), (0, 2)])
    with pytest.raises(NegativeSamplingError, match="node 0"):
        sampler.draw((0, 1), 0)


def test_draw_many_reports_shortfall():
    sampler = NegativeSampler(5, [(0, 1)])
    negs, short = sampler.draw_many((0, 1), 10, 0)
    assert sorted(negs) == [2, 3, 4] and short == 7
    negs, short = sampler.draw_many((0, 1), 2, 0)
    assert len(set(negs)) == 2 and short == 0


def test_graph_file_round_trip(tmp_path, small_graph):
    graph, _ = small_graph
    write_graph(graph, tmp_path / "g.txt")
    back = read_graph(tmp_path / "g.txt")
    assert back.edges == graph.edges and back.edge_types == graph.edge_types
    assert np.array_equal(back.features, graph.features)
    assert all(np.array_equal(a, b) for a, b in zip(back.texts, graph.texts))


def test_split_file_round_trip(tmp_path, small_graph):
    graph, _ = small_graph
    sp = split_edges(graph, TASK_TYPE, 50, 10, seed=1)
    write_split(sp, tmp_path / "s.txt")
    back = read_split(tmp_path / "s.txt", graph)
    assert isinstance(back, EdgeSplit)
    assert (back.train, back.val, back.test, back.observed) == (sp.train, sp.val, sp.test, sp.observed)


def test_malformed_graph_file(tmp_path):
    (tmp_path / "bad.txt").write_text("2 1 1\n1 2\n")
    with pytest.raises(GraphError, match="malformed"):
        read_graph(tmp_path / "bad.txt")
