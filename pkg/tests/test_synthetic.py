import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpeft.graph import GraphError, write_graph
from gpeft.synthetic import (TASK_TYPE, SynthConfig, detokenize, format_stats, generate, histograms,
                             signal_report, stats, tokenize, truncate)


@given(st.binary(max_size=64))
def test_tokenize_round_trip(data):
    ids = tokenize(data)
    assert all(0 <= i < 256 for i in ids)
    assert detokenize(ids) == data


def test_detokenize_rejects_special_ids():
    with pytest.raises(ValueError):
        detokenize([65, 256])


def test_truncate_reserves_two_slots():
    assert truncate(range(10), 6) == [0, 1, 2, 3]
    assert truncate(range(3), 64) == [0, 1, 2]


def test_generation_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_nodes=60, n_topics=4, density=0.4, seed=5)
    write_graph(generate(cfg)[0], tmp_path / "a.txt")
    write_graph(generate(cfg)[0], tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_zero_task_edges_is_an_error():
    with pytest.raises(GraphError, match="zero task edges"):
        generate(SynthConfig(n_nodes=20, n_topics=4, density=0.0, cross_rate=0.0))


def test_noise_free_text_identifies_topic():
    graph, topics = generate(SynthConfig(n_nodes=200, n_topics=10, p_noise=0.0, density=0.3, seed=2))
    h = histograms(graph.texts)
    sim = h @ h.T
    np.fill_diagonal(sim, -np.inf)
    nearest = sim.argmax(axis=1)
    purity = float(np.mean(topics[nearest] == topics))
    assert purity > 0.9


def test_graph_is_valid_and_features_shaped(small_graph):
    graph, _ = small_graph
    graph.validate()
    assert graph.features.shape == (graph.n_nodes, graph.d_feat)


def test_stats_table(small_graph):
    graph, _ = small_graph
    s = stats(graph)
    assert s["nodes"] == graph.n_nodes and s["task_edges"] == len(graph.edges[TASK_TYPE])
    assert s["avg_degree"] == pytest.approx(2 * len(graph.edges["base"]) / graph.n_nodes)
    assert "#Task Edges" in format_stats(s)


def test_shared_neighbour_rule_is_exact():
    cfg = SynthConfig(n_nodes=80, n_topics=4, density=0.3, seed=1)
    graph, _ = generate(cfg)
    rep = signal_report(graph, cfg)
    assert rep["common_neighbors_exact"]
    assert rep["mi_text"] >= 0.0
