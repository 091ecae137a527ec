import numpy as np
import pytest

from gpeft import config as C
from gpeft.evaluation import (NodeEmbeddings, cosine, draw_negatives, evaluate_split, format_table,
                              infer_embeddings, rank_metrics, rank_of, read_embeddings, write_embeddings,
                              write_report)
from gpeft.graph import observed_graph, split_edges
from gpeft.model import GpeftModel
from gpeft.synthetic import TASK_TYPE, generate
from helpers import small_cfg


def test_rank_examples():
    assert rank_of(0.9, np.array([0.1, 0.5])) == 1
    assert rank_of(0.3, np.array([0.1, 0.5, 0.7])) == 3


def test_ties_count_against_the_true_edge():
    assert rank_of(0.5, np.array([0.5, 0.1])) == 2
    assert rank_of(0.5, np.full(4, 0.5)) == 5


def test_cosine_rejects_zero_vectors():
    with pytest.raises(ValueError):
        cosine(np.zeros(3), np.ones((2, 3)))


def brute_force(edges, vec, negatives):
    ranks = []
    for (i, j), neg in zip(edges, negatives):
        def sim(u):
            return float(vec[i] @ vec[u] / np.sqrt((vec[i] @ vec[i]) * (vec[u] @ vec[u])))
        true = sim(j)
        ranks.append(1 + sum(sim(int(u)) >= true for u in neg))
    ranks = np.array(ranks, dtype=float)
    return float(np.mean(ranks == 1)), float(np.mean(1 / ranks))


def test_metrics_match_brute_force_on_ten_nodes():
    rng = np.random.default_rng(0)
    vec = rng.normal(size=(10, 4))
    emb = NodeEmbeddings(np.arange(10), vec)
    edges = [(0, 1), (2, 3), (4, 5), (6, 9)]
    negs, short = draw_negatives(edges, set(edges), 10, 5, seed=1)
    rep = rank_metrics(edges, emb, negs, 5, short)
    hit1, mrr = brute_force(edges, vec, negs)
    assert rep.hit1 == pytest.approx(hit1) and rep.mrr == pytest.approx(mrr)
    assert short == 0 and all(len(n) == 5 for n in negs)


def test_metrics_invariant_to_embedding_scale():
    rng = np.random.default_rng(1)
    vec = rng.normal(size=(10, 4))
    edges = [(0, 1), (2, 3), (4, 7)]
    negs, _ = draw_negatives(edges, set(edges), 10, 6, seed=2)
    a = rank_metrics(edges, NodeEmbeddings(np.arange(10), vec), negs, 6)
    scale = rng.uniform(0.1, 10.0, size=(10, 1))
    b = rank_metrics(edges, NodeEmbeddings(np.arange(10), vec * scale), negs, 6)
    assert a.ranks == b.ranks


def test_negatives_skip_all_task_edges():
    task = {(0, 1), (0, 2), (0, 3)}
    negs, short = draw_negatives([(0, 1)], task, 6, 10, seed=0)
    assert sorted(negs[0]) == [4, 5] and short == 8


def test_embedding_files_round_trip(tmp_path):
    emb = NodeEmbeddings(np.array([3, 1, 7]), np.random.default_rng(0).normal(size=(3, 5)), "abc")
    write_embeddings(emb, tmp_path / "e")
    back = read_embeddings(tmp_path / "e")
    assert list(back.nodes) == [3, 1, 7] and back.checkpoint == "abc"
    assert back.vectors.tobytes() == emb.vectors.tobytes()
    assert np.array_equal(back[7], emb[7])


def test_report_files(tmp_path):
    rec = dict(dataset="synthetic", seed=0, hit1=0.25, mrr=0.5, n_test=4, n_neg=10)
    write_report([rec], tmp_path)
    assert "25.00" in (tmp_path / "metrics.txt").read_text()
    assert "hit@1" in format_table([rec])


@pytest.fixture(scope="module")
def trained():
    cfg = small_cfg()
    graph, _ = generate(C.synth_config(cfg))
    split = split_edges(graph, TASK_TYPE, cfg["split.n_train"], cfg["split.n_val"], 0)
    model = GpeftModel.build(C.model_config(cfg), 0, np.float32)
    return model, graph, split, observed_graph(graph, split)


def test_one_forward_per_node(trained):
    model, graph, split, obs = trained
    before = model.lm.forward_count
    emb = infer_embeddings(model, range(graph.n_nodes), obs, 0, batch_size=16)
    assert model.lm.forward_count - before == graph.n_nodes == len(emb)


def test_inference_is_deterministic_and_batch_independent(trained):
    model, graph, split, obs = trained
    full = infer_embeddings(model, range(graph.n_nodes), obs, 0, batch_size=32)
    again = infer_embeddings(model, range(graph.n_nodes), obs, 0, batch_size=32)
    assert full.vectors.tobytes() == again.vectors.tobytes()
    subset = infer_embeddings(model, [5, 17, 42], obs, 0, batch_size=2)
    np.testing.assert_allclose(subset.rows([5, 17, 42]), full.rows([5, 17, 42]), rtol=1e-5, atol=1e-6)


def test_cached_embeddings_give_identical_metrics(trained, tmp_path):
    model, graph, split, obs = trained
    emb = infer_embeddings(model, range(graph.n_nodes), obs, 0)
    write_embeddings(emb, tmp_path / "e")
    a = evaluate_split(split, emb, graph.n_nodes, 20, seed=3)
    b = evaluate_split(split, read_embeddings(tmp_path / "e"), graph.n_nodes, 20, seed=3)
    assert a.ranks == b.ranks and a.n_test == len(split.test)
