"""Desk-scale text-rich graph generator and byte-level tokenisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import GraphError, TextRichGraph

GRL_ID = 256
PAD_ID = 257
BASE_TYPE = "base"
TASK_TYPE = "task"


@dataclass
class SynthConfig:
    n_nodes: int = 100
    n_topics: int = 5
    tokens_per_node: int = 24
    p_noise: float = 0.5
    density: float = 0.15  # within-topic base-edge probability
    cross_rate: float = 0.005  # cross-topic base-edge probability
    task_rule: str = "shared_neighbors"
    shared_m: int = 2
    task_density: float = 1.0  # used by the same_topic rule
    alphabet_size: int = 16
    d_feat: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_topics > self.n_nodes:
            raise ValueError("n_topics must not exceed n_nodes")
        if not 0.0 <= self.p_noise < 1.0:
            raise ValueError("p_noise must lie in [0, 1)")
        if self.task_rule not in ("same_topic", "shared_neighbors"):
            raise ValueError(f"unknown task rule {self.task_rule!r}")


def tokenize(text: bytes) -> list[int]:
    return list(bytes(text))


def detokenize(ids) -> bytes:
    ids = [int(i) for i in ids]
    if any(i < 0 or i > 255 for i in ids):
        raise ValueError("only byte ids 0..255 can be detokenized")
    return bytes(ids)


def truncate(ids, max_seq: int) -> list[int]:
    """Leave two slots of ``max_seq`` for the graph prompt and [GRL]."""
    return list(ids)[: max(max_seq - 2, 1)]


def histograms(texts) -> np.ndarray:
    h = np.zeros((len(texts), 256))
    for v, t in enumerate(texts):
        h[v] = np.bincount(np.asarray(t, dtype=np.int64), minlength=256)[:256]
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    return h / np.where(norms > 0, norms, 1.0)


def node_features(texts, d_feat: int = 32, seed: int = 0) -> np.ndarray:
    """Stand-in for frozen text-encoder features: unit histogram times a fixed random projection."""
    proj = np.random.default_rng([seed, 0xFEA7]).normal(0.0, 1.0 / np.sqrt(d_feat), size=(256, d_feat))
    return histograms(texts) @ proj


def generate(cfg: SynthConfig) -> tuple[TextRichGraph, np.ndarray]:
    """Graph plus the latent topic of every node."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_nodes
    topics = rng.permutation(np.arange(n) % cfg.n_topics)
    byte_perm = rng.permutation(256)
    alphabets = []
    for t in range(cfg.n_topics):
        start = (t * cfg.alphabet_size) % 256
        alphabets.append(np.array([byte_perm[(start + i) % 256] for i in range(cfg.alphabet_size)]))
    texts = []
    for v in range(n):
        alpha = alphabets[topics[v]]
        topical = alpha[rng.integers(len(alpha), size=cfg.tokens_per_node)]
        noise = rng.integers(256, size=cfg.tokens_per_node)
        flip = rng.random(cfg.tokens_per_node) < cfg.p_noise
        texts.append(np.where(flip, noise, topical).astype(np.int64))

    same = topics[:, None] == topics[None, :]
    prob = np.where(same, cfg.density, cfg.cross_rate)
    draw = rng.random((n, n))
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    base = (draw < prob) & upper
    base_pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(base))]
    adj = (base | base.T).astype(np.int64)

    if cfg.task_rule == "shared_neighbors":
        common = adj @ adj
        task = (common >= cfg.shared_m) & upper
    else:
        task = same & upper & (rng.random((n, n)) < cfg.task_density)
    task_pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(task))]
    if not task_pairs:
        deg = adj.sum(axis=1).mean()
        raise GraphError(
            f"configuration yields zero task edges (rule={cfg.task_rule}, m={cfg.shared_m}, "
            f"mean base degree {deg:.2f}); raise density"
        )
    feats = node_features(texts, cfg.d_feat, cfg.seed)
    graph = TextRichGraph(texts, feats, {BASE_TYPE: base_pairs, TASK_TYPE: task_pairs}, [BASE_TYPE, TASK_TYPE])
    return graph, topics


def stats(graph: TextRichGraph, task_type: str = TASK_TYPE) -> dict:
    n_edges = sum(len(e) for t, e in graph.edges.items() if t != task_type)
    return {
        "nodes": graph.n_nodes,
        "edges": n_edges,
        "task_edges": len(graph.edges.get(task_type, [])),
        "avg_degree": 2.0 * n_edges / max(graph.n_nodes, 1),
        "avg_tokens": float(np.mean([len(t) for t in graph.texts])),
    }


def format_stats(s: dict) -> str:
    head = f"{'#Nodes':>8} {'#Edges':>8} {'#Task Edges':>12} {'Avg Degree':>11} {'Avg #Tokens':>12}"
    row = f"{s['nodes']:>8} {s['edges']:>8} {s['task_edges']:>12} {s['avg_degree']:>11.2f} {s['avg_tokens']:>12.2f}"
    return head + "\n" + row


def mutual_information(x: np.ndarray, y: np.ndarray, bins: int = 10) -> float:
    """Plug-in MI (nats) between a real score ``x`` (quantile-binned) and a binary label ``y``."""
    edges = np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1])
    xb = np.searchsorted(edges, x)
    joint = np.zeros((bins, 2))
    np.add.at(joint, (xb, y.astype(np.int64)), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (px @ py)[nz])).sum())


def signal_report(graph: TextRichGraph, cfg: SynthConfig) -> dict:
    """How much task adjacency is explained by text vs by base-graph common neighbours."""
    n = graph.n_nodes
    h = histograms(graph.texts)
    sim = h @ h.T
    adj = np.zeros((n, n), dtype=np.int64)
    for i, j in graph.edges[BASE_TYPE]:
        adj[i, j] = adj[j, i] = 1
    task = np.zeros((n, n), dtype=bool)
    for i, j in graph.edges[TASK_TYPE]:
        task[i, j] = task[j, i] = True
    iu = np.triu_indices(n, k=1)
    common = (adj @ adj)[iu]
    label = task[iu]
    out = {"mi_text": mutual_information(sim[iu], label), "entropy_task": _entropy(label.mean())}
    if cfg.task_rule == "shared_neighbors":
        out["common_neighbors_exact"] = bool(np.array_equal(common >= cfg.shared_m, label))
    return out


def _entropy(p: float) -> float:
    if p <= 0 or p >= 1:
        return 0.0
    return float(-(p * np.log(p) + (1 - p) * np.log(1 - p)))
