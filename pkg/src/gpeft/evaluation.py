"""Node-embedding inference and link-prediction ranking metrics (hit@1, MRR)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import EdgeSplit, NegativeSampler, TextRichGraph
from .model import STREAM_EVAL, node_seed


@dataclass
class NodeEmbeddings:
    nodes: np.ndarray  # (N,) node ids
    vectors: np.ndarray  # (N, d)
    checkpoint: str = ""

    def __post_init__(self):
        self._row = {int(v): r for r, v in enumerate(self.nodes)}

    def __getitem__(self, node: int) -> np.ndarray:
        return self.vectors[self._row[int(node)]]

    def rows(self, nodes) -> np.ndarray:
        return self.vectors[[self._row[int(v)] for v in nodes]]

    def __contains__(self, node) -> bool:
        return int(node) in self._row

    def __len__(self) -> int:
        return len(self.nodes)


def infer_embeddings(model, nodes, obs: TextRichGraph, seed: int, batch_size: int = 32, epoch: int = 0,
                     checkpoint: str = "") -> NodeEmbeddings:
    """One prompted forward per node, ending in [GRL]; neighbour samples seeded per node."""
    nodes = np.array(sorted({int(v) for v in nodes}), dtype=np.int64)
    pad = model.pad_length(obs)
    out = np.zeros((len(nodes), model.cfg.lm.d_model))
    with ad.no_grad():
        for s in range(0, len(nodes), batch_size):
            chunk = nodes[s : s + batch_size]
            seeds = [node_seed(seed, STREAM_EVAL, epoch, v) for v in chunk]
            out[s : s + len(chunk)] = model.embed(chunk, obs, seeds, pad_to=pad).data
    return NodeEmbeddings(nodes, out, checkpoint)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine of ``a`` (d,) against rows of ``b`` (n, d), in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b, axis=-1)
    if na == 0 or (nb == 0).any():
        raise ValueError("cosine undefined for a zero-norm embedding")
    return (b @ a) / (nb * na)


def rank_of(true_score: float, neg_scores: np.ndarray) -> int:
    """1-based rank; the true edge loses ties."""
    return 1 + int(np.count_nonzero(neg_scores >= true_score))


@dataclass
class RankReport:
    hit1: float
    mrr: float
    n_test: int
    n_neg: int
    ranks: list[int] = field(default_factory=list)
    shortfall: int = 0

    def record(self, **extra) -> dict:
        out = dict(extra)
        out.update(hit1=self.hit1, mrr=self.mrr, n_test=self.n_test, n_neg=self.n_neg, shortfall=self.shortfall)
        return out


def draw_negatives(edges, task_edges, n_nodes: int, n_neg: int, seed: int) -> tuple[list[np.ndarray], int]:
    sampler = NegativeSampler(n_nodes, task_edges)
    negs, short = [], 0
    for k, e in enumerate(edges):
        nk, s = sampler.draw_many(e, n_neg, np.random.default_rng([seed, k]))
        negs.append(nk)
        short += s
    return negs, short


def rank_metrics(edges, embeddings: NodeEmbeddings, negatives: list[np.ndarray], n_neg: int,
                 shortfall: int = 0) -> RankReport:
    if not len(edges):
        raise ValueError("no edges to rank")
    ranks = []
    for (i, j), neg in zip(edges, negatives):
        cand = np.concatenate([[j], neg]).astype(np.int64)
        s = cosine(embeddings[i], embeddings.rows(cand))
        ranks.append(rank_of(s[0], s[1:]))
    r = np.asarray(ranks, dtype=np.float64)
    return RankReport(float(np.mean(r == 1)), float(np.mean(1.0 / r)), len(edges), n_neg, ranks, shortfall)


def evaluate_split(split: EdgeSplit, embeddings: NodeEmbeddings, n_nodes: int, n_neg: int = 100, seed: int = 0,
                   which: str = "test") -> RankReport:
    """Rank each held-out edge against ``n_neg`` tail corruptions outside the task edge set."""
    edges = getattr(split, which)
    negs, short = draw_negatives(edges, split.task_edges(), n_nodes, n_neg, seed)
    return rank_metrics(edges, embeddings, negs, n_neg, short)


def needed_nodes(edges, negatives) -> set[int]:
    out = set()
    for (i, j), neg in zip(edges, negatives):
        out.update((int(i), int(j)))
        out.update(int(v) for v in neg)
    return out


# persistence


def write_embeddings(emb: NodeEmbeddings, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    vec = np.ascontiguousarray(emb.vectors, dtype="<f8")
    manifest = {"n": int(len(emb.nodes)), "d_model": int(vec.shape[1]), "checkpoint": emb.checkpoint,
                "dtype": "float64", "nodes": [int(v) for v in emb.nodes]}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (path / "vectors.bin").write_bytes(vec.tobytes())


def read_embeddings(path) -> NodeEmbeddings:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = np.frombuffer((path / "vectors.bin").read_bytes(), dtype="<f8")
    n, d = manifest["n"], manifest["d_model"]
    if raw.size != n * d:
        raise IOError(f"{path}: expected {n * d} values, found {raw.size}")
    return NodeEmbeddings(np.asarray(manifest["nodes"], dtype=np.int64), raw.reshape(n, d).astype(np.float64),
                          manifest.get("checkpoint", ""))


def format_table(records: list[dict]) -> str:
    cols = ["dataset", "seed", "hit1", "mrr", "n_test", "n_neg"]
    head = f"{'dataset':<16} {'seed':>5} {'hit@1':>8} {'MRR':>8} {'n_test':>7} {'n_neg':>6}"
    lines = [head]
    for r in records:
        row = {c: r.get(c, "") for c in cols}
        lines.append(f"{str(row['dataset']):<16} {row['seed']!s:>5} {100 * row['hit1']:>8.2f} "
                     f"{100 * row['mrr']:>8.2f} {row['n_test']:>7} {row['n_neg']:>6}")
    return "\n".join(lines)


def write_report(records: list[dict], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(records, indent=1, sort_keys=True) + "\n")
    (out_dir / "metrics.txt").write_text(format_table(records) + "\n")


def report_dict(report: RankReport) -> dict:
    return asdict(report)
