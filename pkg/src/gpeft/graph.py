"""Text-rich graph container, edge splits, and seeded samplers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    pass


class NegativeSamplingError(RuntimeError):
    pass


def _canon(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class TextRichGraph:
    """Nodes ``0..N-1`` with token sequences, feature vectors and typed undirected edges."""

    texts: list[np.ndarray]
    features: np.ndarray
    edges: dict[str, list[tuple[int, int]]]
    edge_types: list[str] = field(default_factory=list)
    _adj: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.edge_types:
            self.edge_types = list(self.edges)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.texts = [np.asarray(t, dtype=np.int64) for t in self.texts]
        self.edges = {t: sorted(_canon(int(i), int(j)) for i, j in self.edges.get(t, [])) for t in self.edge_types}

    @property
    def n_nodes(self) -> int:
        return len(self.texts)

    @property
    def d_feat(self) -> int:
        return self.features.shape[1]

    def type_index(self, name: str) -> int:
        return self.edge_types.index(name)

    def validate(self, max_seq: int | None = None) -> None:
        n = self.n_nodes
        if self.features.shape[0] != n:
            raise GraphError(f"{self.features.shape[0]} feature rows for {n} nodes")
        for v, text in enumerate(self.texts):
            if len(text) == 0:
                raise GraphError(f"node {v} has an empty token sequence")
            if max_seq is not None and len(text) > max_seq:
                raise GraphError(f"node {v} has {len(text)} tokens > max_seq {max_seq}")
        for t, pairs in self.edges.items():
            if len(set(pairs)) != len(pairs):
                raise GraphError(f"duplicate edges in type {t!r}")
            for i, j in pairs:
                if i == j:
                    raise GraphError(f"self-loop on node {i} in type {t!r}")
                if not (0 <= i < n and 0 <= j < n):
                    raise GraphError(f"edge ({i}, {j}) of type {t!r} has an invalid endpoint")

    def adjacency(self) -> list[list[tuple[int, int]]]:
        """Per node, sorted ``(neighbor, type index)`` pairs over all stored edges."""
        if self._adj is None:
            adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n_nodes)]
            for ti, t in enumerate(self.edge_types):
                for i, j in self.edges[t]:
                    adj[i].append((j, ti))
                    adj[j].append((i, ti))
            self._adj = [sorted(a) for a in adj]
        return self._adj

    def with_edges(self, edges: dict[str, list[tuple[int, int]]]) -> "TextRichGraph":
        return TextRichGraph(self.texts, self.features, edges, list(self.edge_types))


@dataclass
class EdgeSplit:
    task_type: str
    train: list[tuple[int, int]]
    val: list[tuple[int, int]]
    test: list[tuple[int, int]]
    observed: dict[str, list[tuple[int, int]]]

    def task_edges(self) -> set[tuple[int, int]]:
        return set(self.train) | set(self.val) | set(self.test)


@dataclass
class NeighborSample:
    """Layered sample; ``layers[l]`` holds ``(node, edge type index, parent position)``.

    The parent position indexes layer ``l-1``, with layer 0 being ``[center]``.
    """

    center: int
    layers: list[list[tuple[int, int, int]]]
    fanouts: list[int]

    def nodes(self) -> set[int]:
        out = {self.center}
        for layer in self.layers:
            out.update(v for v, _, _ in layer)
        return out

    @property
    def size(self) -> int:
        return sum(len(layer) for layer in self.layers)


def split_edges(graph: TextRichGraph, task_type: str, n_train: int, n_val: int, seed) -> EdgeSplit:
    task = list(graph.edges[task_type])
    need = n_train + n_val + 1
    if len(task) < need:
        raise GraphError(
            f"task type {task_type!r} has {len(task)} edges; need at least {need} "
            f"(n_train={n_train}, n_val={n_val}, >=1 test)"
        )
    perm = make_rng(seed).permutation(len(task))
    train = sorted(task[k] for k in perm[:n_train])
    val = sorted(task[k] for k in perm[n_train : n_train + n_val])
    test = sorted(task[k] for k in perm[n_train + n_val :])
    observed = {t: list(e) for t, e in graph.edges.items() if t != task_type}
    observed[task_type] = list(train)
    return EdgeSplit(task_type, train, val, test, observed)


def observed_graph(graph: TextRichGraph, split: EdgeSplit) -> TextRichGraph:
    """The graph restricted to edges visible during training."""
    return graph.with_edges(split.observed)


def sample_neighbors(graph: TextRichGraph, center: int, fanouts, seed) -> NeighborSample:
    """Layered uniform sampling without replacement over ``graph``'s edges.

    Pass the observed view (``observed_graph``) so held-out edges are never read.
    """
    fanouts = [int(f) for f in fanouts]
    if not fanouts:
        raise ValueError("fanouts must be non-empty")
    rng = make_rng(seed)
    adj = graph.adjacency()
    layers: list[list[tuple[int, int, int]]] = []
    frontier = [center]
    for fanout in fanouts:
        layer = []
        for parent_pos, u in enumerate(frontier):
            cand = adj[u]
            if len(cand) > fanout:
                picks = np.sort(rng.choice(len(cand), size=fanout, replace=False))
                chosen = [cand[k] for k in picks]
            else:
                chosen = cand
            layer.extend((v, t, parent_pos) for v, t in chosen)
        layers.append(layer)
        frontier = [v for v, _, _ in layer]
    return NeighborSample(center, layers, fanouts)


class NegativeSampler:
    """Draws tail corruptions ``j'`` with ``(i, j')`` outside the task edge set."""

    def __init__(self, n_nodes: int, task_edges, max_tries: int = 64):
        if n_nodes < 3:
            raise GraphError("negative sampling needs at least 3 nodes")
        self.n_nodes = n_nodes
        self.max_tries = max_tries
        self.adj: list[set[int]] = [set() for _ in range(n_nodes)]
        for i, j in task_edges:
            self.adj[i].add(j)
            self.adj[j].add(i)

    def valid(self, i: int, j: int) -> np.ndarray:
        bad = self.adj[i] | {i, j}
        return np.array([v for v in range(self.n_nodes) if v not in bad], dtype=np.int64)

    def draw(self, positive: tuple[int, int], rng) -> int:
        i, j = positive
        rng = make_rng(rng)
        bad = self.adj[i]
        for _ in range(self.max_tries):
            v = int(rng.integers(self.n_nodes))
            if v != i and v != j and v not in bad:
                return v
        pool = self.valid(i, j)
        if len(pool) == 0:
            raise NegativeSamplingError(
                f"node {i} is task-adjacent to every other node; no negative for ({i}, {j}) "
                f"after {self.max_tries} retries"
            )
        return int(pool[rng.integers(len(pool))])

    def draw_many(self, positive: tuple[int, int], k: int, rng) -> tuple[np.ndarray, int]:
        """``k`` distinct negatives (fewer if unavailable) and the shortfall."""
        pool = self.valid(*positive)
        rng = make_rng(rng)
        if len(pool) <= k:
            return pool, k - len(pool)
        return np.sort(rng.choice(pool, size=k, replace=False)), 0


def sample_negative(graph: TextRichGraph, split: EdgeSplit, positive: tuple[int, int], seed) -> int:
    return NegativeSampler(graph.n_nodes, split.task_edges()).draw(positive, seed)


# text formats


def write_graph(graph: TextRichGraph, path) -> None:
    lines = [f"{graph.n_nodes} {graph.d_feat} {len(graph.edge_types)}"]
    lines += [" ".join(str(int(t)) for t in text) for text in graph.texts]
    lines += [" ".join(repr(float(x)) for x in row) for row in graph.features]
    for t in graph.edge_types:
        pairs = graph.edges[t]
        lines.append(f"{t} {len(pairs)}")
        lines += [f"{i} {j}" for i, j in pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> TextRichGraph:
    try:
        raw = Path(path).read_text().split("\n")
        n, d_feat, n_types = (int(x) for x in raw[0].split())
        pos = 1
        texts = [np.array([int(x) for x in raw[pos + v].split()], dtype=np.int64) for v in range(n)]
        pos += n
        feats = np.array([[float(x) for x in raw[pos + v].split()] for v in range(n)], dtype=np.float64)
        pos += n
        edges, types = {}, []
        for _ in range(n_types):
            name, count = raw[pos].split()
            pos += 1
            pairs = []
            for k in range(int(count)):
                i, j = raw[pos + k].split()
                pairs.append((int(i), int(j)))
            pos += int(count)
            edges[name] = pairs
            types.append(name)
    except (ValueError, IndexError) as exc:
        raise GraphError(f"malformed graph file {path}: {exc}") from exc
    if feats.shape != (n, d_feat):
        raise GraphError(f"feature block has shape {feats.shape}, header says ({n}, {d_feat})")
    return TextRichGraph(texts, feats, edges, types)


def write_split(split: EdgeSplit, path) -> None:
    lines = [f"# task_type {split.task_type}"]
    for tag in ("train", "val", "test"):
        lines += [f"{tag} {i} {j}" for i, j in getattr(split, tag)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path, graph: TextRichGraph) -> EdgeSplit:
    task_type = None
    parts: dict[str, list[tuple[int, int]]] = {"train": [], "val": [], "test": []}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            bits = line[1:].split()
            if len(bits) == 2 and bits[0] == "task_type":
                task_type = bits[1]
            continue
        tag, i, j = line.split()
        if tag not in parts:
            raise GraphError(f"unknown split tag {tag!r} in {path}")
        parts[tag].append((int(i), int(j)))
    if task_type is None:
        raise GraphError(f"split file {path} lacks a task_type header")
    observed = {t: list(e) for t, e in graph.edges.items() if t != task_type}
    observed[task_type] = list(parts["train"])
    return EdgeSplit(task_type, parts["train"], parts["val"], parts["test"], observed)
