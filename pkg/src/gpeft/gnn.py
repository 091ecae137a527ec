"""Relation-aware mean-aggregation GNN that maps a sampled neighbourhood to a graph prompt."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import NeighborSample
from .params import ParameterStore


@dataclass
class GnnConfig:
    d_feat: int = 32
    d_gnn: int = 32
    k_layers: int = 2
    n_rel: int = 2
    d_model: int = 64
    activation: str = "relu"

    def __post_init__(self):
        if self.d_gnn <= 0 or self.k_layers < 1 or self.n_rel < 1:
            raise ValueError("need d_gnn > 0, k_layers >= 1, n_rel >= 1")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class GraphPrompt:
    z: np.ndarray
    node: int


def init_gnn(store: ParameterStore, cfg: GnnConfig, rng, m_std: float = 0.02, rel_noise: float = 0.02) -> None:
    """Relation weights start near identity so untrained prompts already average neighbour features."""
    d = cfg.d_gnn
    if cfg.d_feat != d:
        store.add("gnn.in_proj", rng.normal(0, 1 / np.sqrt(cfg.d_feat), (cfg.d_feat, d)), "g")
    for l in range(cfg.k_layers):
        for t in range(cfg.n_rel):
            store.add(f"gnn.layers.{l}.rel{t}", np.eye(d) + rng.normal(0, rel_noise, (d, d)), "g")
        store.add(f"gnn.layers.{l}.bias", np.zeros(d), "g")
    store.add("gnn.M", rng.normal(0, m_std, (d, cfg.d_model)), "g")
    store.add("gnn.M_bias", np.zeros(cfg.d_model), "g")


def count_params(cfg: GnnConfig) -> dict[str, int]:
    """Closed-form relation-weight + mapping count, checked against allocated tensors."""
    formula = cfg.k_layers * cfg.d_gnn**2 * cfg.n_rel + cfg.d_gnn * cfg.d_model
    enumerated = 0
    for _ in range(cfg.k_layers):
        for _ in range(cfg.n_rel):
            enumerated += cfg.d_gnn * cfg.d_gnn
    enumerated += cfg.d_gnn * cfg.d_model
    bias = cfg.k_layers * cfg.d_gnn + cfg.d_model
    in_proj = cfg.d_feat * cfg.d_gnn if cfg.d_feat != cfg.d_gnn else 0
    return {"formula": formula, "enumerated": enumerated, "bias": bias, "input_projection": in_proj,
            "total": enumerated + bias + in_proj}


def enumerate_params(store: ParameterStore) -> dict[str, int]:
    """Sizes of allocated Θ_g tensors grouped as in ``count_params``."""
    out = {"enumerated": 0, "bias": 0, "input_projection": 0}
    for name in store.names(["g"]):
        size = store[name].data.size
        if name.endswith("bias"):
            out["bias"] += size
        elif name == "gnn.in_proj":
            out["input_projection"] += size
        else:
            out["enumerated"] += size
    out["total"] = sum(out.values())
    return out


@dataclass
class _Level:
    nodes: np.ndarray  # node ids at this depth
    agg: list[np.ndarray]  # per relation, (n_parent, n_child) averaging matrix into the previous level


def _canonical_levels(samples: list[NeighborSample], k: int, n_rel: int) -> list[_Level]:
    """Flatten sampled trees into depth levels; children sorted by (node id, edge type)."""
    level_nodes: list[list[int]] = [[s.center for s in samples]]
    # each entry: (sample index, position in that sample's layer)
    refs: list[list[tuple[int, int]]] = [[(b, 0) for b in range(len(samples))]]
    rels: list[list[int]] = [[-1] * len(samples)]
    parents: list[list[int]] = [[-1] * len(samples)]
    for depth in range(1, k + 1):
        nodes, ref, rel, par = [], [], [], []
        children: dict[tuple[int, int], list[int]] = {}
        for b, s in enumerate(samples):
            if depth - 1 < len(s.layers):
                for pos, (v, t, parent_pos) in enumerate(s.layers[depth - 1]):
                    children.setdefault((b, parent_pos), []).append(pos)
        for gp, (b, ppos) in enumerate(refs[depth - 1]):
            layer = samples[b].layers[depth - 1] if depth - 1 < len(samples[b].layers) else []
            kids = sorted(children.get((b, ppos), []), key=lambda c: (layer[c][0], layer[c][1]))
            for c in kids:
                v, t, _ = layer[c]
                if not 0 <= t < n_rel:
                    raise ValueError(f"edge type {t} outside [0, {n_rel})")
                nodes.append(v)
                ref.append((b, c))
                rel.append(t)
                par.append(gp)
        level_nodes.append(nodes)
        refs.append(ref)
        rels.append(rel)
        parents.append(par)
    levels = []
    for depth in range(k + 1):
        agg = []
        if depth > 0:
            n_par, n_ch = len(level_nodes[depth - 1]), len(level_nodes[depth])
            par = np.asarray(parents[depth], dtype=np.int64)
            rel = np.asarray(rels[depth], dtype=np.int64)
            for t in range(n_rel):
                A = np.zeros((n_par, n_ch))
                sel = np.flatnonzero(rel == t)
                if len(sel):
                    counts = np.bincount(par[sel], minlength=n_par)
                    A[par[sel], sel] = 1.0 / counts[par[sel]]
                agg.append(A)
        levels.append(_Level(np.asarray(level_nodes[depth], dtype=np.int64), agg))
    return levels


def encode(samples: list[NeighborSample], features: np.ndarray, store: ParameterStore, cfg: GnnConfig) -> Tensor:
    """Graph prompts ``(B, d_model)`` for a batch of sampled neighbourhoods."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != cfg.d_feat:
        raise ShapeError(f"features have width {features.shape[-1]}, expected d_feat={cfg.d_feat}")
    k = cfg.k_layers
    for s in samples:
        if len(s.layers) != k:
            raise ValueError(f"sample depth {len(s.layers)} != k_layers {k}")
    levels = _canonical_levels(samples, k, cfg.n_rel)
    dtype = ad.get_dtype()
    h: list[Tensor] = []
    for lvl in levels:
        x = Tensor(features[lvl.nodes].astype(dtype) if len(lvl.nodes) else np.zeros((0, cfg.d_feat), dtype))
        if "gnn.in_proj" in store:
            x = x @ store["gnn.in_proj"]
        h.append(x)
    for l in range(k):
        W = [store[f"gnn.layers.{l}.rel{t}"] for t in range(cfg.n_rel)]
        bias = store[f"gnn.layers.{l}.bias"]
        last = l == k - 1
        new = []
        for depth in range(k - l):
            out = h[depth] + bias
            child = h[depth + 1]
            if child.shape[0]:
                for t in range(cfg.n_rel):
                    A = levels[depth + 1].agg[t]
                    if A.any():
                        out = out + (Tensor(A.astype(dtype)) @ child) @ W[t]
            if cfg.activation == "relu" and not last:
                out = ad.relu(out)
            new.append(out)
        h = new
    return h[0] @ store["gnn.M"] + store["gnn.M_bias"]


def encode_one(center_features, sample: NeighborSample, features: np.ndarray, store: ParameterStore,
               cfg: GnnConfig) -> GraphPrompt:
    feats = np.array(features, copy=True)
    feats[sample.center] = center_features
    z = encode([sample], feats, store, cfg)
    return GraphPrompt(z.data[0].copy(), sample.center)
