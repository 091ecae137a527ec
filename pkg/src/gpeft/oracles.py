"""Finite-difference checks of every loss used in training, on small fixtures."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import config as C
from .graph import NegativeSampler, observed_graph, split_edges
from .lm import clm_loss
from .model import GpeftModel
from .peft import set_phase
from .synthetic import TASK_TYPE, generate
from .training import contrastive_loss, finetune_loss, pretrain_loss

TOLERANCE = {"float64": 1e-6, "float32": 1e-4}
LOSSES = ("clm", "contrastive", "pretrain", "finetune")


def fixture(cfg: dict, seed: int, precision: str):
    """Graph, split, observed view and a model conditioned for finite differences.

    At the training init (std 0.02) attention is nearly uniform and query/key gradients fall to ~1e-6, where
    float64 round-off in the loss swamps a central difference.  The fixture therefore scales backbone matrices
    and the GNN output map by 10 and gives LoRA B factors nonzero values so A gets gradient.
    """
    cfg = dict(cfg, **{"run.seed": seed})
    graph, _ = generate(C.synth_config(cfg))
    split = split_edges(graph, TASK_TYPE, min(cfg["split.n_train"], 8), 2, seed)
    with ad.precision(precision):
        model = GpeftModel.build(C.model_config(cfg), seed, ad.get_dtype())
    rng = np.random.default_rng([seed, 77])
    for name in model.store.names(["peft"]):
        t = model.store[name]
        if name.endswith(".B"):
            t.data = rng.normal(0, 0.05, t.shape).astype(t.data.dtype)
    for name in model.store.names(["pre"]) + ["gnn.M"]:
        t = model.store[name]
        if t.ndim == 2:
            t.data = (t.data * 10.0).astype(t.data.dtype)
    return graph, split, observed_graph(graph, split), model


def loss_fn(name: str, cfg: dict, seed: int, precision: str):
    """``(fn, params)`` for one named loss, ready for ``grad_check``."""
    rng = np.random.default_rng([seed, 5])
    if name == "clm":
        V = cfg.get("lm.vocab_size", 258)
        logits = ad.parameter(rng.normal(0, 1, (6, V)).astype(_np_dtype(precision)), name="logits")
        targets = rng.integers(0, V, 6)
        targets[2] = -1
        return (lambda: clm_loss(logits, targets)), {"logits": logits}
    if name == "contrastive":
        d = cfg["lm.d_model"]
        vs = {k: ad.parameter(rng.normal(0, 1, (3, d)).astype(_np_dtype(precision)), name=k) for k in ("vi", "vj", "vn")}
        return (lambda: contrastive_loss(vs["vi"], vs["vj"], vs["vn"], cfg["finetune.tau"])), vs
    graph, split, obs, model = fixture(cfg, seed, precision)
    if name == "pretrain":
        set_phase(model.store, "pretrain")
        nodes = list(rng.choice(graph.n_nodes, 3, replace=False))
        fn = lambda: pretrain_loss(model, nodes, obs, seed, 1)  # noqa: E731
    elif name == "finetune":
        set_phase(model.store, "finetune")
        edges = split.train[:2]
        sampler = NegativeSampler(graph.n_nodes, split.task_edges())
        negs = [sampler.draw(e, np.random.default_rng([seed, k])) for k, e in enumerate(edges)]
        fn = lambda: finetune_loss(model, edges, negs, obs, seed, 1, cfg["finetune.tau"])  # noqa: E731
    else:
        raise ValueError(f"unknown loss {name!r}")
    params = {n: model.store[n] for n in model.store.trainable_names()}
    return fn, params


def _np_dtype(precision: str):
    return np.float64 if precision == "float64" else np.float32


def gradcheck_suite(cfg: dict, seeds, coords: int = 6, losses=LOSSES, precisions=("float64", "float32")) -> list[dict]:
    out = []
    for seed in seeds:
        for precision in precisions:
            for name in losses:
                with ad.precision(precision):
                    fn, params = loss_fn(name, cfg, int(seed), precision)
                    rep = ad.grad_check(fn, params, max_coords=coords, seed=int(seed))
                tol = TOLERANCE[precision]
                out.append(dict(seed=int(seed), loss=name, precision=precision, max_error=rep.max_error, tol=tol,
                                ok=rep.passed(tol), checked=sum(rep.checked.values()), report=rep))
    return out
