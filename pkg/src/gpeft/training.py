"""Two-phase optimisation: prompted next-token pre-training of the GNN, then contrastive fine-tuning."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import draw_negatives, infer_embeddings, needed_nodes, rank_metrics
from .graph import EdgeSplit, NegativeSampler, TextRichGraph, observed_graph
from .model import STREAM_FINETUNE, STREAM_NEG, STREAM_PRETRAIN, GpeftModel, node_seed
from .peft import PHASE_TRAINABLE, set_phase

PHASES = ("backbone", "pretrain", "finetune")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    phase: str = "finetune"
    batch_size: int = 4
    lr: float = 1e-4
    warmup_epochs: float = 1.0
    epochs: int = 4
    max_grad_norm: float = 1.0
    tau: float = 0.5
    fanouts: tuple = (5, 5)
    seed: int = 0
    precision: str = "float32"
    prompt_mode: str = "prepend"
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    fixed_negatives: bool = False
    val_negatives: int = 100
    val_edges: int = 0  # 0 = every validation edge

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if not 0.0 < self.tau < 2.0:
            raise ConfigError(f"margin tau={self.tau} outside (0, 2)")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch size must be >= 1 and epochs >= 0")
        if self.max_grad_norm <= 0:
            raise ConfigError("max gradient norm must be positive")


# optimisation


class AdamW:
    """Adam with decoupled weight decay over a fixed list of tensors."""

    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale grads in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = ad.global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def lr_at(step: int, steps_per_epoch: int, peak: float, warmup_epochs: float) -> float:
    """Linear warm-up over ``warmup_epochs`` epochs, then constant."""
    warm = warmup_epochs * steps_per_epoch
    if warm <= 0:
        return peak
    return peak * min(1.0, (step + 1) / warm)


# losses


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    dot = (a * b).sum(axis=-1)
    na = (a * a).sum(axis=-1).sqrt()
    nb = (b * b).sum(axis=-1).sqrt()
    return dot / (na * nb)


def contrastive_loss(v_i: Tensor, v_j: Tensor, v_n: Tensor, tau: float = 0.5, ids=None) -> Tensor:
    """Batch mean of ``d_ij^2 + max(tau - d_in, 0)^2`` with cosine distance ``d = 1 - cos``.

    Inputs are ``(d,)`` or ``(B, d)``; ``ids`` optionally names the rows' nodes for error messages.
    """
    vs = [ad.as_tensor(v) for v in (v_i, v_j, v_n)]
    if vs[0].ndim == 1:
        vs = [v.reshape(1, v.shape[0]) for v in vs]
    for k, v in enumerate(vs):
        norms = np.linalg.norm(v.data.astype(np.float64), axis=-1)
        if (norms == 0).any():
            row = int(np.flatnonzero(norms == 0)[0])
            who = f"node {ids[k][row]}" if ids is not None else f"row {row} of input {k}"
            raise ValueError(f"zero-norm embedding for {who}: cosine undefined")
    d_pos = 1.0 - cosine_rows(vs[0], vs[1])
    d_neg = 1.0 - cosine_rows(vs[0], vs[2])
    per = d_pos * d_pos + ad.relu(tau - d_neg) ** 2
    return per.mean()


# steps


def pretrain_loss(model: GpeftModel, nodes, obs: TextRichGraph, seed: int, epoch: int, pad_to=None) -> Tensor:
    if len(nodes) == 0:
        raise ValueError("empty pre-training batch")
    seeds = [node_seed(seed, STREAM_PRETRAIN, epoch, v) for v in nodes]
    return model.pretrain_loss(nodes, obs, seeds, pad_to=pad_to)


def backbone_loss(model: GpeftModel, nodes, obs: TextRichGraph, pad_to=None) -> Tensor:
    """Plain next-token loss on node texts with no prompt (trains the stand-in backbone)."""
    from .lm import PromptedSequence

    if len(nodes) == 0:
        raise ValueError("empty backbone batch")
    seqs = [PromptedSequence(model.tokens(obs, int(v))) for v in nodes]
    return model.lm.loss(model.lm.forward(seqs, pad_to=pad_to))


def finetune_loss(model: GpeftModel, edges, negatives, obs: TextRichGraph, seed: int, epoch: int, tau: float,
                  pad_to=None) -> Tensor:
    """Each of ``i``, ``j``, ``j'`` gets its own graph prompt and its own prompted forward."""
    if len(edges) == 0:
        raise ValueError("empty fine-tuning batch")
    heads = [int(i) for i, _ in edges]
    tails = [int(j) for _, j in edges]
    negs = [int(n) for n in negatives]
    nodes = heads + tails + negs
    seeds = [node_seed(seed, STREAM_FINETUNE, epoch, v) for v in nodes]
    emb = model.embed(nodes, obs, seeds, pad_to=pad_to)
    B = len(edges)
    return contrastive_loss(emb[0:B], emb[B : 2 * B], emb[2 * B : 3 * B], tau, ids=(heads, tails, negs))


def _apply(loss: Tensor, params: list[Tensor], opt: AdamW, lr: float, max_norm: float | None) -> float:
    for p in params:
        p.zero_grad()
    ad.backward(loss)
    if max_norm is not None:
        clip_grad_norm(params, max_norm)
    opt.step(lr)
    return float(loss.data)


def pretrain_step(model, nodes, obs, cfg: TrainConfig, opt: AdamW, lr: float, epoch: int = 0, pad_to=None) -> float:
    params = _trainable(model, "pretrain")
    return _apply(pretrain_loss(model, nodes, obs, cfg.seed, epoch, pad_to), params, opt, lr, cfg.max_grad_norm)


def finetune_step(model, edges, negatives, obs, cfg: TrainConfig, opt: AdamW, lr: float, epoch: int = 0,
                  pad_to=None) -> float:
    params = _trainable(model, "finetune")
    loss = finetune_loss(model, edges, negatives, obs, cfg.seed, epoch, cfg.tau, pad_to)
    return _apply(loss, params, opt, lr, cfg.max_grad_norm)


def _trainable(model: GpeftModel, phase: str) -> list[Tensor]:
    want = set(PHASE_TRAINABLE[phase])
    names = model.store.trainable_names()
    if {model.store.tag(n) for n in names} != want & {model.store.tag(n) for n in model.store}:
        raise ConfigError(f"trainable set does not match phase {phase!r}; call set_phase first")
    return [model.store[n] for n in names]


# metrics log


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    loss: float
    val_hit1: float = float("nan")
    val_mrr: float = float("nan")
    wall: float = 0.0

    def line(self, wall: bool = True) -> str:
        parts = [f"phase={self.phase}", f"epoch={self.epoch}", f"loss={self.loss:.8f}",
                 f"val_hit1={self.val_hit1:.6f}", f"val_mrr={self.val_mrr:.6f}"]
        if wall:
            parts.append(f"wall={self.wall:.2f}")
        return " ".join(parts)


def parse_log_line(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        out[k] = v if k == "phase" else (int(v) if k == "epoch" else float(v))
    return out


@dataclass
class RunResult:
    log: list[EpochRecord] = field(default_factory=list)
    best_val_mrr: float = float("nan")
    best_epoch: int = 0
    pretrained: bool = False

    def losses(self, phase: str) -> list[float]:
        return [r.loss for r in self.log if r.phase == phase]


@dataclass
class RunConfig:
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(phase="pretrain", batch_size=8, lr=1e-3))
    finetune: TrainConfig = field(default_factory=TrainConfig)
    backbone: TrainConfig = field(default_factory=lambda: TrainConfig(phase="backbone", batch_size=16, lr=3e-3,
                                                                       epochs=0))
    skip_pretrain: bool = False


def check_run_config(model: GpeftModel, rc: RunConfig) -> None:
    mode = model.cfg.prompt_mode
    for tc in (rc.pretrain, rc.finetune):
        if tc.prompt_mode != mode:
            raise ConfigError(f"{tc.phase} config uses prompt mode {tc.prompt_mode!r}, model uses {mode!r}")
        if tuple(tc.fanouts) != tuple(model.cfg.fanouts):
            raise ConfigError(f"{tc.phase} fanouts {tuple(tc.fanouts)} differ from the model's {model.cfg.fanouts}")
    if rc.pretrain.phase != "pretrain" or rc.finetune.phase != "finetune" or rc.backbone.phase != "backbone":
        raise ConfigError("phase configs are attached to the wrong phases")
    if mode == "append" and not rc.skip_pretrain and rc.pretrain.epochs > 0:
        raise ConfigError("pre-training needs the prompt before the text; mode 'append' cannot pre-train")


def _batches(items: int, size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(items)
    return [order[s : s + size] for s in range(0, items, size)]


def train_backbone(model: GpeftModel, graph: TextRichGraph, nodes, tc: TrainConfig, log=None) -> list[EpochRecord]:
    set_phase(model.store, "backbone")
    params = [model.store[n] for n in model.store.trainable_names()]
    opt = AdamW(params, tc.betas, tc.adam_eps, tc.weight_decay)
    nodes = np.asarray(sorted(nodes), dtype=np.int64)
    pad = model.pad_length(graph)
    out, step = [], 0
    steps = math.ceil(len(nodes) / tc.batch_size)
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b in _batches(len(nodes), tc.batch_size, np.random.default_rng([tc.seed, 101, epoch])):
            lr = lr_at(step, steps, tc.lr, tc.warmup_epochs)
            losses.append(_apply(backbone_loss(model, nodes[b], graph, pad), params, opt, lr, tc.max_grad_norm))
            step += 1
        rec = EpochRecord("backbone", epoch, float(np.mean(losses)), wall=time.perf_counter() - t0)
        out.append(rec)
        if log:
            log(rec)
    return out


def pretrain(model: GpeftModel, obs: TextRichGraph, nodes, tc: TrainConfig, log=None) -> list[EpochRecord]:
    set_phase(model.store, "pretrain")
    params = [model.store[n] for n in model.store.trainable_names()]
    opt = AdamW(params, tc.betas, tc.adam_eps, tc.weight_decay)
    nodes = np.asarray(sorted(nodes), dtype=np.int64)
    pad = model.pad_length(obs)
    out, step = [], 0
    steps = math.ceil(len(nodes) / tc.batch_size)
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b in _batches(len(nodes), tc.batch_size, np.random.default_rng([tc.seed, 102, epoch])):
            lr = lr_at(step, steps, tc.lr, tc.warmup_epochs)
            losses.append(pretrain_step(model, nodes[b], obs, tc, opt, lr, epoch, pad))
            step += 1
        rec = EpochRecord("pretrain", epoch, float(np.mean(losses)), wall=time.perf_counter() - t0)
        out.append(rec)
        if log:
            log(rec)
    return out


def validate(model: GpeftModel, split: EdgeSplit, obs: TextRichGraph, tc: TrainConfig):
    edges = list(split.val)
    if tc.val_edges and len(edges) > tc.val_edges:
        pick = np.sort(np.random.default_rng([tc.seed, 103]).choice(len(edges), tc.val_edges, replace=False))
        edges = [edges[k] for k in pick]
    if not edges:
        return None
    negs, short = draw_negatives(edges, split.task_edges(), obs.n_nodes, tc.val_negatives, tc.seed + 7919)
    emb = infer_embeddings(model, needed_nodes(edges, negs), obs, tc.seed)
    return rank_metrics(edges, emb, negs, tc.val_negatives, short)


def finetune(model: GpeftModel, split: EdgeSplit, obs: TextRichGraph, tc: TrainConfig, log=None,
             select_best: bool = True) -> RunResult:
    set_phase(model.store, "finetune")
    params = [model.store[n] for n in model.store.trainable_names()]
    opt = AdamW(params, tc.betas, tc.adam_eps, tc.weight_decay)
    edges = np.asarray(split.train, dtype=np.int64)
    if len(edges) == 0:
        raise ConfigError("no training edges")
    sampler = NegativeSampler(obs.n_nodes, split.task_edges())
    pad = model.pad_length(obs)
    res = RunResult()
    best = None
    step = 0
    steps = math.ceil(len(edges) / tc.batch_size)
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        neg_epoch = 0 if tc.fixed_negatives else epoch
        negs = [sampler.draw(tuple(e), np.random.default_rng([tc.seed, STREAM_NEG, neg_epoch, k]))
                for k, e in enumerate(edges.tolist())]
        negs = np.asarray(negs, dtype=np.int64)
        losses = []
        for b in _batches(len(edges), tc.batch_size, np.random.default_rng([tc.seed, 104, epoch])):
            lr = lr_at(step, steps, tc.lr, tc.warmup_epochs)
            losses.append(finetune_step(model, edges[b].tolist(), negs[b], obs, tc, opt, lr, epoch, pad))
            step += 1
        rec = EpochRecord("finetune", epoch, float(np.mean(losses)))
        val = validate(model, split, obs, tc)
        if val is not None:
            rec.val_hit1, rec.val_mrr = val.hit1, val.mrr
            if select_best and (best is None or val.mrr > res.best_val_mrr):
                res.best_val_mrr, res.best_epoch = val.mrr, epoch
                best = model.store.snapshot(["g", "peft"])
        rec.wall = time.perf_counter() - t0
        res.log.append(rec)
        if log:
            log(rec)
    if best is not None:
        model.store.restore(best)
    return res


def run(model: GpeftModel, graph: TextRichGraph, split: EdgeSplit, rc: RunConfig, log=None) -> RunResult:
    """Backbone warm-up (optional), GNN pre-training, then fine-tuning with best-validation selection."""
    check_run_config(model, rc)
    obs = observed_graph(graph, split)
    nodes = range(graph.n_nodes)
    records: list[EpochRecord] = []
    if rc.backbone.epochs > 0:
        records += train_backbone(model, obs, nodes, rc.backbone, log)
    pretrained = False
    if model.uses_prompt and not rc.skip_pretrain and rc.pretrain.epochs > 0:
        records += pretrain(model, obs, nodes, rc.pretrain, log)
        pretrained = True
    res = finetune(model, split, obs, rc.finetune, log)
    res.log = records + res.log
    res.pretrained = pretrained
    return res


def write_log(records: list[EpochRecord], path, wall: bool = True) -> None:
    Path(path).write_text("".join(r.line(wall) + "\n" for r in records))
