"""GNN prompt encoder + causal LM + adapters, assembled over one parameter store."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gnn import GnnConfig, encode, init_gnn
from .graph import TextRichGraph, sample_neighbors
from .lm import CausalLM, LmConfig, PromptedSequence
from .params import ParameterStore
from .peft import add_lora, add_prefix

PROMPT_MODES = ("prepend", "append", "prefix", "none")

# stream tags for per-node seeding
STREAM_PRETRAIN, STREAM_FINETUNE, STREAM_EVAL, STREAM_NEG, STREAM_VAL = 1, 2, 3, 4, 5


@dataclass
class ModelConfig:
    lm: LmConfig = field(default_factory=LmConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    prompt_mode: str = "prepend"
    peft: str = "lora"  # lora | prefix
    lora_rank: int = 4
    lora_alpha: float | None = None
    n_prefix: int = 1
    prefix_per_layer: bool = True
    fanouts: tuple = (5, 5)
    grl_in_pretrain: bool = False
    predict_first: bool = False

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode {self.prompt_mode!r}")
        if self.peft not in ("lora", "prefix"):
            raise ValueError(f"unknown PEFT kind {self.peft!r}")
        if self.prompt_mode == "prefix" and self.peft != "prefix":
            raise ValueError("prompt mode 'prefix' requires peft=prefix")
        if len(self.fanouts) != self.gnn.k_layers:
            raise ValueError(f"{len(self.fanouts)} fanouts for a {self.gnn.k_layers}-layer GNN")
        if self.gnn.d_model != self.lm.d_model:
            raise ValueError("GNN output width must equal the LM's d_model")
        if self.prompt_mode == "prefix" and self.n_prefix + 2 > self.lm.n_positions:
            raise ValueError(f"{self.n_prefix} prefix rows leave no room in {self.lm.n_positions} positions")


def node_seed(seed: int, stream: int, epoch: int, node: int) -> list[int]:
    return [int(seed), int(stream), int(epoch), int(node)]


class GpeftModel:
    def __init__(self, cfg: ModelConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store
        lora_rank = cfg.lora_rank if cfg.peft == "lora" else 0
        self.lm = CausalLM(cfg.lm, store, lora_rank=lora_rank, lora_alpha=cfg.lora_alpha)

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int, dtype=None) -> "GpeftModel":
        from .lm import init_lm

        store = ParameterStore()
        init_lm(store, cfg.lm, np.random.default_rng([seed, 11]))
        init_gnn(store, cfg.gnn, np.random.default_rng([seed, 12]))
        if cfg.peft == "lora":
            add_lora(store, cfg.lm.n_layers, cfg.lm.d_model, cfg.lora_rank, cfg.lora_alpha,
                     np.random.default_rng([seed, 13]))
        else:
            add_prefix(store, cfg.lm.n_layers, cfg.lm.d_model, cfg.n_prefix, cfg.prefix_per_layer,
                       np.random.default_rng([seed, 13]))
        store.astype(dtype or ad.get_dtype())
        return cls(cfg, store)

    @property
    def uses_prompt(self) -> bool:
        return self.cfg.prompt_mode != "none"

    @property
    def max_text(self) -> int:
        """Text tokens kept per node after reserving prompt/prefix slots and [GRL]."""
        limit = self.cfg.lm.max_seq - 2
        if self.cfg.prompt_mode == "prefix":
            limit = min(limit, self.cfg.lm.n_positions - self.cfg.n_prefix - 1)
        return limit

    def tokens(self, graph: TextRichGraph, v: int) -> list[int]:
        return [int(t) for t in graph.texts[v][: self.max_text]]

    def pad_length(self, graph: TextRichGraph) -> int:
        longest = max(min(len(t), self.max_text) for t in graph.texts)
        extra = self.cfg.n_prefix if self.cfg.prompt_mode == "prefix" else int(self.uses_prompt)
        return min(longest + extra + 1, self.cfg.lm.n_positions)

    def prompts(self, nodes, obs: TextRichGraph, seeds) -> Tensor | None:
        if not self.uses_prompt:
            return None
        samples = [sample_neighbors(obs, int(v), self.cfg.fanouts, s) for v, s in zip(nodes, seeds)]
        return encode(samples, obs.features, self.store, self.cfg.gnn)

    def sequences(self, nodes, graph: TextRichGraph, grl: bool) -> list[PromptedSequence]:
        mode = self.cfg.prompt_mode
        return [PromptedSequence(self.tokens(graph, int(v)), None, mode, grl) for v in nodes]

    def forward(self, nodes, obs: TextRichGraph, seeds, grl: bool, pad_to: int | None = None, record=False):
        z = self.prompts(nodes, obs, seeds)
        seqs = self.sequences(nodes, obs, grl)
        return self.lm.forward(seqs, prompts=z, pad_to=pad_to, record=record,
                               predict_first=self.cfg.predict_first)

    def embed(self, nodes, obs: TextRichGraph, seeds, pad_to: int | None = None) -> Tensor:
        """Node embeddings: final hidden state at [GRL] of the prompted sequence."""
        out = self.forward(nodes, obs, seeds, grl=True, pad_to=pad_to)
        return self.lm.grl_embedding(out)

    def pretrain_loss(self, nodes, obs: TextRichGraph, seeds, pad_to: int | None = None) -> Tensor:
        out = self.forward(nodes, obs, seeds, grl=self.cfg.grl_in_pretrain, pad_to=pad_to)
        return self.lm.loss(out)
