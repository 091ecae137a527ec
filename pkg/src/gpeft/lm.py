"""Miniature pre-norm decoder-only transformer with graph-prompt injection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore
from .peft import lora_adapters, prefix_with_graph

MODES = ("none", "prepend", "append", "prefix")


class SequenceError(ValueError):
    pass


@dataclass
class LmConfig:
    vocab_size: int = 258
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_seq: int = 64
    ffn_mult: int = 4
    pos_encoding: str = "learned"
    grl_id: int = 256
    pad_id: int = 257

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.grl_id == self.pad_id or not (0 <= self.grl_id < self.vocab_size and 0 <= self.pad_id < self.vocab_size):
            raise ValueError("vocab must reserve distinct ids for [GRL] and padding")
        if self.pos_encoding != "learned":
            raise ValueError(f"unsupported position encoding {self.pos_encoding!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_positions(self) -> int:
        return self.max_seq + 2


@dataclass
class PromptedSequence:
    tokens: list[int]
    prompt: Tensor | None = None
    mode: str = "none"
    grl_appended: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise SequenceError(f"unknown prompt mode {self.mode!r}")
        if self.mode == "none" and self.prompt is not None:
            raise SequenceError("mode 'none' cannot carry a prompt")


@dataclass
class Layout:
    ids: np.ndarray  # (B, T) token ids, pad at prompt/prefix slots
    targets: np.ndarray  # (B, T) next-token targets, -1 where absent
    prompt_pos: np.ndarray  # (B,) prompt slot or -1
    grl_pos: np.ndarray  # (B,) [GRL] slot or -1
    text_pos: list[np.ndarray]  # per sequence, positions of text tokens
    lengths: np.ndarray
    n_prefix: int

    @property
    def T(self) -> int:
        return self.ids.shape[1]


@dataclass
class LmOutput:
    states: list[Tensor]  # hidden states per layer, entry 0 = input embeddings
    layout: Layout
    trace: list[dict] = field(default_factory=list)
    final: Tensor | None = None  # final-normed hidden states


def init_lm(store: ParameterStore, cfg: LmConfig, rng, std: float = 0.02) -> None:
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    proj_std = std / math.sqrt(2 * cfg.n_layers)
    store.add("lm.tok_emb", rng.normal(0, std, (cfg.vocab_size, d)), "pre")
    store.add("lm.pos_emb", rng.normal(0, std, (cfg.n_positions, d)), "pre")
    for l in range(cfg.n_layers):
        p = f"lm.layers.{l}."
        store.add(p + "ln1.g", np.ones(d), "pre")
        store.add(p + "ln1.b", np.zeros(d), "pre")
        for name in ("wq", "wk", "wv"):
            store.add(p + name, rng.normal(0, std, (d, d)), "pre")
        store.add(p + "wo", rng.normal(0, proj_std, (d, d)), "pre")
        store.add(p + "ln2.g", np.ones(d), "pre")
        store.add(p + "ln2.b", np.zeros(d), "pre")
        store.add(p + "w1", rng.normal(0, std, (d, f)), "pre")
        store.add(p + "b1", np.zeros(f), "pre")
        store.add(p + "w2", rng.normal(0, proj_std, (f, d)), "pre")
        store.add(p + "b2", np.zeros(d), "pre")
    store.add("lm.lnf.g", np.ones(d), "pre")
    store.add("lm.lnf.b", np.zeros(d), "pre")
    store.add("lm.w_out", rng.normal(0, std, (d, cfg.vocab_size)), "pre")


def build_layout(seqs: list[PromptedSequence], cfg: LmConfig, n_prefix: int = 0, pad_to: int | None = None,
                 predict_first: bool = False, batch_prompts: bool = False) -> Layout:
    T = cfg.n_positions if pad_to is None else pad_to
    if T > cfg.n_positions:
        raise SequenceError(f"pad length {T} exceeds position capacity {cfg.n_positions}")
    B = len(seqs)
    ids = np.full((B, T), cfg.pad_id, dtype=np.int64)
    targets = np.full((B, T), -1, dtype=np.int64)
    prompt_pos = np.full(B, -1, dtype=np.int64)
    grl_pos = np.full(B, -1, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    text_pos = []
    for b, s in enumerate(seqs):
        toks = [int(t) for t in s.tokens]
        if any(t < 0 or t >= cfg.vocab_size for t in toks):
            raise SequenceError(f"sequence {b} has a token id outside [0, {cfg.vocab_size})")
        if s.mode in ("prepend", "append") and s.prompt is None and not batch_prompts:
            raise SequenceError(f"sequence {b}: mode {s.mode!r} needs a prompt")
        pos = 0
        if s.mode == "prefix":
            pos = n_prefix
        elif s.mode == "prepend":
            prompt_pos[b] = 0
            pos = 1
        start = pos
        total = start + len(toks) + (s.mode == "append") + int(s.grl_appended)
        if total > T:
            raise SequenceError(f"sequence {b} needs {total} positions; capacity is {T}")
        ids[b, start : start + len(toks)] = toks
        tp = np.arange(start, start + len(toks))
        text_pos.append(tp)
        if len(toks) > 1:
            targets[b, tp[:-1]] = toks[1:]
        if predict_first and s.mode == "prepend" and toks:
            targets[b, 0] = toks[0]
        pos = start + len(toks)
        if s.mode == "append":
            prompt_pos[b] = pos
            pos += 1
        if s.grl_appended:
            ids[b, pos] = cfg.grl_id
            grl_pos[b] = pos
            pos += 1
        lengths[b] = pos
    return Layout(ids, targets, prompt_pos, grl_pos, text_pos, lengths, n_prefix)


class CausalLM:
    """Forward pass over a ``ParameterStore`` holding ``lm.*`` and optional ``peft.*`` tensors."""

    def __init__(self, cfg: LmConfig, store: ParameterStore, lora_rank: int = 0, lora_alpha: float | None = None):
        self.cfg = cfg
        self.store = store
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.forward_count = 0
        self._masks: dict[int, np.ndarray] = {}

    @property
    def n_prefix(self) -> int:
        if "peft.prefix.P" not in self.store:
            return 0
        return self.store["peft.prefix.P"].shape[-2]

    def causal_mask(self, T: int) -> np.ndarray:
        if T not in self._masks:
            self._masks[T] = np.tril(np.ones((T, T), dtype=bool))
        return self._masks[T]

    def _prefix_rows(self, layer: int, Z: Tensor | None, B: int) -> Tensor:
        P = self.store["peft.prefix.P"]
        if P.ndim == 3:
            P = P[layer]
        Pp = prefix_with_graph(P, Z)
        if Pp.ndim == 2:
            Pp = ad.BroadcastTo.apply(Pp.reshape(1, *Pp.shape), shape=(B, *Pp.shape))
        return Pp

    def forward(self, seqs: list[PromptedSequence], prompts: Tensor | None = None, pad_to: int | None = None,
                record: bool = False, predict_first: bool = False) -> LmOutput:
        cfg, st = self.cfg, self.store
        modes = {s.mode for s in seqs}
        if "prefix" in modes and self.n_prefix == 0:
            raise SequenceError("prefix mode needs a prefix adapter")
        if len(modes) > 1 and "prefix" in modes:
            raise SequenceError("prefix mode cannot be mixed with other modes in one batch")
        layout = build_layout(seqs, cfg, self.n_prefix if "prefix" in modes else 0, pad_to, predict_first,
                              batch_prompts=prompts is not None)
        B, T, d = len(seqs), layout.T, cfg.d_model
        self.forward_count += B
        if prompts is None and any(s.prompt is not None for s in seqs):
            width = next(s.prompt for s in seqs if s.prompt is not None).shape[-1]
            rows = [s.prompt.reshape(1, width) if s.prompt is not None else Tensor(np.zeros((1, width)))
                    for s in seqs]
            prompts = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        if prompts is not None and prompts.shape[-1] != d:
            raise ad.ShapeError(f"prompt width {prompts.shape[-1]} != d_model {d}")

        E = ad.take(st["lm.tok_emb"], layout.ids)
        slot = np.zeros((B, T, 1), dtype=bool)
        has = layout.prompt_pos >= 0
        slot[np.flatnonzero(has), layout.prompt_pos[has], 0] = True
        if slot.any():
            E = ad.where(slot, prompts.reshape(B, 1, d), E)
        n_p = layout.n_prefix
        if n_p:
            E = ad.concat([self._prefix_rows(0, prompts, B), E[:, n_p:, :]], axis=1)
        H = E + st["lm.pos_emb"][:T]
        states = [H]
        trace = []
        mask = self.causal_mask(T)
        nh, dh = cfg.n_heads, cfg.d_head
        scale = 1.0 / math.sqrt(dh)
        for l in range(cfg.n_layers):
            p = f"lm.layers.{l}."
            if n_p and l > 0:
                H = ad.concat([self._prefix_rows(l, prompts, B), H[:, n_p:, :]], axis=1)
            lora = lora_adapters(st, l, self.lora_rank, self.lora_alpha) if self.lora_rank else {}
            a = ad.layer_norm(H, st[p + "ln1.g"], st[p + "ln1.b"])
            q = _lin(a, st[p + "wq"], lora.get("q"))
            k = _lin(a, st[p + "wk"], lora.get("k"))
            v = _lin(a, st[p + "wv"], lora.get("v"))
            qh = q.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            kh = k.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            vh = v.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
            att = ad.softmax(scores, mask=mask)
            heads = att @ vh
            merged = heads.transpose(0, 2, 1, 3).reshape(B, T, d)
            attn_out = _lin(merged, st[p + "wo"], lora.get("o"))
            H_in = H
            H = H + attn_out
            a2 = ad.layer_norm(H, st[p + "ln2.g"], st[p + "ln2.b"])
            ff = ad.gelu(a2 @ st[p + "w1"] + st[p + "b1"]) @ st[p + "w2"] + st[p + "b2"]
            H = H + ff
            states.append(H)
            if record:
                trace.append(dict(input=H_in, normed=a, q=qh, k=kh, v=vh, scores=scores, att=att, heads=heads,
                                  attn_out=attn_out, output=H))
        return LmOutput(states, layout, trace)

    def final_norm(self, out: LmOutput) -> Tensor:
        if out.final is None:
            out.final = ad.layer_norm(out.states[-1], self.store["lm.lnf.g"], self.store["lm.lnf.b"])
        return out.final

    def logits(self, out: LmOutput) -> Tensor:
        return self.final_norm(out) @ self.store["lm.w_out"]

    def loss(self, out: LmOutput) -> Tensor:
        """Next-token loss over targeted positions only (head applied to those rows)."""
        tg = out.layout.targets.reshape(-1)
        rows = np.flatnonzero(tg >= 0)
        if len(rows) == 0:
            raise SequenceError("no predicted positions: empty loss")
        h = self.final_norm(out)
        flat = h.reshape(-1, self.cfg.d_model)[rows]
        return clm_loss(flat @ self.store["lm.w_out"], tg[rows])

    def grl_embedding(self, out: LmOutput) -> Tensor:
        return grl_embedding(out.states, out.layout)


def _lin(x: Tensor, W: Tensor, adapter) -> Tensor:
    out = x @ W
    if adapter is None:
        return out
    return out + ((x @ adapter.A) @ adapter.B.transpose()) * adapter.scale


def clm_loss(logits: Tensor, targets) -> Tensor:
    """Mean over predicted positions of ``-log softmax(logits)[target]``; targets < 0 are ignored."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ad.ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    n = int((targets >= 0).sum())
    if n == 0:
        raise SequenceError("all positions are masked: empty loss")
    losses = ad.softmax_cross_entropy(logits.reshape(-1, V), targets.reshape(-1))
    return losses.sum() * (1.0 / n)


def grl_embedding(states: list[Tensor], layout: Layout) -> Tensor:
    """Final-layer hidden state at each sequence's [GRL] slot, shape ``(B, d)``."""
    if (layout.grl_pos < 0).any():
        raise SequenceError("[GRL] token absent from at least one sequence")
    H = states[-1]
    B, T, d = H.shape
    rows = np.arange(B) * T + layout.grl_pos
    return H.reshape(B * T, d)[rows]


def hidden_at(states: list[Tensor], b: int, positions) -> list[np.ndarray]:
    return [s.data[b, positions] for s in states]


@dataclass
class AttentionReport:
    append_invariant: bool
    prepend_changes: bool
    append_is_convex_mix: bool
    prompt_grad_norm: float
    prepend_z_sensitive: bool
    max_reconstruction_error: float
    max_weight_sum_error: float

    def ok(self) -> bool:
        return self.append_invariant and self.prepend_changes and self.append_is_convex_mix and self.prompt_grad_norm > 0


def attention_oracle(lm: CausalLM, tokens, z: np.ndarray, tol: float = 1e-10) -> AttentionReport:
    """Compare none/append/prepend runs of one sequence (run under float64)."""
    tokens = [int(t) for t in tokens]
    k = len(tokens)
    z_t = Tensor(z)
    base = lm.forward([PromptedSequence(tokens)], record=True)
    app = lm.forward([PromptedSequence(tokens, z_t, "append")], record=True)
    append_invariant = all(
        np.array_equal(sb.data[0, :k], sa.data[0, :k]) for sb, sa in zip(base.states, app.states)
    )

    # final (prompt) position attends over [text; prompt]; check weights and reconstruction
    convex = True
    max_err = 0.0
    max_sum_err = 0.0
    pp = k
    for layer in app.trace:
        att = layer["att"].data[0, :, pp, :]  # (heads, T)
        vals = layer["v"].data[0]  # (heads, T, dh)
        heads = layer["heads"].data[0, :, pp, :]
        w = att[:, : pp + 1]
        if (w < 0).any() or np.abs(att[:, pp + 1 :]).max(initial=0.0) != 0.0:
            convex = False
        sum_err = float(np.abs(w.sum(axis=1) - 1.0).max())
        recon = np.einsum("hj,hjd->hd", w, vals[:, : pp + 1])
        err = float(np.abs(recon - heads).max())
        max_err = max(max_err, err)
        max_sum_err = max(max_sum_err, sum_err)
        if err > tol or sum_err > 1e-12:
            convex = False

    z_g = ad.parameter(z)
    pre = lm.forward([PromptedSequence(tokens, z_g, "prepend")])
    text = np.arange(1, k + 1)
    prepend_changes = any(
        not np.array_equal(sb.data[0, :k], sp.data[0, text]) for sb, sp in zip(base.states[1:], pre.states[1:])
    )
    pre2 = lm.forward([PromptedSequence(tokens, Tensor(2.0 * np.asarray(z)), "prepend")])
    prepend_z_sensitive = any(
        not np.array_equal(s1.data[0, text], s2.data[0, text]) for s1, s2 in zip(pre.states[1:], pre2.states[1:])
    )
    if k > 1:
        ad.backward(lm.loss(pre))
    else:
        ad.backward(pre.states[-1][0, 1].sum())
    gnorm = float(np.linalg.norm(z_g.grad))
    return AttentionReport(append_invariant, prepend_changes, convex, gnorm, prepend_z_sensitive, max_err, max_sum_err)
