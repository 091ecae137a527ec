"""LoRA and prefix adapters, plus the frozen/adapter/GNN parameter partition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor
from .params import ParameterStore

LORA_TARGETS = ("q", "k", "v", "o")


@dataclass
class LoraAdapter:
    """Low-rank update ``scale * A @ B.T`` for one frozen projection (A, B: d x r)."""

    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    target: str = "q"
    layer: int = 0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.A.data @ self.B.data.T)


def lora_apply(W: Tensor, adapter: LoraAdapter | None, x: Tensor) -> Tensor:
    """``x @ (W + scale * A @ B.T)`` evaluated in factored form."""
    out = x @ W
    if adapter is None:
        return out
    if adapter.rank >= min(W.shape):
        raise ValueError(f"LoRA rank {adapter.rank} is not low-rank for a {W.shape[0]}x{W.shape[1]} matrix")
    return out + ((x @ adapter.A) @ adapter.B.transpose()) * adapter.scale


def new_lora(d_in: int, d_out: int, rank: int, alpha: float | None, rng, init_std: float = 0.02, dtype=None):
    if rank < 1 or rank >= min(d_in, d_out):
        raise ValueError(f"LoRA rank {rank} is not low-rank for a {d_in}x{d_out} matrix")
    A = rng.normal(0.0, init_std, size=(d_in, rank))
    B = np.zeros((d_out, rank))
    return A, B, float(rank if alpha is None else alpha)


def add_lora(store: ParameterStore, n_layers: int, d_model: int, rank: int, alpha: float | None, rng,
             targets=LORA_TARGETS) -> None:
    for layer in range(n_layers):
        for t in targets:
            A, B, _ = new_lora(d_model, d_model, rank, alpha, rng)
            store.add(f"peft.lora.{layer}.{t}.A", A, "peft")
            store.add(f"peft.lora.{layer}.{t}.B", B, "peft")


def lora_adapters(store: ParameterStore, layer: int, rank: int, alpha: float | None) -> dict[str, LoraAdapter]:
    out = {}
    for t in LORA_TARGETS:
        key = f"peft.lora.{layer}.{t}.A"
        if key in store:
            out[t] = LoraAdapter(store[key], store[f"peft.lora.{layer}.{t}.B"], rank,
                                 float(rank if alpha is None else alpha), t, layer)
    return out


def count_lora_params(n_layers: int, rank: int, d_model: int, n_targets: int = 4) -> dict[str, int]:
    """Exact LoRA size (two d x r matrices per target) next to the single-matrix formula."""
    enumerated = 0
    for _ in range(n_layers):
        for _ in range(n_targets):
            enumerated += d_model * rank  # A
            enumerated += d_model * rank  # B
    return {"enumerated": enumerated, "formula": n_layers * n_targets * rank * d_model}


def add_prefix(store: ParameterStore, n_layers: int, d_model: int, n_prefix: int, per_layer: bool, rng,
               init_std: float = 0.02) -> None:
    if n_prefix < 1:
        raise ValueError("prefix length must be >= 1")
    shape = (n_layers, n_prefix, d_model) if per_layer else (n_prefix, d_model)
    store.add("peft.prefix.P", rng.normal(0.0, init_std, size=shape), "peft")


def prefix_with_graph(P: Tensor, Z: Tensor | None) -> Tensor:
    """``P' = P + Z`` with Z broadcast over prefix rows.

    ``P`` is ``(n_prefix, d)``; ``Z`` is ``(d,)`` or a batch ``(B, d)``, giving ``(B, n_prefix, d)``.
    """
    if Z is None:
        return P
    if Z.shape[-1] != P.shape[-1]:
        raise ShapeError(f"graph prompt width {Z.shape[-1]} != prefix width {P.shape[-1]}")
    if Z.ndim == 1:
        return P + Z.reshape(1, Z.shape[0])
    return P.reshape(1, *P.shape) + Z.reshape(Z.shape[0], 1, Z.shape[1])


@dataclass
class ParameterPartition:
    pre: list[str]
    peft: list[str]
    g: list[str]

    @classmethod
    def of(cls, store: ParameterStore) -> "ParameterPartition":
        p = store.partition()
        return cls(p["pre"], p["peft"], p["g"])

    def check(self, store: ParameterStore) -> None:
        sets = [set(self.pre), set(self.peft), set(self.g)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("partition sets overlap")
        if set().union(*sets) != set(store):
            raise ValueError("partition does not cover every parameter")


PHASE_TRAINABLE = {"backbone": ("pre",), "pretrain": ("g",), "finetune": ("g", "peft")}


def set_phase(store: ParameterStore, phase: str) -> None:
    if phase not in PHASE_TRAINABLE:
        raise ValueError(f"unknown phase {phase!r}")
    store.set_trainable(PHASE_TRAINABLE[phase])


def merged_weight(W: Tensor, adapter: LoraAdapter) -> np.ndarray:
    return W.data + adapter.delta()

