"""Flat ``section.key = value`` run configuration, presets, and builders for the typed configs."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .gnn import GnnConfig
from .lm import LmConfig
from .model import ModelConfig
from .synthetic import SynthConfig
from .training import RunConfig, TrainConfig

# every key has a default; presets only override
DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "run.precision": "float32",
    "run.skip_pretrain": False,
    "run.dataset": "synthetic",
    "synth.n_nodes": 100,
    "synth.n_topics": 5,
    "synth.tokens_per_node": 24,
    "synth.p_noise": 0.5,
    "synth.density": 0.15,
    "synth.cross_rate": 0.005,
    "synth.task_rule": "shared_neighbors",
    "synth.shared_m": 2,
    "synth.task_density": 1.0,
    "synth.alphabet_size": 16,
    "synth.d_feat": 32,
    "split.n_train": 100,
    "split.n_val": 20,
    "lm.d_model": 64,
    "lm.n_layers": 4,
    "lm.n_heads": 4,
    "lm.max_seq": 64,
    "lm.ffn_mult": 4,
    "gnn.d_gnn": 64,
    "gnn.k_layers": 2,
    "gnn.n_rel": 2,
    "gnn.activation": "relu",
    "model.prompt_mode": "prepend",
    "model.peft": "lora",
    "model.lora_rank": 4,
    "model.lora_alpha": 0.0,  # 0 = same as rank
    "model.n_prefix": 1,
    "model.prefix_per_layer": True,
    "model.fanouts": (5, 5),
    "model.grl_in_pretrain": False,
    "model.predict_first": False,
    "backbone.epochs": 1,
    "backbone.batch_size": 16,
    "backbone.lr": 3e-3,
    "pretrain.epochs": 4,
    "pretrain.batch_size": 8,
    "pretrain.lr": 1e-3,
    "finetune.epochs": 4,
    "finetune.batch_size": 4,
    "finetune.lr": 1e-3,
    "finetune.tau": 0.5,
    "finetune.fixed_negatives": False,
    "finetune.val_negatives": 100,
    "finetune.val_edges": 0,
    "train.warmup_epochs": 1.0,
    "train.max_grad_norm": 1.0,
    "train.weight_decay": 0.0,
    "eval.n_neg": 100,
    "eval.batch_size": 32,
}

PRESETS: dict[str, dict[str, object]] = {
    "desk-small": {
        "synth.n_nodes": 100, "synth.n_topics": 10, "synth.tokens_per_node": 16, "synth.p_noise": 0.5,
        "synth.density": 0.6, "synth.d_feat": 32,
        "split.n_train": 100, "split.n_val": 20,
        "lm.d_model": 32, "lm.n_layers": 2, "lm.n_heads": 2, "lm.max_seq": 24,
        "gnn.d_gnn": 48, "model.fanouts": (5, 5), "model.n_prefix": 4,
        "backbone.epochs": 1, "pretrain.epochs": 2, "finetune.epochs": 2, "finetune.val_edges": 20,
        "finetune.val_negatives": 50, "eval.n_neg": 50,
    },
    "desk-medium": {
        "synth.n_nodes": 500, "synth.n_topics": 50, "synth.tokens_per_node": 24, "synth.p_noise": 0.9,
        "synth.density": 0.6, "synth.d_feat": 64,
        "split.n_train": 1000, "split.n_val": 200,
        "lm.d_model": 64, "lm.n_layers": 2, "lm.n_heads": 4, "lm.max_seq": 32,
        "gnn.d_gnn": 128, "model.fanouts": (10, 10), "model.n_prefix": 8,
        "backbone.epochs": 0, "pretrain.epochs": 4, "finetune.epochs": 4, "finetune.val_edges": 100,
    },
    # only meaningful for count-params
    "paper-llama": {
        "synth.d_feat": 768, "lm.d_model": 4096, "lm.n_layers": 32, "lm.n_heads": 32, "lm.max_seq": 2048,
        "gnn.d_gnn": 768, "model.lora_rank": 16,
    },
}


class ConfigFileError(ValueError):
    pass


def _coerce(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigFileError(f"unknown config key {key!r}")
    ref = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(ref, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(ref, int):
            return int(raw)
        if isinstance(ref, float):
            return float(raw)
        if isinstance(ref, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigFileError(f"bad value {raw!r} for {key}") from None
    return raw


def parse_lines(lines, origin: str = "<config>") -> dict[str, object]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{origin}:{n}: expected key = value")
        key, _, val = line.partition("=")
        out[key.strip()] = _coerce(key.strip(), val)
    return out


def read_config(path) -> dict[str, object]:
    text = Path(path).read_text()
    return parse_lines(text.splitlines(), str(path))


def resolve(preset: str | None = None, file_values: dict | None = None, cli_values: dict | None = None) -> dict:
    """Defaults, then preset, then command-line values, then the config file (the file has the last word)."""
    if preset is not None and preset not in PRESETS:
        raise ConfigFileError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    cfg = dict(DEFAULTS)
    if preset:
        cfg.update(PRESETS[preset])
    cfg.update(cli_values or {})
    cfg.update(file_values or {})
    return cfg


def format_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, float):
            return repr(v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in sorted(cfg))


# builders


def synth_config(cfg: dict) -> SynthConfig:
    kw = {f.name: cfg[f"synth.{f.name}"] for f in fields(SynthConfig) if f"synth.{f.name}" in cfg}
    return SynthConfig(seed=cfg["run.seed"], **kw)


def model_config(cfg: dict) -> ModelConfig:
    lm = LmConfig(d_model=cfg["lm.d_model"], n_layers=cfg["lm.n_layers"], n_heads=cfg["lm.n_heads"],
                  max_seq=cfg["lm.max_seq"], ffn_mult=cfg["lm.ffn_mult"])
    gnn = GnnConfig(d_feat=cfg["synth.d_feat"], d_gnn=cfg["gnn.d_gnn"], k_layers=cfg["gnn.k_layers"],
                    n_rel=cfg["gnn.n_rel"], d_model=cfg["lm.d_model"], activation=cfg["gnn.activation"])
    mode = cfg["model.prompt_mode"]
    return ModelConfig(lm=lm, gnn=gnn, prompt_mode=mode, peft=cfg["model.peft"], lora_rank=cfg["model.lora_rank"],
                       lora_alpha=cfg["model.lora_alpha"] or None, n_prefix=cfg["model.n_prefix"],
                       prefix_per_layer=cfg["model.prefix_per_layer"], fanouts=tuple(cfg["model.fanouts"]),
                       grl_in_pretrain=cfg["model.grl_in_pretrain"], predict_first=cfg["model.predict_first"])


def train_config(cfg: dict, phase: str) -> TrainConfig:
    kw = dict(phase=phase, batch_size=cfg[f"{phase}.batch_size"], lr=cfg[f"{phase}.lr"],
              epochs=cfg[f"{phase}.epochs"], warmup_epochs=cfg["train.warmup_epochs"],
              max_grad_norm=cfg["train.max_grad_norm"], weight_decay=cfg["train.weight_decay"],
              fanouts=tuple(cfg["model.fanouts"]), seed=cfg["run.seed"], precision=cfg["run.precision"],
              prompt_mode=cfg["model.prompt_mode"])
    if phase == "finetune":
        kw.update(tau=cfg["finetune.tau"], fixed_negatives=cfg["finetune.fixed_negatives"],
                  val_negatives=cfg["finetune.val_negatives"], val_edges=cfg["finetune.val_edges"])
    return TrainConfig(**kw)


def run_config(cfg: dict) -> RunConfig:
    return RunConfig(pretrain=train_config(cfg, "pretrain"), finetune=train_config(cfg, "finetune"),
                     backbone=train_config(cfg, "backbone"), skip_pretrain=cfg["run.skip_pretrain"])
