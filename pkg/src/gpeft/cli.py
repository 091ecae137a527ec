"""Command-line entry point: data generation, training phases, evaluation and the oracles.

Exit codes: 0 success, 1 usage/configuration error, 2 oracle failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as C
from .evaluation import evaluate_split, format_table, infer_embeddings, write_embeddings, write_report
from .gnn import count_params, enumerate_params, init_gnn
from .graph import GraphError, observed_graph, read_graph, read_split, split_edges, write_graph, write_split
from .lm import attention_oracle
from .model import GpeftModel
from .params import CheckpointError, ParameterStore, load_checkpoint, save_checkpoint
from .peft import add_lora, count_lora_params, set_phase
from .synthetic import TASK_TYPE, format_stats, generate, stats
from .training import ConfigError, check_run_config, finetune, pretrain, train_backbone, write_log

EXIT_OK, EXIT_USAGE, EXIT_ORACLE, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("generate", "split", "pretrain", "finetune", "eval", "gradcheck", "theoremcheck", "count-params",
            "pipeline")


class UsageError(Exception):
    pass


class OracleFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gpeft", description="Graph-prompted PEFT on a miniature causal LM.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--preset", default="desk-small", help="desk-small | desk-medium | paper-llama")
        sp.add_argument("--config", help="key = value file; its values win over --set/--seed/--precision")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--precision", choices=("float32", "float64"))

    s = sub.add_parser("generate", help="write a synthetic text-rich graph")
    common(s)
    s.add_argument("--out", required=True, help="graph file")
    s.add_argument("--stats", action="store_true", help="print node/edge/token statistics")

    s = sub.add_parser("split", help="split task edges into train/val/test")
    common(s)
    s.add_argument("--graph", required=True)
    s.add_argument("--out", required=True, help="split file")

    for name, hlp in (("pretrain", "backbone warm-up and GNN pre-training"), ("finetune", "contrastive fine-tuning")):
        s = sub.add_parser(name, help=hlp)
        common(s)
        s.add_argument("--graph", required=True)
        s.add_argument("--split", required=True)
        s.add_argument("--checkpoint", action="append", default=[], help="checkpoint dir to load (repeatable)")
        s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("eval", help="infer node embeddings and rank held-out edges")
    common(s)
    s.add_argument("--graph", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--checkpoint", action="append", default=[], help="checkpoint dir to load (repeatable)")
    s.add_argument("--out", required=True)
    s.add_argument("--which", choices=("test", "val"), default="test")

    s = sub.add_parser("gradcheck", help="finite-difference check of every training loss")
    common(s)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--coords", type=int, default=6, help="coordinates checked per tensor")

    s = sub.add_parser("theoremcheck", help="append/prepend attention invariance oracle")
    common(s)
    s.add_argument("--seeds", type=int, default=5)

    s = sub.add_parser("count-params", help="formula vs enumerated parameter counts")
    common(s)

    s = sub.add_parser("pipeline", help="generate, split, pretrain, finetune and eval in one go")
    common(s)
    s.add_argument("--out", required=True)
    return p


def effective_config(args) -> dict:
    cli = {}
    if args.seed is not None:
        cli["run.seed"] = args.seed
    if args.precision is not None:
        cli["run.precision"] = args.precision
    try:
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, _, v = item.partition("=")
            cli.update(C.parse_lines([f"{k} = {v}"], "--set"))
        file_values = C.read_config(args.config) if args.config else None
        return C.resolve(args.preset, file_values, cli)
    except C.ConfigFileError as e:
        raise UsageError(str(e)) from None


@contextmanager
def staged_dir(out):
    """Build outputs in a sibling temp dir; move into place only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out) if out.is_dir() else out.unlink()
    os.replace(tmp, out)


@contextmanager
def staged_file(out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{out.name}.", dir=out.parent)
    os.close(fd)
    try:
        yield Path(tmp)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    os.replace(tmp, out)


def _echo_config(cfg: dict, d: Path) -> None:
    (d / "config.txt").write_text(C.format_config(cfg))


def _build_model(cfg: dict, checkpoints=()) -> GpeftModel:
    model = GpeftModel.build(C.model_config(cfg), cfg["run.seed"], ad.get_dtype())
    for ck in checkpoints:
        load_checkpoint(model.store, ck)
    return model


def _printer(stream=None):
    stream = stream or sys.stdout

    def log(rec):
        print(rec.line(), file=stream, flush=True)

    return log


# commands


def cmd_generate(args, cfg):
    graph, _ = generate(C.synth_config(cfg))
    with staged_file(args.out) as tmp:
        write_graph(graph, tmp)
    if args.stats:
        print(format_stats(stats(graph)))
    return EXIT_OK


def cmd_split(args, cfg):
    graph = read_graph(args.graph)
    sp = split_edges(graph, TASK_TYPE, cfg["split.n_train"], cfg["split.n_val"], cfg["run.seed"])
    with staged_file(args.out) as tmp:
        write_split(sp, tmp)
    print(f"train={len(sp.train)} val={len(sp.val)} test={len(sp.test)}")
    return EXIT_OK


def _do_pretrain(model, graph, split, cfg, out: Path, log):
    rc = C.run_config(cfg)
    check_run_config(model, rc)
    obs = observed_graph(graph, split)
    nodes = range(graph.n_nodes)
    records = []
    if rc.backbone.epochs > 0:
        records += train_backbone(model, obs, nodes, rc.backbone, log)
        save_checkpoint(model.store, out / "backbone")
    if model.uses_prompt and not rc.skip_pretrain and rc.pretrain.epochs > 0:
        records += pretrain(model, obs, nodes, rc.pretrain, log)
    save_checkpoint(model.store, out / "checkpoint")
    write_log(records, out / "metrics.log")
    return records


def _do_finetune(model, graph, split, cfg, out: Path, log):
    rc = C.run_config(cfg)
    check_run_config(model, rc)
    res = finetune(model, split, observed_graph(graph, split), rc.finetune, log)
    save_checkpoint(model.store, out / "checkpoint", tags=["g", "peft"])
    write_log(res.log, out / "metrics.log")
    (out / "frozen.fingerprint").write_text(model.store.fingerprint(["pre"]) + "\n")
    return res


def _do_eval(model, graph, split, cfg, out: Path, which="test", checkpoint_id=""):
    obs = observed_graph(graph, split)
    before = model.lm.forward_count
    emb = infer_embeddings(model, range(graph.n_nodes), obs, cfg["run.seed"], cfg["eval.batch_size"],
                           checkpoint=checkpoint_id)
    forwards = model.lm.forward_count - before
    rep = evaluate_split(split, emb, graph.n_nodes, cfg["eval.n_neg"], cfg["run.seed"], which)
    record = rep.record(dataset=cfg["run.dataset"], seed=cfg["run.seed"], split=which, mode=cfg["model.prompt_mode"],
                        peft=cfg["model.peft"], nodes=len(emb), lm_forwards=forwards)
    write_embeddings(emb, out / "embeddings")
    write_report([record], out)
    print(format_table([record]))
    return record


def cmd_pretrain(args, cfg):
    graph, split = read_graph(args.graph), None
    split = read_split(args.split, graph)
    model = _build_model(cfg, args.checkpoint)
    with staged_dir(args.out) as tmp:
        _echo_config(cfg, tmp)
        _do_pretrain(model, graph, split, cfg, tmp, _printer())
    return EXIT_OK


def cmd_finetune(args, cfg):
    graph = read_graph(args.graph)
    split = read_split(args.split, graph)
    model = _build_model(cfg, args.checkpoint)
    with staged_dir(args.out) as tmp:
        _echo_config(cfg, tmp)
        _do_finetune(model, graph, split, cfg, tmp, _printer())
    return EXIT_OK


def cmd_eval(args, cfg):
    graph = read_graph(args.graph)
    split = read_split(args.split, graph)
    if not args.checkpoint:
        raise UsageError("eval needs at least one --checkpoint")
    model = _build_model(cfg, args.checkpoint)
    ck_id = "+".join(json.loads((Path(c) / "manifest.json").read_text()).get("id", "") for c in args.checkpoint)
    with staged_dir(args.out) as tmp:
        _echo_config(cfg, tmp)
        _do_eval(model, graph, split, cfg, tmp, args.which, ck_id)
    return EXIT_OK


def cmd_pipeline(args, cfg):
    with staged_dir(args.out) as tmp:
        _echo_config(cfg, tmp)
        graph, _ = generate(C.synth_config(cfg))
        write_graph(graph, tmp / "graph.txt")
        print(format_stats(stats(graph)))
        split = split_edges(graph, TASK_TYPE, cfg["split.n_train"], cfg["split.n_val"], cfg["run.seed"])
        write_split(split, tmp / "split.txt")
        model = _build_model(cfg)
        log = _printer()
        for d in ("pretrain", "finetune", "eval"):
            (tmp / d).mkdir()
        _do_pretrain(model, graph, split, cfg, tmp / "pretrain", log)
        _do_finetune(model, graph, split, cfg, tmp / "finetune", log)
        _do_eval(model, graph, split, cfg, tmp / "eval")
    return EXIT_OK


def cmd_count_params(args, cfg):
    mc = C.model_config(cfg)
    gcfg = mc.gnn
    formula = count_params(gcfg)
    store = ParameterStore()
    init_gnn(store, gcfg, np.random.default_rng(0))
    enum = enumerate_params(store)
    lora = count_lora_params(mc.lm.n_layers, mc.lora_rank, mc.lm.d_model)
    lstore = ParameterStore()
    add_lora(lstore, mc.lm.n_layers, mc.lm.d_model, mc.lora_rank, None, np.random.default_rng(0))
    lora_enum = lstore.count()
    rows = [
        ("gnn.formula", formula["formula"]),
        ("gnn.enumerated", enum["enumerated"]),
        ("gnn.bias", enum["bias"]),
        ("gnn.input_projection", enum["input_projection"]),
        ("gnn.total", enum["total"]),
        ("lora.formula", lora["formula"]),
        ("lora.enumerated", lora_enum),
    ]
    for k, v in rows:
        print(f"{k:<22} {v:>14,}")
    ok = formula["formula"] == enum["enumerated"] and lora["enumerated"] == lora_enum
    if lora["formula"] != lora_enum:
        print("note: LoRA formula counts one d x r matrix per target; enumeration (authoritative) counts A and B")
    if not ok:
        raise OracleFailure("formula and enumeration disagree")
    return EXIT_OK


def theorem_reports(cfg: dict, n_seeds: int):
    """Run the append/prepend oracle on ``n_seeds`` random float64 LMs (init std 0.2, random tokens and z)."""
    from .lm import CausalLM, init_lm

    mc = C.model_config(cfg)
    out = []
    with ad.precision("float64"):
        for seed in range(n_seeds):
            rng = np.random.default_rng([cfg["run.seed"], seed])
            store = ParameterStore()
            init_lm(store, mc.lm, rng, std=0.2)
            store.astype(np.float64)
            lm = CausalLM(mc.lm, store)
            k = int(rng.integers(4, mc.lm.max_seq - 2))
            tokens = rng.integers(0, 256, size=k)
            z = rng.normal(0, 1.0, size=mc.lm.d_model)
            out.append(attention_oracle(lm, tokens, z))
    return out


def cmd_theoremcheck(args, cfg):
    failures = 0
    for seed, rep in enumerate(theorem_reports(cfg, args.seeds)):
        ok = rep.ok()
        failures += not ok
        print(f"seed={seed} append_invariant={rep.append_invariant} prepend_changes={rep.prepend_changes} "
              f"convex_mix={rep.append_is_convex_mix} recon_err={rep.max_reconstruction_error:.2e} "
              f"prompt_grad_norm={rep.prompt_grad_norm:.3e} {'ok' if ok else 'FAIL'}")
    if failures:
        raise OracleFailure(f"{failures}/{args.seeds} seeds failed")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .oracles import gradcheck_suite

    results = gradcheck_suite(cfg, range(args.seeds), coords=args.coords)
    bad = 0
    for r in results:
        bad += not r["ok"]
        print(f"seed={r['seed']} loss={r['loss']:<9} precision={r['precision']} max_rel_err={r['max_error']:.3e} "
              f"tol={r['tol']:.0e} {'ok' if r['ok'] else 'FAIL'}")
    if bad:
        raise OracleFailure(f"{bad} gradient checks failed")
    return EXIT_OK


HANDLERS = {
    "generate": cmd_generate, "split": cmd_split, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "theoremcheck": cmd_theoremcheck,
    "count-params": cmd_count_params, "pipeline": cmd_pipeline,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing command; choose from {', '.join(COMMANDS)}")
        cfg = effective_config(args)
        t0 = time.perf_counter()
        with ad.precision(cfg["run.precision"]):
            code = HANDLERS[args.command](args, cfg)
        print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        return code
    except UsageError as e:
        print(f"gpeft: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OracleFailure as e:
        print(f"gpeft: oracle failure: {e}", file=sys.stderr)
        return EXIT_ORACLE
    except (CheckpointError, OSError) as e:
        print(f"gpeft: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, GraphError, ValueError, KeyError) as e:
        print(f"gpeft: error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(dispatch())
