import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpeft import autodiff as ad
from gpeft import config as C
from gpeft.autodiff import Tensor
from gpeft.graph import observed_graph, split_edges
from gpeft.model import GpeftModel
from gpeft.synthetic import TASK_TYPE, generate
from gpeft.training import (AdamW, ConfigError, EpochRecord, TrainConfig, check_run_config, clip_grad_norm,
                            contrastive_loss, finetune, lr_at, parse_log_line, pretrain, run)
from helpers import small_cfg


def test_contrastive_zero_when_aligned_and_opposite():
    v = np.array([1.0, 2.0, 0.5])
    assert contrastive_loss(Tensor(v), Tensor(3 * v), Tensor(-v)).item() == pytest.approx(0.0, abs=1e-7)


def test_contrastive_orthogonal_positive_identical_negative():
    with ad.precision("float64"):
        loss = contrastive_loss(Tensor([1.0, 0.0]), Tensor([0.0, 2.0]), Tensor([5.0, 0.0]), tau=0.5)
    assert loss.item() == pytest.approx(1.25, abs=1e-12)


def test_contrastive_zero_norm_names_node():
    with pytest.raises(ValueError, match="node 7"):
        contrastive_loss(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2))),
                         ids=[[3], [7], [9]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.95))
def test_contrastive_loss_is_bounded(seed, tau):
    rng = np.random.default_rng(seed)
    vs = [Tensor(rng.normal(size=(3, 4))) for _ in range(3)]
    with ad.precision("float64"):
        loss = contrastive_loss(*vs, tau=tau).item()
    assert 0.0 <= loss <= 4.0 + tau**2 + 1e-9


@pytest.mark.parametrize("tau", [0.0, 2.0, -1.0])
def test_margin_outside_range_rejected(tau):
    with pytest.raises(ConfigError, match="tau"):
        TrainConfig(tau=tau)


def test_clip_caps_global_norm():
    rng = np.random.default_rng(0)
    ps = [ad.parameter(np.zeros(s)) for s in (3, (2, 2))]
    for p in ps:
        p.grad = rng.normal(size=p.shape) * 50
    before = clip_grad_norm(ps, 1.0)
    assert before > 1.0 and ad.global_grad_norm(ps) <= 1.0 + 1e-9
    small = [ad.parameter(np.zeros(2))]
    small[0].grad = np.array([0.3, 0.4])
    assert clip_grad_norm(small, 1.0) == pytest.approx(0.5)
    assert np.array_equal(small[0].grad, [0.3, 0.4])


def test_lr_warmup_then_constant():
    lrs = [lr_at(s, 10, 1e-3, 1.0) for s in range(25)]
    assert lrs[0] == pytest.approx(1e-4) and lrs[9] == pytest.approx(1e-3)
    assert all(a <= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == 1e-3
    assert lr_at(0, 10, 1e-3, 0.0) == 1e-3


def test_adamw_zero_lr_is_a_no_op():
    p = ad.parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, 0.5])
    opt = AdamW([p], weight_decay=0.1)
    opt.step(0.0)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_moves_by_lr():
    p = ad.parameter(np.array([1.0, -2.0]))
    p.grad = np.array([3.0, -0.01])
    AdamW([p]).step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-5)


def test_log_line_round_trip():
    rec = EpochRecord("finetune", 3, 0.125, 0.5, 0.75, wall=1.5)
    parsed = parse_log_line(rec.line())
    assert parsed == {"phase": "finetune", "epoch": 3, "loss": 0.125, "val_hit1": 0.5, "val_mrr": 0.75, "wall": 1.5}
    assert "wall" not in rec.line(wall=False)


@pytest.fixture(scope="module")
def setup():
    cfg = small_cfg()
    graph, _ = generate(C.synth_config(cfg))
    split = split_edges(graph, TASK_TYPE, cfg["split.n_train"], cfg["split.n_val"], 0)
    return cfg, graph, split, observed_graph(graph, split)


def fresh(cfg, **over):
    cfg = dict(cfg, **over)
    return cfg, GpeftModel.build(C.model_config(cfg), cfg["run.seed"], np.float32)


def test_pretrain_touches_only_the_gnn(setup):
    cfg, graph, split, obs = setup
    cfg, model = fresh(cfg)
    before = {n: model.store[n].data.copy() for n in model.store}
    tc = C.train_config(dict(cfg, **{"pretrain.epochs": 1}), "pretrain")
    pretrain(model, obs, range(20), tc)
    for n in model.store:
        if model.store.tag(n) != "g":
            assert np.array_equal(before[n], model.store[n].data), n
    assert any(not np.array_equal(before[n], model.store[n].data) for n in model.store.names(["g"]))


def test_finetune_keeps_backbone_frozen_and_loss_falls(setup):
    cfg, graph, split, obs = setup
    cfg, model = fresh(cfg)
    fp = model.store.fingerprint(["pre"])
    tc = C.train_config(dict(cfg, **{"finetune.epochs": 3}), "finetune")
    res = finetune(model, split, obs, tc)
    assert model.store.fingerprint(["pre"]) == fp
    losses = res.losses("finetune")
    assert losses[-1] < losses[0]


def test_training_log_is_deterministic(setup):
    cfg, graph, split, _ = setup
    lines = []
    for _ in range(2):
        c, model = fresh(cfg, **{"pretrain.epochs": 1, "finetune.epochs": 1, "backbone.epochs": 1})
        res = run(model, graph, split, C.run_config(c))
        lines.append([r.line(wall=False) for r in res.log])
    assert lines[0] == lines[1] and len(lines[0]) == 3


def test_append_mode_cannot_pretrain(setup):
    cfg, *_ = setup
    c, model = fresh(cfg, **{"model.prompt_mode": "append"})
    with pytest.raises(ConfigError, match="append"):
        check_run_config(model, C.run_config(c))
    check_run_config(model, C.run_config(dict(c, **{"run.skip_pretrain": True})))


def test_fanout_mismatch_rejected(setup):
    cfg, *_ = setup
    c, model = fresh(cfg)
    with pytest.raises(ConfigError, match="fanouts"):
        check_run_config(model, C.run_config(dict(c, **{"model.fanouts": (3, 3)})))
