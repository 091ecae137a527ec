import numpy as np
import pytest

from gpeft import autodiff as ad
from gpeft.autodiff import Tensor
from gpeft.params import ParameterStore
from gpeft.peft import (PHASE_TRAINABLE, LoraAdapter, ParameterPartition, add_lora, count_lora_params, lora_apply,
                        merged_weight, new_lora, prefix_with_graph, set_phase)


@pytest.fixture(autouse=True)
def f64():
    with ad.precision("float64"):
        yield


def adapter(d=6, r=2, seed=0, b_zero=True):
    A, B, alpha = new_lora(d, d, r, None, np.random.default_rng(seed))
    if not b_zero:
        B = np.random.default_rng(seed + 1).normal(size=B.shape)
    return LoraAdapter(Tensor(A), Tensor(B), r, alpha)


def test_fresh_adapter_is_identity():
    rng = np.random.default_rng(0)
    W, x = Tensor(rng.normal(size=(6, 6))), Tensor(rng.normal(size=(3, 6)))
    assert np.array_equal(lora_apply(W, adapter(), x).data, (x @ W).data)


def test_factored_equals_merged():
    rng = np.random.default_rng(1)
    W, x = Tensor(rng.normal(size=(6, 6))), rng.normal(size=(3, 6))
    ad_ = adapter(b_zero=False)
    np.testing.assert_allclose(lora_apply(W, ad_, Tensor(x)).data, x @ merged_weight(W, ad_), atol=1e-12)


@pytest.mark.parametrize("r", [0, 6, 7])
def test_rank_must_be_low(r):
    with pytest.raises(ValueError, match="rank"):
        new_lora(6, 6, r, None, np.random.default_rng(0))


def test_lora_count_at_full_scale():
    c = count_lora_params(32, 16, 4096)
    assert c["enumerated"] == 16_777_216 and c["formula"] == 8_388_608
    store = ParameterStore()
    add_lora(store, 2, 8, 2, None, np.random.default_rng(0))
    assert store.count() == count_lora_params(2, 2, 8)["enumerated"]


def test_prefix_broadcast():
    P = Tensor(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(prefix_with_graph(P, Tensor(np.array([1.0, 10.0]))).data, P.data + [1.0, 10.0])
    batch = prefix_with_graph(P, Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))).data
    assert batch.shape == (2, 3, 2) and np.array_equal(batch[1], P.data + 1.0)
    with pytest.raises(ad.ShapeError):
        prefix_with_graph(P, Tensor(np.zeros(3)))


def test_phases_select_partitions():
    store = ParameterStore()
    store.add("lm.w", np.zeros(2), "pre")
    store.add("peft.a", np.zeros(2), "peft")
    store.add("gnn.w", np.zeros(2), "g")
    ParameterPartition.of(store).check(store)
    for phase, tags in PHASE_TRAINABLE.items():
        set_phase(store, phase)
        assert sorted(store.tag(n) for n in store.trainable_names()) == sorted(tags)
    with pytest.raises(ValueError):
        set_phase(store, "everything")


def test_partition_overlap_detected():
    store = ParameterStore()
    store.add("x", np.zeros(1), "pre")
    with pytest.raises(ValueError, match="overlap"):
        ParameterPartition(["x"], ["x"], []).check(store)
    with pytest.raises(ValueError, match="cover"):
        ParameterPartition([], [], []).check(store)
