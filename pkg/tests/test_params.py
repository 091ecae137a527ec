import numpy as np
import pytest

from gpeft.params import CheckpointError, ParameterStore, load_checkpoint, read_checkpoint, save_checkpoint


def make_store(dtype=np.float32):
    rng = np.random.default_rng(0)
    s = ParameterStore()
    s.add("lm.w", rng.normal(size=(3, 4)), "pre", dtype=dtype)
    s.add("peft.a", rng.normal(size=(2,)), "peft", dtype=dtype)
    s.add("gnn.w", rng.normal(size=(4, 4)), "g", dtype=dtype)
    return s


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_is_bit_exact(tmp_path, dtype):
    s = make_store(dtype)
    man = save_checkpoint(s, tmp_path / "ck")
    t = make_store(dtype)
    for n in t:
        t[n].data = np.zeros_like(t[n].data)
    load_checkpoint(t, tmp_path / "ck", strict=True)
    for n in s:
        assert t[n].data.dtype == dtype and t[n].data.tobytes() == s[n].data.tobytes()
    assert man["id"] == t.fingerprint()


def test_partial_checkpoint_by_tag(tmp_path):
    s = make_store()
    save_checkpoint(s, tmp_path / "ck", tags=["g", "peft"])
    _, arrays = read_checkpoint(tmp_path / "ck")
    assert sorted(arrays) == ["gnn.w", "peft.a"]
    with pytest.raises(CheckpointError, match="lacks"):
        load_checkpoint(make_store(), tmp_path / "ck", strict=True)


def test_shape_mismatch_rejected(tmp_path):
    s = make_store()
    save_checkpoint(s, tmp_path / "ck")
    other = ParameterStore()
    other.add("lm.w", np.zeros((4, 3)), "pre")
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(other, tmp_path / "ck")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(make_store(), tmp_path / "nope")


def test_duplicate_and_bad_tag():
    s = make_store()
    with pytest.raises(KeyError):
        s.add("lm.w", np.zeros(1), "pre")
    with pytest.raises(ValueError):
        s.add("x", np.zeros(1), "other")


def test_fingerprint_tracks_values():
    s = make_store()
    f = s.fingerprint(["pre"])
    s["gnn.w"].data += 1
    assert s.fingerprint(["pre"]) == f
    s["lm.w"].data += 1
    assert s.fingerprint(["pre"]) != f
