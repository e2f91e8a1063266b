import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dppt.checkpoint import (
    MAGIC, decode_tree, encode_tree, load_checkpoint, read_tree, save_checkpoint, sidecar_path, write_tree,
)
from dppt.errors import ConfigError, FormatError
from dppt.freeze import SqGradAccumulator, accumulate
from dppt.params import Layer, ParamTree, flat_norm, pairwise_sum, sum_grads


def _tree():
    rng = np.random.default_rng(0)
    return ParamTree([
        Layer("a.w", rng.standard_normal((3, 4))),
        Layer("a.b", rng.standard_normal(4), frozen=True),
        Layer("scalar", np.array(2.5)),
        Layer("t", rng.standard_normal((2, 1, 3))),
    ])


def test_tree_bookkeeping():
    t = _tree()
    assert t.names == ["a.w", "a.b", "scalar", "t"]
    assert t.frozen_names == ["a.b"]
    assert t.num_params == 12 + 4 + 1 + 6
    assert t.num_trainable == 12 + 1 + 6
    assert t.dims(trainable_only=True) == {"a.w": 12, "scalar": 1, "t": 6}


def test_duplicate_names_rejected():
    with pytest.raises(ConfigError):
        ParamTree([Layer("x", np.zeros(1)), Layer("x", np.zeros(2))])


def test_set_frozen_returns_copy():
    t = _tree()
    u = t.set_frozen(["a.w"])
    assert u["a.w"].frozen and not t["a.w"].frozen
    with pytest.raises(ConfigError):
        t.set_frozen(["nope"])


def test_flat_norm():
    g = {"a": np.array([3.0]), "b": np.array([[4.0, 0.0]])}
    assert flat_norm(g) == 5.0


@settings(max_examples=50)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.randoms())
def test_pairwise_sum_permutation_stable(xs, rnd):
    arr = [np.array([x]) for x in xs]
    ys = list(arr)
    rnd.shuffle(ys)
    a, b = pairwise_sum(arr).item(), pairwise_sum(ys).item()
    scale = sum(abs(x) for x in xs) + 1e-300
    assert abs(a - b) <= 1e-14 * scale
    assert abs(a - sum(xs)) <= 1e-13 * scale


def test_sum_grads_keys():
    s = sum_grads([{"a": np.ones(2), "b": np.ones(1)}] * 3)
    np.testing.assert_array_equal(s["a"], [3.0, 3.0])


def test_round_trip_bit_exact(tmp_path):
    t = _tree()
    t["a.w"].value[0, 0] = -0.0
    t["t"].value[0, 0, 0] = np.nextafter(1.0, 2.0)
    path = tmp_path / "x.dppt"
    write_tree(path, t)
    back = read_tree(path)
    assert back.names == t.names
    assert [l.frozen for l in back] == [l.frozen for l in t]
    for a, b in zip(t, back):
        assert a.value.shape == b.value.shape
        assert a.value.tobytes() == b.value.tobytes()


def test_save_load_save_byte_identical(tmp_path):
    t = _tree()
    acc = SqGradAccumulator.zeros_like(t)
    accumulate(acc, {n: np.full(t[n].value.shape, 0.5) for n in t.trainable_names})
    p1, p2 = tmp_path / "1.dppt", tmp_path / "2.dppt"
    save_checkpoint(p1, t, acc)
    tree, acc2 = load_checkpoint(p1)
    save_checkpoint(p2, tree, acc2)
    assert p1.read_bytes() == p2.read_bytes()
    assert sidecar_path(p1).read_bytes() == sidecar_path(p2).read_bytes()
    assert acc2.steps_seen == 1
    np.testing.assert_array_equal(acc2.u["a.w"], np.full((3, 4), 0.25))


def test_save_without_accumulator_drops_stale_sidecar(tmp_path):
    t = _tree()
    p = tmp_path / "x.dppt"
    save_checkpoint(p, t, SqGradAccumulator.zeros_like(t))
    save_checkpoint(p, t)
    assert load_checkpoint(p)[1] is None


def test_header_layout():
    data = encode_tree(ParamTree([Layer("ab", np.array([1.0]), frozen=True)]))
    assert data[:4] == MAGIC
    assert data[4:12] == b"\x01\x00\x00\x00\x01\x00\x00\x00"
    assert data[12:14] == b"\x02\x00" and data[14:16] == b"ab"
    assert data[16:18] == b"\x01\x01"
    assert len(data) == 18 + 8 + 8


@pytest.mark.parametrize("mutate", [
    lambda d: b"XPPT" + d[4:],
    lambda d: d[:4] + b"\x02" + d[5:],
    lambda d: d[:-3],
    lambda d: d + b"\x00",
])
def test_corrupt_checkpoint_rejected(mutate):
    with pytest.raises(FormatError):
        decode_tree(mutate(encode_tree(_tree())))
