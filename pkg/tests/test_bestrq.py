import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dppt.bestrq import (
    DataSpec, MaskSpec, ModelDims, ProbeSpec, apply_mask, finetune_probe, init_encoder, make_batch,
    make_codebook, make_example, quantize_targets, ssl_loss, stream,
)
from dppt.errors import ConfigError, ShapeError


def brute_nearest(x, cb):
    out = []
    for frame in x.reshape(-1, x.shape[-1]):
        p = frame @ cb.projection
        p = p / np.linalg.norm(p)
        d = [sum((p[c] - e[c]) ** 2 for c in range(len(e))) for e in cb.entries]
        out.append(min(range(len(d)), key=lambda k: (d[k], k)))
    return np.array(out).reshape(x.shape[:-1])


def test_quantize_matches_exhaustive_search():
    cb = make_codebook(5, 3, 8, seed=1)
    x = np.random.default_rng(0).standard_normal((2, 4, 5))
    np.testing.assert_array_equal(quantize_targets(x, cb), brute_nearest(x, cb))


def test_codebook_entry_preimage_maps_to_itself():
    cb = make_codebook(8, 4, 16, seed=2)
    pre = np.linalg.pinv(cb.projection)  # [D_code, D_feat], projection has full column rank
    x = (cb.entries @ pre)[None]
    np.testing.assert_array_equal(quantize_targets(x, cb)[0], np.arange(16))


def test_codebook_is_frozen_and_normalised():
    cb = make_codebook(8, 4, 16, seed=3)
    np.testing.assert_allclose(np.linalg.norm(cb.entries, axis=1), 1.0, rtol=1e-12)
    with pytest.raises(ValueError):
        cb.entries[0, 0] = 1.0
    again = make_codebook(8, 4, 16, seed=3)
    assert np.array_equal(cb.projection, again.projection)


def test_quantize_dim_mismatch():
    with pytest.raises(ShapeError):
        quantize_targets(np.zeros((1, 2, 3)), make_codebook(4, 2, 3, 0))


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(0.01, 0.9), st.integers(1, 4), st.sampled_from(["noise", "zero"]))
def test_mask_properties(seed, prob, span, fill):
    x = np.random.default_rng(seed).standard_normal((3, 10, 2)) + 100.0
    spec = MaskSpec(prob, span, fill)
    out1, m1 = apply_mask(x, spec, stream(seed, 9))
    out2, m2 = apply_mask(x, spec, stream(seed, 9))
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(out1, out2)
    assert np.all(m1.sum(axis=1) >= span)  # at least one full span per example
    np.testing.assert_array_equal(out1[~m1], x[~m1])
    if fill == "zero":
        assert np.all(out1[m1] == 0)
    else:
        assert np.all(np.abs(out1[m1]) < 50)  # fresh noise, not the shifted input
    # every masked run is made of whole spans
    for row in m1:
        runs = np.diff(np.flatnonzero(np.diff(np.r_[0, row.astype(int), 0])))[::2]
        assert np.all(runs >= span)


def test_mask_needs_frames():
    with pytest.raises(ConfigError):
        apply_mask(np.zeros((1, 2, 1)), MaskSpec(0.5, 2), stream(0))


def test_examples_are_deterministic_and_split_apart():
    spec = DataSpec(n_examples=10, frames=16)
    a, la = make_example(spec, 3)
    b, lb = make_example(spec, 3)
    c, _ = make_example(spec, 3, split="probe")
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(la, lb)
    assert not np.array_equal(a, c)
    assert la.min() >= 0 and la.max() < spec.n_states


def test_batch_order_independent():
    spec = DataSpec()
    b1 = make_batch(spec, [4, 1])
    b2 = make_batch(spec, [1, 4])
    np.testing.assert_array_equal(b1.features[0], b2.features[1])


def test_states_are_sticky():
    spec = DataSpec(frames=400, stay_prob=0.95)
    _, labels = make_example(spec, 0)
    switch = np.mean(labels[1:] != labels[:-1])
    assert switch < 0.15


def test_default_model_size():
    tree = init_encoder(ModelDims(), 0)
    assert 40_000 <= tree.num_params <= 60_000


def test_untrained_loss_near_chance():
    dims = ModelDims()
    spec = DataSpec()
    cb = make_codebook(dims.d_feat, dims.code_dim, dims.codebook_size, 0)
    loss = ssl_loss(init_encoder(dims, 0), make_batch(spec, range(8)), cb, MaskSpec(), stream(0), dims)
    assert loss == pytest.approx(math.log(dims.codebook_size), abs=0.15)


def test_probe_learns_labels_not_noise():
    dims = ModelDims(hidden=16, depth=1)
    data = DataSpec(frames=16)
    tree = init_encoder(dims, 0)
    real = finetune_probe(tree, data, dims, ProbeSpec(n_train=8, n_test=16, steps=100))
    shuffled = finetune_probe(tree, data, dims, ProbeSpec(n_train=8, n_test=16, steps=100, shuffle_labels=True))
    assert real.accuracy > shuffled.accuracy + 0.1
    assert real.loss < shuffled.loss


def test_probe_with_encoder_finetune_runs():
    dims = ModelDims(hidden=8, depth=1)
    res = finetune_probe(init_encoder(dims, 0), DataSpec(frames=8), dims,
                         ProbeSpec(n_train=2, n_test=2, steps=3, finetune_encoder=True))
    assert 0 <= res.accuracy <= 1 and math.isfinite(res.loss)
