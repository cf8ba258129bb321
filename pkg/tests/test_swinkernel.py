import itertools

import numpy as np
import pytest

from flxqa.errors import ShapeError
from flxqa.swinkernel import (
    MERGE_ORDER,
    PaddingRecord,
    SwinConfig,
    averaging_reduction,
    cyclic_shift,
    mse_fluence_grad,
    mse_fluence_loss,
    patch_merging,
    relative_position_index,
    shifted_window_mask,
    swin_attention,
    window_partition,
    window_reverse,
    windowed_attention,
)


def rand_tensor(rng, max_c=4, max_s=9):
    shape = (int(rng.integers(1, max_c + 1)),) + tuple(int(v) for v in rng.integers(1, max_s + 1, 3))
    return rng.normal(size=shape)


def test_partition_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = rand_tensor(rng)
        window = tuple(int(v) for v in rng.integers(1, 5, 3))
        blocks, rec = window_partition(t, window)
        assert blocks.shape[1] == np.prod(window)
        assert np.array_equal(window_reverse(blocks, rec, t.shape), t)


def test_partition_token_order_matches_loop_oracle():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(2, 4, 6, 3))
    w = (2, 3, 3)
    blocks, _ = window_partition(t, w)
    i = 0
    for a, b, c in itertools.product(range(0, 4, 2), range(0, 6, 3), range(0, 3, 3)):
        tok = [t[:, a + x, b + y, c + z] for x, y, z in itertools.product(range(2), range(3), range(3))]
        assert np.array_equal(blocks[i], np.array(tok))
        i += 1


def test_partition_edge_cases():
    t = np.arange(24.0).reshape(1, 2, 3, 4)
    blocks, rec = window_partition(t, (2, 3, 4))
    assert blocks.shape == (1, 24, 1) and rec.padded_shape == t.shape
    blocks, _ = window_partition(t, (1, 1, 1))
    assert blocks.shape == (24, 1, 1)
    blocks, rec = window_partition(t, (2, 2, 2))
    assert rec.padded_shape == (1, 2, 4, 4)
    assert np.count_nonzero(blocks == 0) == 1 + 8  # one real zero, eight padded tokens


def test_reverse_rejects_bad_record():
    t = np.ones((1, 4, 4, 4))
    blocks, rec = window_partition(t, 2)
    with pytest.raises(ShapeError):
        window_reverse(blocks[:-1], rec)
    bad = PaddingRecord(rec.original_shape, (1, 4, 4, 5), rec.window)
    with pytest.raises(ShapeError):
        window_reverse(blocks, bad)
    with pytest.raises(ShapeError):
        window_reverse(blocks, rec, (1, 4, 4, 3))


def test_cyclic_shift_round_trip_and_periodicity():
    rng = np.random.default_rng(2)
    for _ in range(50):
        t = rand_tensor(rng)
        s = tuple(int(v) for v in rng.integers(-5, 6, 3))
        assert np.array_equal(cyclic_shift(cyclic_shift(t, s), tuple(-x for x in s)), t)
    t = rand_tensor(rng)
    assert np.array_equal(cyclic_shift(t, 0), t)
    assert np.array_equal(cyclic_shift(t, t.shape[1:]), t)
    one = np.zeros((1, 3, 3, 3))
    one[0, 0, 0, 0] = 1
    assert cyclic_shift(one, (1, 2, 0))[0, 1, 2, 0] == 1


def test_relative_position_index_range():
    idx = relative_position_index((2, 3, 4))
    assert idx.shape == (24, 24)
    assert idx.min() == 0 and idx.max() == 3 * 5 * 7 - 1
    assert len(set(np.diag(idx))) == 1


def loop_attention(tokens, cfg, mask=None):
    """Token-by-token reference for one window."""
    n, c = tokens.shape
    hd = cfg.head_dim
    qkv = tokens @ cfg.w_qkv + cfg.b_qkv
    rpi = relative_position_index(cfg.window) if n == np.prod(cfg.window) else None
    out = np.zeros((n, c))
    for h in range(cfg.heads):
        q = qkv[:, h * hd:(h + 1) * hd]
        k = qkv[:, c + h * hd:c + (h + 1) * hd]
        v = qkv[:, 2 * c + h * hd:2 * c + (h + 1) * hd]
        for i in range(n):
            logits = np.array([q[i] @ k[j] / np.sqrt(hd) for j in range(n)])
            if rpi is not None:
                logits += cfg.bias_table[h, rpi[i]]
            if mask is not None:
                logits += mask[i]
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, h * hd:(h + 1) * hd] = sum(w[j] * v[j] for j in range(n))
    return out @ cfg.w_proj + cfg.b_proj


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(3)
    cfg = SwinConfig.random(6, 2, (2, 2, 2), seed=4)
    blocks = rng.normal(size=(3, 8, 6))
    out = windowed_attention(blocks, cfg)
    for i in range(3):
        np.testing.assert_allclose(out[i], loop_attention(blocks[i], cfg), rtol=1e-12, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    for seed in range(10):
        cfg = SwinConfig.random(8, 4, (2, 3, 2), seed=seed, scale=3.0)
        t = rng.normal(size=(8, 5, 7, 3)) * 4
        _, w = windowed_attention(window_partition(t, cfg.window)[0], cfg, return_weights=True)
        assert np.all(np.abs(w.sum(-1) - 1) <= 1e-6)


def test_single_token_window_is_value_projection():
    rng = np.random.default_rng(6)
    cfg = SwinConfig.random(4, 2, (1, 1, 1), seed=1)
    cfg.w_proj = np.eye(4)
    cfg.b_proj = np.zeros(4)
    cfg.bias_table = np.zeros((2, 1))
    x = rng.normal(size=(5, 1, 4))
    v = x @ cfg.w_qkv[:, 8:] + cfg.b_qkv[8:]
    assert np.array_equal(windowed_attention(x, cfg), v)


def test_equal_keys_give_uniform_average():
    rng = np.random.default_rng(7)
    c = 4
    w_qkv = np.hstack([rng.normal(size=(c, c)), np.zeros((c, c)), np.eye(c)])
    b_qkv = np.concatenate([np.zeros(c), rng.normal(size=c), np.zeros(c)])
    cfg = SwinConfig(c, 2, (2, 2, 2), w_qkv=w_qkv, b_qkv=b_qkv)
    # small integers keep the 1/8 weighted sums exact
    x = rng.integers(-20, 20, size=(3, 8, c)).astype(float)
    out, w = windowed_attention(x, cfg, return_weights=True)
    assert np.all(w == 1 / 8)
    assert np.array_equal(out, np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape))


def test_identity_projection_output_inside_value_hull():
    rng = np.random.default_rng(8)
    cfg = SwinConfig(4, 1, (2, 2, 2), bias_table=rng.normal(size=(1, 27)))
    x = rng.normal(size=(4, 8, 4))
    out = windowed_attention(x, cfg)
    lo, hi = x.min(axis=1, keepdims=True), x.max(axis=1, keepdims=True)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def wrap_mask_oracle(padded, original, window, shift):
    """Two tokens may attend iff, on every axis, both or neither wrapped in the
    roll and both or neither are padding."""
    dp, hp, wp = padded
    coords = np.stack(np.meshgrid(*(np.arange(n) for n in padded), indexing="ij"), -1)
    wrapped = coords >= np.array(padded) - np.array(shift)
    src = (coords + np.array(shift)) % np.array(padded)
    is_pad = np.any(src >= np.array(original), axis=-1)
    key = np.concatenate([wrapped, is_pad[..., None]], -1).astype(float)
    t = np.moveaxis(key, -1, 0)
    blocks, _ = window_partition(t, window)
    same = np.all(blocks[:, :, None, :] == blocks[:, None, :, :], axis=-1)
    return np.where(same, 0.0, -np.inf)


@pytest.mark.parametrize("original,window,shift", [
    ((8, 8, 8), (4, 4, 4), (2, 2, 2)),
    ((5, 7, 6), (2, 3, 4), (1, 1, 2)),
    ((6, 6, 6), (3, 3, 3), (0, 1, 0)),
])
def test_shift_mask_matches_wrap_oracle(original, window, shift):
    padded = tuple(n + (-n) % w for n, w in zip(original, window))
    got = shifted_window_mask(padded, original, window, shift)
    assert np.array_equal(got, wrap_mask_oracle(padded, original, window, shift))


def test_unshifted_unpadded_mask_is_open():
    m = shifted_window_mask((4, 4, 4), (4, 4, 4), (2, 2, 2), (0, 0, 0))
    assert np.all(m == 0)


@pytest.mark.parametrize("shifted", [False, True])
def test_swin_attention_matches_loop_pipeline(shifted):
    rng = np.random.default_rng(9)
    cfg = SwinConfig.random(4, 2, (2, 2, 2), seed=2)
    t = rng.normal(size=(4, 3, 5, 4))
    out = swin_attention(t, cfg, shifted=shifted)
    assert out.shape == t.shape
    shift = cfg.shift if shifted else (0, 0, 0)
    padded = np.zeros((4, 4, 6, 4))
    padded[:, :3, :5, :4] = t
    rolled = np.roll(padded, [-s for s in shift], axis=(1, 2, 3))
    mask = wrap_mask_oracle(padded.shape[1:], t.shape[1:], cfg.window, shift)
    expected = np.zeros_like(rolled)
    for i, (a, b, c) in enumerate(itertools.product(range(0, 4, 2), range(0, 6, 2), range(0, 4, 2))):
        win = rolled[:, a:a + 2, b:b + 2, c:c + 2].reshape(4, 8).T
        res = loop_attention(win, cfg, mask[i])
        expected[:, a:a + 2, b:b + 2, c:c + 2] = res.T.reshape(4, 2, 2, 2)
    expected = np.roll(expected, shift, axis=(1, 2, 3))[:, :3, :5, :4]
    np.testing.assert_allclose(out, expected, rtol=1e-11, atol=1e-12)


def test_patch_merging_shapes_and_constant():
    rng = np.random.default_rng(10)
    t = rng.normal(size=(3, 4, 6, 8))
    out = patch_merging(t, rng.normal(size=(5, 24)))
    assert out.shape == (5, 2, 3, 4)
    const = np.full((3, 4, 4, 4), 2.5)
    assert np.allclose(patch_merging(const, averaging_reduction(3)), 2.5, rtol=0, atol=1e-15)
    assert patch_merging(np.ones((1, 3, 3, 3)), averaging_reduction(1)).shape == (1, 2, 2, 2)


def test_patch_merging_provenance():
    c = 2
    t = np.arange(c * 4 * 4 * 4, dtype=float).reshape(c, 4, 4, 4)
    for j, (a, b, cc) in enumerate(MERGE_ORDER):
        for ch in range(c):
            onehot = np.zeros((1, 8 * c))
            onehot[0, j * c + ch] = 1
            out = patch_merging(t, onehot)
            for d, h, w in itertools.product(range(2), repeat=3):
                assert out[0, d, h, w] == t[ch, 2 * d + a, 2 * h + b, 2 * w + cc]


def test_mse_loss_cases():
    rng = np.random.default_rng(11)
    a = rng.random((9, 4, 5))
    assert mse_fluence_loss(a, a) == 0.0
    p = np.zeros((9, 1))
    t = np.zeros((9, 1))
    p[4, 0] = 3
    assert mse_fluence_loss(p, t) == 1.0
    b = rng.random((9, 4, 5))
    assert mse_fluence_loss(a + 7.0, b + 7.0) == pytest.approx(mse_fluence_loss(a, b), rel=1e-12)
    assert mse_fluence_loss(a, b) == mse_fluence_loss(b, a) >= 0
    assert mse_fluence_loss(3 * a, 3 * b) == pytest.approx(9 * mse_fluence_loss(a, b), rel=1e-12)
    with pytest.raises(ShapeError):
        mse_fluence_loss(a, b[:, :3])
    with pytest.raises(ShapeError):
        mse_fluence_loss(a[:8], b[:8])


def test_mse_gradient_finite_difference():
    rng = np.random.default_rng(12)
    p, t = rng.random((9, 3, 4)), rng.random((9, 3, 4))
    g = mse_fluence_grad(p, t)
    for idx in [(0, 0, 0), (4, 1, 2), (8, 2, 3)]:
        h = 1e-6
        up, dn = p.copy(), p.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (mse_fluence_loss(up, t) - mse_fluence_loss(dn, t)) / (2 * h)
        assert fd == pytest.approx(2 * (p[idx] - t[idx]) / p.size, rel=1e-5)
        assert g[idx] == 2 * (p[idx] - t[idx]) / p.size


def test_config_validation():
    with pytest.raises(ShapeError):
        SwinConfig(6, 4)
    with pytest.raises(ShapeError):
        SwinConfig(4, 2, (2, 2, 2), shift=(2, 0, 0))
    with pytest.raises(ShapeError):
        SwinConfig(4, 2, (2, 2, 2), bias_table=np.zeros((2, 8)))
    with pytest.raises(ShapeError):
        windowed_attention(np.zeros((1, 8, 3)), SwinConfig(4, 2, (2, 2, 2)))
