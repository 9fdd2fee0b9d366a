import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthsep.ops import (
    SAME,
    VALID,
    BatchNormParams,
    ConvConfig,
    avgpool_global,
    batchnorm_fwd,
    conv2d_depthwise_ref,
    conv2d_pointwise_ref,
    conv2d_std_ref,
    conv_out_size,
    depthwise_separable_ref,
    fully_connected,
    relu,
    same_pad,
    softmax,
)
from depthsep.tensor import ShapeError


def conv_oracle(x, kernel, stride, padding):
    """Direct loop-nest evaluation, written independently of the engine.

    Walks every output element and sums kernel taps one at a time; the
    reference ops are validated against this before anything else trusts them.
    """
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    assert cin == kcin
    if padding == SAME:
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0) // 2
        pw = max((ow - 1) * stride + kw - w, 0) // 2
    else:
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        ph = pw = 0
    out = np.zeros((n, oh, ow, cout), dtype=np.float64)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for co in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            si = i * stride + di - ph
                            sj = j * stride + dj - pw
                            if 0 <= si < h and 0 <= sj < w:
                                for ci in range(cin):
                                    acc += float(x[b, si, sj, ci]) * float(kernel[di, dj, ci, co])
                    out[b, i, j, co] = acc
    return out.astype(np.float32)


def rand(shape, seed=0, scale=1.0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return (rng.normal(0.0, scale, size=shape)).astype(np.float32)


# --- standard convolution ----------------------------------------------------


def test_scalar_conv():
    x = np.full((1, 1, 1, 1), 5.0, dtype=np.float32)
    k = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
    out = conv2d_std_ref(x, k, ConvConfig(stride=1))
    assert out.item() == 10.0


def test_all_ones_same_padding_tap_counts():
    x = np.ones((1, 3, 3, 1), dtype=np.float32)
    k = np.ones((3, 3, 1, 1), dtype=np.float32)
    out = conv2d_std_ref(x, k, ConvConfig(stride=1))[0, :, :, 0]
    assert out[1, 1] == 9.0
    for corner in (out[0, 0], out[0, 2], out[2, 0], out[2, 2]):
        assert corner == 4.0


def test_std_conv_matches_oracle_fixed_case():
    x = rand((1, 5, 5, 3), seed=1)
    k = rand((3, 3, 3, 4), seed=2)
    got = conv2d_std_ref(x, k, ConvConfig(stride=1))
    want = conv_oracle(x, k, 1, SAME)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(3, 7),
    cin=st.integers(1, 3),
    cout=st.integers(1, 4),
    k=st.sampled_from([1, 3]),
    stride=st.sampled_from([1, 2]),
    padding=st.sampled_from([SAME, VALID]),
    seed=st.integers(0, 2**31),
)
def test_std_conv_matches_oracle(h, cin, cout, k, stride, padding, seed):
    x = rand((1, h, h, cin), seed=seed)
    kern = rand((k, k, cin, cout), seed=seed + 1)
    got = conv2d_std_ref(x, kern, ConvConfig(stride=stride, padding=padding))
    want = conv_oracle(x, kern, stride, padding)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)


def test_channel_mismatch_rejected():
    x = rand((1, 4, 4, 3))
    k = rand((3, 3, 2, 4))
    with pytest.raises(ShapeError):
        conv2d_std_ref(x, k, ConvConfig(stride=1))


# --- shape law ----------------------------------------------------------------


@given(in_size=st.integers(1, 64), k=st.sampled_from([1, 3, 5]), stride=st.sampled_from([1, 2]))
def test_same_out_size_is_ceil(in_size, k, stride):
    cfg = ConvConfig(stride=stride)
    assert conv_out_size(in_size, k, cfg) == math.ceil(in_size / stride)


def test_same_pad_puts_extra_on_the_trailing_edge():
    before, after = same_pad(224, 3, 2)
    assert (before, after) == (0, 1)
    before, after = same_pad(5, 3, 1)
    assert (before, after) == (1, 1)


# --- depthwise ----------------------------------------------------------------


def test_depthwise_per_channel_scaling():
    x = rand((1, 4, 4, 2), seed=3)
    k = np.zeros((1, 1, 2), dtype=np.float32)
    k[0, 0] = [2.0, 3.0]
    out = conv2d_depthwise_ref(x, k, ConvConfig(stride=1))
    np.testing.assert_allclose(out[..., 0], 2.0 * x[..., 0], rtol=1e-6)
    np.testing.assert_allclose(out[..., 1], 3.0 * x[..., 1], rtol=1e-6)


def test_depthwise_zero_kernel():
    x = rand((1, 5, 5, 3))
    k = np.zeros((3, 3, 3), dtype=np.float32)
    assert np.all(conv2d_depthwise_ref(x, k, ConvConfig(stride=1)) == 0.0)


@settings(max_examples=20, deadline=None)
@given(
    h=st.integers(3, 6),
    ch=st.integers(1, 4),
    stride=st.sampled_from([1, 2]),
    seed=st.integers(0, 2**31),
)
def test_depthwise_equals_block_diagonal_std(h, ch, stride, seed):
    x = rand((1, h, h, ch), seed=seed)
    kd = rand((3, 3, ch), seed=seed + 1)
    # K[i,j,m,n] = Kd[i,j,m] if m == n else 0
    kstd = np.zeros((3, 3, ch, ch), dtype=np.float32)
    for m in range(ch):
        kstd[:, :, m, m] = kd[:, :, m]
    cfg = ConvConfig(stride=stride)
    got = conv2d_depthwise_ref(x, kd, cfg)
    want = conv2d_std_ref(x, kstd, cfg)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)


def test_depthwise_channel_isolation():
    x = rand((1, 5, 5, 3), seed=4)
    k = rand((3, 3, 3), seed=5)
    cfg = ConvConfig(stride=1)
    base = conv2d_depthwise_ref(x, k, cfg)
    bumped = x.copy()
    bumped[..., 1] += 1.0
    out = conv2d_depthwise_ref(bumped, k, cfg)
    np.testing.assert_array_equal(out[..., 0], base[..., 0])
    np.testing.assert_array_equal(out[..., 2], base[..., 2])
    assert not np.array_equal(out[..., 1], base[..., 1])


def test_depthwise_stride2_halves_spatial_dims():
    x = rand((1, 14, 14, 2))
    k = rand((3, 3, 2))
    out = conv2d_depthwise_ref(x, k, ConvConfig(stride=2))
    assert out.shape == (1, 7, 7, 2)


# --- pointwise ------------------------------------------------------------


def test_pointwise_identity_kernel():
    x = rand((1, 3, 3, 4), seed=6)
    k = np.eye(4, dtype=np.float32).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(conv2d_pointwise_ref(x, k), x)


def test_pointwise_channel_sum():
    x = rand((1, 3, 3, 2), seed=7)
    k = np.ones((1, 1, 2, 1), dtype=np.float32)
    out = conv2d_pointwise_ref(x, k)
    np.testing.assert_allclose(out[..., 0], x[..., 0] + x[..., 1], rtol=1e-6)


def test_pointwise_equals_std_path():
    x = rand((2, 4, 4, 3), seed=8)
    k = rand((1, 1, 3, 5), seed=9)
    got = conv2d_pointwise_ref(x, k)
    want = conv2d_std_ref(x, k, ConvConfig(stride=1))
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)


def test_pointwise_rejects_spatial_kernel():
    with pytest.raises(ShapeError):
        conv2d_pointwise_ref(rand((1, 4, 4, 3)), rand((3, 3, 3, 4)))


# --- factorization equivalence --------------------------------------------


@settings(max_examples=20, deadline=None)
@given(
    h=st.integers(3, 6),
    m=st.integers(1, 4),
    n=st.integers(1, 4),
    seed=st.integers(0, 2**31),
)
def test_rank_factored_kernel_equivalence(h, m, n, seed):
    # dw then pw == std conv with K[i,j,a,b] = Kd[i,j,a] * P[a,b]
    x = rand((1, h, h, m), seed=seed)
    kd = rand((3, 3, m), seed=seed + 1)
    kp = rand((1, 1, m, n), seed=seed + 2)
    cfg = ConvConfig(stride=1)
    sep = conv2d_pointwise_ref(conv2d_depthwise_ref(x, kd, cfg), kp)
    kstd = (kd[:, :, :, None] * kp[0, 0][None, None, :, :]).astype(np.float32)
    std = conv2d_std_ref(x, kstd, cfg)
    np.testing.assert_allclose(sep, std, rtol=1e-5, atol=1e-5)


# --- batchnorm -------------------------------------------------------------


def test_batchnorm_identity_params():
    x = rand((2, 3, 3, 4), seed=10)
    p = BatchNormParams.identity(4)
    p = BatchNormParams(p.gamma, p.beta, p.running_mean, p.running_var, epsilon=0.0)
    np.testing.assert_array_equal(batchnorm_fwd(x, p, training=False), x)


def test_batchnorm_constant_channel_gives_beta():
    x = np.full((2, 4, 4, 3), 7.5, dtype=np.float32)
    base = BatchNormParams.identity(3)
    p = BatchNormParams(base.gamma, np.full(3, 0.25, np.float32), base.running_mean, base.running_var)
    y, mean, var = batchnorm_fwd(x, p, training=True)
    np.testing.assert_allclose(y, 0.25, atol=1e-6)
    np.testing.assert_allclose(mean, 7.5, rtol=1e-6)
    np.testing.assert_allclose(var, 0.0, atol=1e-6)


def test_batchnorm_train_matches_direct_stats():
    x = rand((3, 4, 4, 5), seed=11)
    g = rand((5,), seed=12).astype(np.float32)
    b = rand((5,), seed=13).astype(np.float32)
    p = BatchNormParams(g, b, np.zeros(5, np.float32), np.ones(5, np.float32), epsilon=1e-3)
    y, mean, var = batchnorm_fwd(x, p, training=True)
    want_mean = x.mean(axis=(0, 1, 2))
    want_var = x.var(axis=(0, 1, 2))  # biased, divide by count
    np.testing.assert_allclose(mean, want_mean, rtol=1e-5)
    np.testing.assert_allclose(var, want_var, rtol=1e-5)
    want = g * (x - want_mean) / np.sqrt(want_var + 1e-3) + b
    np.testing.assert_allclose(y, want, rtol=1e-4, atol=1e-5)


def test_batchnorm_infer_uses_running_stats():
    x = rand((2, 2, 2, 2), seed=14)
    p = BatchNormParams(
        np.array([2.0, 1.0], np.float32),
        np.array([0.0, 1.0], np.float32),
        np.array([0.5, -0.5], np.float32),
        np.array([4.0, 1.0], np.float32),
        epsilon=0.0,
    )
    y = batchnorm_fwd(x, p, training=False)
    np.testing.assert_allclose(y[..., 0], 2.0 * (x[..., 0] - 0.5) / 2.0, rtol=1e-5)
    np.testing.assert_allclose(y[..., 1], (x[..., 1] + 0.5) + 1.0, rtol=1e-5)


# --- relu / pool / fc / softmax --------------------------------------------


def test_relu_basic_and_idempotent():
    x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
    np.testing.assert_array_equal(relu(x), [0.0, 0.0, 2.0])
    y = rand((2, 3, 3, 2), seed=15)
    np.testing.assert_array_equal(relu(relu(y)), relu(y))


def test_avgpool_constant_map():
    x = np.full((1, 7, 7, 3), 2.5, dtype=np.float32)
    out = avgpool_global(x)
    assert out.shape == (1, 1, 1, 3)
    np.testing.assert_allclose(out, 2.5, rtol=1e-6)


def test_fully_connected_matches_matmul():
    x = rand((2, 1, 1, 6), seed=16)
    w = rand((6, 4), seed=17)
    b = rand((4,), seed=18)
    out = fully_connected(x, w, b)
    want = x.reshape(2, 6) @ w + b
    np.testing.assert_allclose(out, want, rtol=1e-5)


@given(st.integers(0, 2**31), st.integers(2, 12))
def test_softmax_rows_sum_to_one(seed, k):
    logits = rand((4, k), seed=seed, scale=3.0)
    p = softmax(logits)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(p >= 0.0)


def test_softmax_shift_invariance_and_stability():
    logits = rand((3, 5), seed=19, scale=2.0)
    # shift kept small so f32 rounding of (logits + shift) stays inside the band
    np.testing.assert_allclose(softmax(logits), softmax(logits + 4.0), atol=1e-6)
    huge = np.array([[1000.0, 0.0, -1000.0]], dtype=np.float32)
    p = softmax(huge)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p[0, 0], 1.0, atol=1e-6)


# --- separable block --------------------------------------------------------


def test_separable_with_inert_bn_is_plain_composition():
    x = np.abs(rand((1, 6, 6, 3), seed=20))
    kd = np.abs(rand((3, 3, 3), seed=21))
    kp = np.abs(rand((1, 1, 3, 4), seed=22))
    cfg = ConvConfig(stride=1)
    inert_a = BatchNormParams.identity(3)
    inert_a = BatchNormParams(inert_a.gamma, inert_a.beta, inert_a.running_mean, inert_a.running_var, 0.0)
    inert_b = BatchNormParams.identity(4)
    inert_b = BatchNormParams(inert_b.gamma, inert_b.beta, inert_b.running_mean, inert_b.running_var, 0.0)
    got = depthwise_separable_ref(x, kd, kp, cfg, inert_a, inert_b)
    want = conv2d_pointwise_ref(conv2d_depthwise_ref(x, kd, cfg), kp)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)


def test_separable_stride2_shape():
    x = rand((1, 14, 14, 4), seed=23)
    kd = rand((3, 3, 4), seed=24)
    kp = rand((1, 1, 4, 8), seed=25)
    out = depthwise_separable_ref(
        x, kd, kp, ConvConfig(stride=2), BatchNormParams.identity(4), BatchNormParams.identity(8)
    )
    assert out.shape == (1, 7, 7, 8)
