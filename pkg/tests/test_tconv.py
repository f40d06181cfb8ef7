"""Temporal convolution and the two temporal covariance pooling routes."""

import numpy as np
import pytest

import tcpool as tp

DOUBLE = np.float64


def kernel_from(taps, dtype=DOUBLE):
    params = [tp.Parameter(f"k.tap{j:+d}", tp.Tensor(np.asarray(t, dtype=dtype)))
              for j, t in zip(range(-(len(taps) // 2), len(taps) // 2 + 1), taps)]
    return tp.TemporalKernel(params)


def conv_oracle(x, taps):
    """Shifted-sum reference with replicate clamping at the ends."""
    l = x.shape[0]
    radius = len(taps) // 2
    y = np.zeros_like(x)
    for t in range(l):
        for j, w in zip(range(-radius, radius + 1), taps):
            y[t] += x[np.clip(t + j, 0, l - 1)] @ w
    return y


def pool_oracle(y):
    l, n, _ = y.shape
    return sum(y[t].T @ y[t] / n for t in range(l)) / l


def test_single_identity_tap_is_bitwise_plain_pool():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5, 3)).astype(np.float32)
    clip = tp.FeatureClip.from_array(x)
    kernel = kernel_from([np.eye(3)], dtype=np.float32)
    pooled = tp.tcp_pool_efficient(clip, kernel).mat.data
    plain = tp.plain_gcp(clip).mat.data
    assert np.array_equal(pooled, plain)


def test_conv_on_time_constant_clip_applies_tap_sum():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((4, 3))
    x = np.broadcast_to(f, (5, 4, 3)).copy()
    taps = [rng.standard_normal((3, 3)) for _ in range(3)]
    y = tp.temporal_conv(tp.FeatureClip.from_array(x), kernel_from(taps)).stacked().data
    want = f @ sum(taps)
    for t in range(5):
        assert np.abs(y[t] - want).max() <= 1e-12


def test_conv_matches_shifted_sum_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 4, 3))
    taps = [rng.standard_normal((3, 3)) for _ in range(3)]
    y = tp.temporal_conv(tp.FeatureClip.from_array(x), kernel_from(taps)).stacked().data
    assert np.abs(y - conv_oracle(x, taps)).max() <= 1e-12


def test_conv_zero_side_taps_is_per_frame_product():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5, 3))
    w0 = rng.standard_normal((3, 3))
    taps = [np.zeros((3, 3)), w0, np.zeros((3, 3))]
    y = tp.temporal_conv(tp.FeatureClip.from_array(x), kernel_from(taps)).stacked().data
    for t in range(4):
        assert np.abs(y[t] - x[t] @ w0).max() <= 1e-12


def test_pool_routes_agree_in_double_precision():
    rng = np.random.default_rng(4)
    for l, n, d, k in [(1, 3, 2, 3), (4, 5, 3, 3), (6, 4, 2, 5), (3, 2, 4, 1)]:
        x = rng.standard_normal((l, n, d))
        taps = [rng.standard_normal((d, d)) for _ in range(k)]
        clip = tp.FeatureClip.from_array(x)
        kernel = kernel_from(taps)
        fast = tp.tcp_pool_efficient(clip, kernel).mat.data
        slow = tp.tcp_pool_expanded(clip, kernel).mat.data
        rel = np.linalg.norm(fast - slow) / max(np.linalg.norm(slow), 1e-300)
        assert rel <= 1e-12, (l, n, d, k, rel)
        assert np.abs(fast - pool_oracle(conv_oracle(x, taps))).max() <= 1e-10


def test_pool_routes_agree_in_single_precision():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6, 3)).astype(np.float32)
    taps = [rng.standard_normal((3, 3)).astype(np.float32) for _ in range(3)]
    clip = tp.FeatureClip.from_array(x)
    kernel = kernel_from(taps, dtype=np.float32)
    fast = tp.tcp_pool_efficient(clip, kernel).mat.data
    slow = tp.tcp_pool_expanded(clip, kernel).mat.data
    rel = np.linalg.norm(fast - slow) / np.linalg.norm(slow)
    assert rel <= 1e-5


def test_pool_centered_matches_manual_centering():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 5, 4))
    taps = [rng.standard_normal((4, 4)) for _ in range(3)]
    clip = tp.FeatureClip.from_array(x)
    kernel = kernel_from(taps)
    got = tp.tcp_pool_efficient(clip, kernel, centered=True).mat.data
    y = conv_oracle(x, taps)
    yc = y - y.mean(axis=1, keepdims=True)
    assert np.abs(got - pool_oracle(yc)).max() <= 1e-10


def test_pool_is_sensitive_to_frame_order():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 5, 4))
    taps = [0.5 * rng.standard_normal((4, 4)) for _ in range(3)]
    clip = tp.FeatureClip.from_array(x)
    kernel = kernel_from(taps)
    base = tp.tcp_pool_efficient(clip, kernel).mat.data
    flipped = tp.tcp_pool_efficient(clip.reversed(), kernel).mat.data
    assert np.abs(base - flipped).max() > 1e-6


def test_kernel_init_is_near_passthrough():
    rng = np.random.default_rng(8)
    k = tp.TemporalKernel.init("k", 16, 5, rng)
    center = k.tap(0).tensor.data
    assert np.abs(center - np.eye(16)).max() <= 0.05
    for j in (-2, -1, 1, 2):
        assert np.abs(k.tap(j).tensor.data).max() <= 0.05
    assert list(k.offsets()) == [-2, -1, 0, 1, 2]
    assert k.radius == 2 and k.size == 5 and k.width == 16


def test_kernel_and_conv_validation():
    rng = np.random.default_rng(9)
    with pytest.raises(tp.ShapeError):
        tp.TemporalKernel.init("k", 4, 2, rng)
    with pytest.raises(tp.ShapeError):
        kernel_from([np.ones((2, 3))])
    kernel = kernel_from([np.eye(3)])
    with pytest.raises(tp.ShapeError):
        tp.temporal_conv(tp.FeatureClip.from_array(np.ones((2, 4, 5))), kernel)
    with pytest.raises(tp.ShapeError):
        tp.temporal_conv_batch(tp.Tensor(np.ones((2, 4, 3))), kernel)


def test_default_kernel_size_rule():
    from tcpool.tconv import default_kernel_size

    assert default_kernel_size(4) == 5
    assert default_kernel_size(8) == 5
    assert default_kernel_size(9) == 9
    assert default_kernel_size(32) == 9
