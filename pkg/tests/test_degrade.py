import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stvsr.degrade import (DegradationConfig, area_downsample, draw_sigmas, keyframe_count, make_pair,
                           spatial_degrade, temporal_subsample)
from stvsr.video import ScaleFactors


def clip(seed=0, T=9, H=16, W=16, C=3):
    return np.random.default_rng(seed).random((T, H, W, C)).astype(np.float32)


def test_null_degradation_is_identity():
    v = clip()
    lq, hq = make_pair(v, DegradationConfig.null(1, 1))
    np.testing.assert_array_equal(lq, v)
    assert hq is v


def test_null_area_matches_block_means():
    v = clip(T=1, H=4, W=4, C=1)
    out = spatial_degrade(v, DegradationConfig.null(2))
    # oracle: hand-written 2x2 means
    expect = np.array([[v[0, 0:2, 0:2].mean(), v[0, 0:2, 2:4].mean()],
                       [v[0, 2:4, 0:2].mean(), v[0, 2:4, 2:4].mean()]])
    np.testing.assert_allclose(out[0, :, :, 0], expect, atol=1e-7)


@pytest.mark.parametrize("T,phi_t,phi_s", [(17, 4, 4), (9, 2, 2), (13, 3, 1), (5, 4, 4)])
def test_shape_law(T, phi_t, phi_s):
    v = clip(T=T)
    lq, _ = make_pair(v, DegradationConfig(seed=1, scales=ScaleFactors(phi_s, phi_t)))
    assert lq.shape == (keyframe_count(T, phi_t), 16 // phi_s, 16 // phi_s, 3)
    assert lq.shape[0] == (T - 1) // phi_t + 1
    assert lq.dtype == np.float32


def test_keyframes_are_every_phi_t_th_frame():
    v = clip(T=9)
    cfg = DegradationConfig(seed=4, scales=ScaleFactors(2, 4))
    lq, _ = make_pair(v, cfg)
    full = spatial_degrade(v, cfg)
    np.testing.assert_array_equal(lq, full[[0, 4, 8]])


def test_deterministic_per_seed():
    v = clip()
    a = spatial_degrade(v, DegradationConfig(seed=5))
    b = spatial_degrade(v, DegradationConfig(seed=5))
    c = spatial_degrade(v, DegradationConfig(seed=6))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_constant_video_survives_blur_and_downsample():
    v = np.full((3, 16, 16, 1), 0.3, np.float32)
    out = spatial_degrade(v, DegradationConfig((1.5, 1.5), (0, 0), seed=0))
    np.testing.assert_allclose(out, 0.3, atol=1e-6)


def test_noise_level_matches_draw():
    v = np.full((4, 64, 64, 3), 0.5, np.float32)
    cfg = DegradationConfig((0, 0), (0.02, 0.02), seed=3, scales=ScaleFactors(1, 1))
    out = spatial_degrade(v, cfg)
    assert abs(np.std(out - 0.5) - 0.02) < 0.002


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 3), st.floats(0, 3), st.floats(0, 0.1), st.floats(0, 0.1))
def test_sigma_draws_in_range(seed, b0, b1, n0, n1):
    blur = (min(b0, b1), max(b0, b1))
    noise = (min(n0, n1), max(n0, n1))
    b, n = draw_sigmas(DegradationConfig(blur, noise, seed=seed))
    assert blur[0] <= b <= blur[1] and noise[0] <= n <= noise[1]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([None, 1, 4, 8]))
def test_output_in_unit_range(seed, bits):
    v = clip(seed % 1000, T=2, H=8, W=8)
    out = spatial_degrade(v, DegradationConfig((0, 1), (0, 0.2), quantize_bits=bits, seed=seed,
                                               scales=ScaleFactors(2, 1)))
    assert out.min() >= 0 and out.max() <= 1


def test_quantize_grid():
    v = clip(T=1)
    out = spatial_degrade(v, DegradationConfig.null(1)).astype(np.float64)
    q = spatial_degrade(v, DegradationConfig((0, 0), (0, 0), quantize_bits=3, scales=ScaleFactors(1, 1)))
    np.testing.assert_allclose(q * 7, np.round(q * 7), atol=1e-5)
    assert np.abs(q - out).max() <= 0.5 / 7 + 1e-6


def test_bilinear_downsample_option():
    v = clip(T=1, H=8, W=8)
    out = spatial_degrade(v, DegradationConfig((0, 0), (0, 0), "bilinear", scales=ScaleFactors(2, 1)))
    assert out.shape == (1, 4, 4, 3)


@pytest.mark.parametrize("kwargs", [
    dict(blur_sigma_range=(2.0, 1.0)),
    dict(noise_sigma_range=(-0.1, 0.1)),
    dict(blur_sigma_range=(0.0, float("nan"))),
    dict(downsample="nearest"),
    dict(quantize_bits=9),
])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        DegradationConfig(**kwargs)


def test_indivisible_sizes():
    with pytest.raises(ValueError):
        spatial_degrade(clip(H=10), DegradationConfig(scales=ScaleFactors(4, 1)))
    with pytest.raises(ValueError):
        make_pair(clip(T=8), DegradationConfig(scales=ScaleFactors(1, 4)))
    with pytest.raises(ValueError):
        temporal_subsample(clip(T=6), 2)


def test_area_downsample_mean_preserved():
    v = clip(T=2, H=12, W=12).astype(np.float64)
    np.testing.assert_allclose(area_downsample(v, 3).mean(), v.mean(), atol=1e-12)


def test_monotone_blur_severity():
    from stvsr.datagen import corpus_spec, generate_clip
    from stvsr.metrics import psnr
    from stvsr.video import resize_bilinear

    scores = []
    for blur in (0.5, 1.0, 2.0):
        per_clip = []
        for s in range(20):
            hq = generate_clip(corpus_spec(s, T=5, H=32, W=32)).video
            lq, _ = make_pair(hq, DegradationConfig((blur, blur), (0, 0), seed=s, scales=ScaleFactors(4, 4)))
            up = resize_bilinear(lq, 32, 32)
            per_clip.append(psnr(up, hq[::4]))
        scores.append(np.mean(per_clip))
    assert scores[0] >= scores[1] >= scores[2]
