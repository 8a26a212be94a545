import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from stvsr.vrg import VRG, CrossAttention, sample_keyframes


@pytest.fixture
def vrg():
    torch.manual_seed(0)
    return VRG(channels=3, dim=32, n_queries=4, n_text=3, heads=4, n_keyframes=3)


@pytest.mark.parametrize("T,n,expect", [(17, 5, [0, 4, 8, 12, 16]), (5, 5, [0, 1, 2, 3, 4]), (4, 3, [0, 2, 3]),
                                        (9, 1, [4]), (2, 2, [0, 1])])
def test_sample_keyframes_examples(T, n, expect):
    assert sample_keyframes(T, n) == expect


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.data())
def test_sample_keyframes_properties(T, data):
    n = data.draw(st.integers(1, T))
    idx = sample_keyframes(T, n)
    assert len(idx) == n
    assert idx == sorted(idx) and 0 <= idx[0] and idx[-1] <= T - 1
    if n >= 2:
        assert idx[0] == 0 and idx[-1] == T - 1


def test_sample_keyframes_accepts_arrays_and_rejects_bad_n():
    assert sample_keyframes(np.zeros((7, 2, 2, 1)), 2) == [0, 6]
    for n in (0, 8):
        with pytest.raises(ValueError):
            sample_keyframes(7, n)


def test_cross_attention_matches_reference():
    torch.manual_seed(1)
    att = CrossAttention(16, heads=2, kv_dim=8).double()
    q = torch.randn(2, 3, 16, dtype=torch.float64)
    ctx = torch.randn(2, 5, 8, dtype=torch.float64)
    split = lambda x: x.view(2, -1, 2, 8).transpose(1, 2)
    ref = F.scaled_dot_product_attention(split(att.q(q)), split(att.k(ctx)), split(att.v(ctx)))
    ref = att.o(ref.transpose(1, 2).reshape(2, 3, 16))
    torch.testing.assert_close(att(q, ctx), ref)


def test_condition_shape(vrg):
    c = vrg(torch.rand(2, 5, 16, 16, 3))
    assert c.shape == (2, 4 + 3, 32)
    assert vrg.fixed_condition(2).shape == (2, 3, 32)


def test_list_and_batched_fusion_agree(vrg):
    frames = torch.rand(3, 16, 16, 3)
    embs = [vrg.encode_frame(f) for f in frames]
    assert embs[0].shape == (16, 32)
    a = vrg.fuse_video_embedding(embs)
    b = vrg.fuse_video_embedding(torch.stack(embs)[None])[0]
    torch.testing.assert_close(a, b)


def test_fusion_is_invariant_to_keyframe_order(vrg):
    embs = [vrg.encode_frame(f) for f in torch.rand(3, 16, 16, 3)]
    torch.testing.assert_close(vrg.fuse_video_embedding(embs), vrg.fuse_video_embedding(embs[::-1]))


def test_projector_starts_as_identity(vrg):
    e_v = torch.randn(4, 32)
    torch.testing.assert_close(vrg.build_condition(e_v), torch.cat([e_v, vrg.text]))


def test_condition_depends_on_video_only_with_vrg(vrg):
    a = vrg(torch.rand(1, 5, 16, 16, 3))
    b = vrg(torch.rand(1, 5, 16, 16, 3))
    assert not torch.allclose(a[:, :4], b[:, :4])
    torch.testing.assert_close(a[:, 4:], b[:, 4:])


def test_batch_items_independent(vrg):
    x = torch.rand(2, 5, 16, 16, 3)
    y = x.clone()
    y[1] = torch.rand(5, 16, 16, 3)
    torch.testing.assert_close(vrg(x)[0], vrg(y)[0])


def test_width_mismatch(vrg):
    with pytest.raises(ValueError):
        vrg.fuse_video_embedding([torch.randn(16, 31)])
    with pytest.raises(ValueError):
        vrg.build_condition(torch.randn(4, 16))
    with pytest.raises(ValueError):
        CrossAttention(30, heads=4)
