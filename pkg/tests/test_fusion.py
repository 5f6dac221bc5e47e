"""Fusion strategies: the addition default and the four ablation variants."""

import numpy as np
import pytest

from tefal.attention import XAttnParams
from tefal.fusion import (
    FusionError,
    FusionKind,
    FusionParams,
    audio_summary,
    fuse,
    fuse_forward,
)
from tefal.linalg import ShapeError


def rng(seed=0):
    return np.random.default_rng(seed)


class TestAudioSummary:
    def test_equal_rows(self):
        row = rng(1).standard_normal((1, 6))
        np.testing.assert_array_equal(audio_summary(row, row), row)

    def test_arithmetic_mean(self):
        out = audio_summary(np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]]))
        np.testing.assert_array_equal(out, np.array([[1.0, 1.0]]))

    def test_random_rows(self):
        a = rng(2).standard_normal((1, 9))
        b = rng(3).standard_normal((1, 9))
        np.testing.assert_allclose(audio_summary(a, b), (a + b) / 2.0, atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            audio_summary(np.zeros((1, 3)), np.zeros((1, 4)))


class TestAddition:
    def test_zero_audio_is_identity(self):
        params = FusionParams(FusionKind.ADDITION)
        video = rng(4).standard_normal((2, 5))
        fused = fuse(params, video_cond=video, audio_cond=np.zeros((2, 5)))
        np.testing.assert_array_equal(fused, video)

    def test_commutative_bitwise(self):
        params = FusionParams(FusionKind.ADDITION)
        a = rng(5).standard_normal((3, 4))
        b = rng(6).standard_normal((3, 4))
        np.testing.assert_array_equal(
            fuse(params, video_cond=a, audio_cond=b),
            fuse(params, video_cond=b, audio_cond=a))

    def test_gradient_is_identity(self):
        from tefal.fusion import fuse_backward
        params = FusionParams(FusionKind.ADDITION)
        v = rng(7).standard_normal((2, 4))
        a = rng(8).standard_normal((2, 4))
        _, cache = fuse_forward(params, video_cond=v, audio_cond=a)
        d = rng(9).standard_normal((2, 4))
        own, d_v, d_a = fuse_backward(params, cache, d)
        assert own == {}
        np.testing.assert_array_equal(d_v, d)
        np.testing.assert_array_equal(d_a, d)


class TestConcatFC:
    def test_identity_projection_passes_video_through(self):
        proj = 4
        params = FusionParams(FusionKind.CONCAT_FC,
                              concat_w=np.vstack([np.eye(proj), np.zeros((proj, proj))]),
                              concat_b=np.zeros((1, proj)))
        video = rng(10).standard_normal((2, proj))
        audio = rng(11).standard_normal((2, proj))
        fused = fuse(params, video_cond=video, audio_cond=audio)
        np.testing.assert_allclose(fused, video, atol=1e-15)


class TestVariantShapes:
    def test_every_kind_outputs_one_row_of_proj_dim_per_query(self):
        dim = proj = 6
        g = rng(12)
        video = g.standard_normal((3, proj))
        audio = g.standard_normal((3, proj))
        texts = g.standard_normal((3, dim))
        token_mean = g.standard_normal((1, dim))
        frames = g.standard_normal((4, dim))
        summary = g.standard_normal((1, dim))
        block = XAttnParams.create(g, dim, proj)
        for kind in FusionKind:
            params = FusionParams.create(g, kind, dim, proj)
            fused = fuse(params, video_cond=video, audio_cond=audio, texts=texts,
                         audio_token_mean=token_mean, frames=frames,
                         audio_summary_row=summary, video_block=block)
            assert fused.shape == (3, proj), kind


class TestStacking:
    def test_matches_block_over_stacked_context(self):
        from tefal.attention import block_forward
        g = rng(13)
        dim = 5
        block = XAttnParams.create(g, dim, dim)
        texts = g.standard_normal((2, dim))
        frames = g.standard_normal((3, dim))
        summary = g.standard_normal((1, dim))
        fused = fuse(FusionParams(FusionKind.STACKING), texts=texts, frames=frames,
                     audio_summary_row=summary, video_block=block)
        expected, _ = block_forward(block, texts, np.vstack([frames, summary]))
        np.testing.assert_array_equal(fused, expected)


class TestValidation:
    def test_missing_inputs(self):
        with pytest.raises(FusionError):
            fuse(FusionParams(FusionKind.ADDITION), video_cond=np.zeros((1, 3)))

    def test_missing_parameters(self):
        with pytest.raises(FusionError):
            fuse(FusionParams(FusionKind.CONCAT_FC),
                 video_cond=np.zeros((1, 3)), audio_cond=np.zeros((1, 3)))

    def test_feature_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(FusionParams(FusionKind.ADDITION),
                 video_cond=np.zeros((1, 3)), audio_cond=np.zeros((1, 4)))

    def test_unknown_kind_name(self):
        with pytest.raises(FusionError, match="unknown fusion kind"):
            FusionKind.parse("gated")

    def test_parse_accepts_config_names(self):
        for name in ("addition", "late", "concat_fc", "xattn", "stacking"):
            assert FusionKind.parse(name).value == name

    def test_params_present_iff_kind_requires_them(self):
        g = rng(14)
        assert FusionParams.create(g, FusionKind.ADDITION, 4, 4).named() == {}
        assert FusionParams.create(g, FusionKind.STACKING, 4, 4).named() == {}
        assert set(FusionParams.create(g, FusionKind.LATE, 4, 4).named()) == {"late_w"}
        assert set(FusionParams.create(g, FusionKind.CONCAT_FC, 4, 4).named()) == \
            {"concat_w", "concat_b"}
        assert all(k.startswith("xattn.") for k in
                   FusionParams.create(g, FusionKind.XATTN, 4, 4).named())
