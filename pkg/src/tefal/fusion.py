"""Combining the text-conditioned video and audio embeddings.

The engine's default is plain addition; four alternatives are kept for
ablation:

    addition   fused = E_v|t + E_a|t
    late       fused = E_v|t + mean(audio tokens) W   (audio unconditioned)
    concat_fc  fused = FC([E_v|t, E_a|t])
    xattn      fused = XAttn(text, [E_v|t, E_a|t])    (third attention block)
    stacking   fused = XAttn(text, [frames; audio summary row])
               (reuses the video block over an F+1 row context)

All variants produce one row of width D_p per query.  There is no
re-normalization after fusing; the downstream cosine similarity absorbs
scale.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .attention import (
    XAttnParams,
    block_backward_each,
    block_forward,
    block_forward_each,
)
from .linalg import ShapeError, as_matrix

__all__ = ["FusionKind", "FusionParams", "FusionError", "audio_summary", "fuse",
           "fuse_forward", "fuse_backward"]


class FusionError(ValueError):
    """Fusion kind and supplied inputs/parameters do not match."""


class FusionKind(enum.Enum):
    ADDITION = "addition"
    LATE = "late"
    CONCAT_FC = "concat_fc"
    XATTN = "xattn"
    STACKING = "stacking"

    @classmethod
    def parse(cls, name: str) -> "FusionKind":
        try:
            return cls(name)
        except ValueError:
            valid = "|".join(k.value for k in cls)
            raise FusionError(f"unknown fusion kind {name!r}; expected {valid}") from None


@dataclass
class FusionParams:
    """Extra learnable state a fusion kind needs (present iff required).

    ``concat_w``/``concat_b`` map the 2*D_p concatenation back to D_p;
    ``late_w`` projects the raw audio-token mean from D to D_p; ``xattn``
    is the third attention block (with D = D_p).  Addition and stacking
    carry nothing.
    """

    kind: FusionKind
    concat_w: np.ndarray | None = None
    concat_b: np.ndarray | None = None
    late_w: np.ndarray | None = None
    xattn: XAttnParams | None = None

    @classmethod
    def create(cls, rng: np.random.Generator, kind: FusionKind,
               dim: int, proj_dim: int) -> "FusionParams":
        if kind == FusionKind.CONCAT_FC:
            limit = 1.0 / math.sqrt(2 * proj_dim)
            return cls(kind,
                       concat_w=rng.uniform(-limit, limit, size=(2 * proj_dim, proj_dim)),
                       concat_b=np.zeros((1, proj_dim)))
        if kind == FusionKind.LATE:
            limit = 1.0 / math.sqrt(dim)
            return cls(kind, late_w=rng.uniform(-limit, limit, size=(dim, proj_dim)))
        if kind == FusionKind.XATTN:
            return cls(kind, xattn=XAttnParams.create(rng, proj_dim, proj_dim))
        return cls(kind)

    def named(self) -> dict[str, np.ndarray]:
        if self.kind == FusionKind.CONCAT_FC:
            return {"concat_w": self.concat_w, "concat_b": self.concat_b}
        if self.kind == FusionKind.LATE:
            return {"late_w": self.late_w}
        if self.kind == FusionKind.XATTN:
            return {f"xattn.{k}": v for k, v in self.xattn.named().items()}
        return {}


def audio_summary(cls_row: np.ndarray, dist_row: np.ndarray) -> np.ndarray:
    """Elementwise mean of the audio encoder's class and distillation rows."""
    cls_row = as_matrix(cls_row, "cls_row")
    dist_row = as_matrix(dist_row, "dist_row")
    if cls_row.shape != dist_row.shape:
        raise ShapeError(f"summary rows have shapes {cls_row.shape} and {dist_row.shape}")
    return (cls_row + dist_row) / 2.0


@dataclass
class FusionCache:
    kind: FusionKind
    video_cond: np.ndarray | None = None
    audio_cond: np.ndarray | None = None
    token_mean: np.ndarray | None = None
    concat: np.ndarray | None = None
    block_cache: object = None


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise FusionError(message)


def fuse_forward(params: FusionParams, *, video_cond=None, audio_cond=None,
                 texts=None, audio_token_mean=None):
    """Forward pass for the post-hoc fusion kinds, returning ``(fused, cache)``.

    ``video_cond``/``audio_cond`` are the conditioned embeddings (one row per
    query).  ``audio_token_mean`` (1 x D) is the raw token mean used by the
    late variant; ``texts`` are the raw query rows used by the xattn variant.
    The stacking variant is not a post-hoc combiner (it swaps the video
    block's context) and is handled by :func:`fuse`.
    """
    kind = params.kind
    if kind == FusionKind.ADDITION:
        _require(video_cond is not None and audio_cond is not None,
                 "addition fusion needs both conditioned embeddings")
        if video_cond.shape != audio_cond.shape:
            raise ShapeError(f"conditioned embeddings have shapes "
                             f"{video_cond.shape} and {audio_cond.shape}")
        return video_cond + audio_cond, FusionCache(kind)

    if kind == FusionKind.LATE:
        _require(params.late_w is not None, "late fusion parameters missing")
        _require(video_cond is not None and audio_token_mean is not None,
                 "late fusion needs the conditioned video embedding and the "
                 "raw audio token mean")
        summary = as_matrix(audio_token_mean, "audio_token_mean")
        if summary.shape[1] != params.late_w.shape[0]:
            raise ShapeError(f"audio summary has {summary.shape[1]} columns, "
                             f"projection expects {params.late_w.shape[0]}")
        fused = video_cond + summary @ params.late_w
        return fused, FusionCache(kind, token_mean=summary,
                                  video_cond=video_cond)

    if kind == FusionKind.CONCAT_FC:
        _require(params.concat_w is not None, "concat fusion parameters missing")
        _require(video_cond is not None and audio_cond is not None,
                 "concat fusion needs both conditioned embeddings")
        concat = np.concatenate([video_cond, audio_cond], axis=1)
        if concat.shape[1] != params.concat_w.shape[0]:
            raise ShapeError(f"concatenation has {concat.shape[1]} columns, "
                             f"weight expects {params.concat_w.shape[0]}")
        fused = concat @ params.concat_w + params.concat_b
        return fused, FusionCache(kind, concat=concat)

    if kind == FusionKind.XATTN:
        _require(params.xattn is not None, "xattn fusion parameters missing")
        _require(video_cond is not None and audio_cond is not None and texts is not None,
                 "xattn fusion needs the query texts and both conditioned embeddings")
        contexts = np.stack([video_cond, audio_cond], axis=1)  # (B, 2, D_p)
        fused, block_cache = block_forward_each(params.xattn, texts, contexts)
        return fused, FusionCache(kind, block_cache=block_cache)

    raise FusionError(f"{kind.value} fusion is not a post-hoc combiner")


def fuse_backward(params: FusionParams, cache: FusionCache, d_fused: np.ndarray):
    """Returns ``(own_grads, d_video_cond, d_audio_cond)`` for the post-hoc
    kinds.  Gradients for raw inputs (texts, token means) are not produced;
    those are data, not parameters."""
    kind = cache.kind
    if kind == FusionKind.ADDITION:
        return {}, d_fused, d_fused

    if kind == FusionKind.LATE:
        d_late_w = cache.token_mean.T @ d_fused.sum(axis=0, keepdims=True)
        return {"late_w": d_late_w}, d_fused, None

    if kind == FusionKind.CONCAT_FC:
        d_w = cache.concat.T @ d_fused
        d_b = d_fused.sum(axis=0, keepdims=True)
        d_concat = d_fused @ params.concat_w.T
        half = params.concat_w.shape[1]
        return {"concat_w": d_w, "concat_b": d_b}, d_concat[:, :half], d_concat[:, half:]

    if kind == FusionKind.XATTN:
        grads, _d_text, d_contexts = block_backward_each(
            params.xattn, cache.block_cache, d_fused)
        own = {f"xattn.{k}": v for k, v in grads.items()}
        if not params.xattn.output_affine:
            own.pop("xattn.ln_o_gain")
            own.pop("xattn.ln_o_bias")
        return own, d_contexts[:, 0, :], d_contexts[:, 1, :]

    raise FusionError(f"{kind.value} fusion is not a post-hoc combiner")


def fuse(params: FusionParams, *, video_cond=None, audio_cond=None, texts=None,
         audio_token_mean=None, frames=None, audio_summary_row=None,
         video_block: XAttnParams | None = None) -> np.ndarray:
    """Fuse per the configured kind; every kind returns one D_p row per query.

    Stacking needs the raw inputs instead of conditioned embeddings: the
    query ``texts``, the ``frames`` of the candidate, the candidate's
    ``audio_summary_row``, and the ``video_block`` whose parameters it
    reuses over the stacked (F+1)-row context.
    """
    if params.kind == FusionKind.STACKING:
        _require(texts is not None and frames is not None
                 and audio_summary_row is not None and video_block is not None,
                 "stacking fusion needs texts, frames, an audio summary row, "
                 "and the video attention block")
        frames = as_matrix(frames, "frames")
        summary = as_matrix(audio_summary_row, "audio_summary_row")
        if summary.shape[1] != frames.shape[1]:
            raise ShapeError(f"audio summary has {summary.shape[1]} columns, "
                             f"frames have {frames.shape[1]}")
        context = np.concatenate([frames, summary], axis=0)
        fused, _ = block_forward(video_block, texts, context)
        return fused
    fused, _ = fuse_forward(params, video_cond=video_cond, audio_cond=audio_cond,
                            texts=texts, audio_token_mean=audio_token_mean)
    return fused
