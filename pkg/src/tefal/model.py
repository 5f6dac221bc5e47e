"""The full retrieval model: two attention blocks, fusion, and similarity.

Every candidate embedding is conditioned on the query text, so a similarity
matrix over T queries and V candidates costs one block evaluation per
(query, candidate) pair.  The pair loop is organized candidate-major: for a
fixed candidate, all query rows are pushed through the blocks as one batch.

``modality`` selects what the fused embedding is built from: ``"both"``
(the configured fusion of the two conditioned embeddings), ``"video"``
(conditioned video only), or ``"audio"`` (conditioned audio only); the two
single-modality settings are the ablation models.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attention import XAttnParams, block_backward, block_forward
from .contrastive import (
    TAU_INIT,
    Temperature,
    cosine_rows,
    cosine_rows_backward,
    infonce,
)
from .corpus import Corpus
from .fusion import FusionKind, FusionParams, fuse_backward, fuse_forward
from .linalg import ShapeError

__all__ = ["RetrievalModel", "create_model", "named_parameters",
           "candidate_scores", "similarity_matrix", "batch_loss_and_grads"]

MODALITIES = ("both", "video", "audio")


@dataclass
class RetrievalModel:
    video: XAttnParams
    audio: XAttnParams
    fusion: FusionParams
    temperature: Temperature
    modality: str = "both"

    @property
    def dim(self) -> int:
        return self.video.dim

    @property
    def proj_dim(self) -> int:
        return self.video.proj_dim


def create_model(seed: int, dim: int, proj_dim: int | None = None,
                 fusion: FusionKind | str = FusionKind.ADDITION,
                 modality: str = "both", tau: float = TAU_INIT,
                 output_affine: bool = True) -> RetrievalModel:
    """Build a freshly initialized model.

    The query text enters the similarity directly, so the projection width
    must equal the embedding width; ``proj_dim`` defaults to ``dim`` and any
    other value is rejected.
    """
    if proj_dim is None:
        proj_dim = dim
    if proj_dim != dim:
        raise ShapeError(
            f"cosine similarity compares raw text rows (width {dim}) with fused "
            f"embeddings (width {proj_dim}); the widths must match")
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
    if isinstance(fusion, str):
        fusion = FusionKind.parse(fusion)
    rng = np.random.default_rng(seed)
    return RetrievalModel(
        video=XAttnParams.create(rng, dim, proj_dim, output_affine=output_affine),
        audio=XAttnParams.create(rng, dim, proj_dim, output_affine=output_affine),
        fusion=FusionParams.create(rng, fusion, dim, proj_dim),
        temperature=Temperature.from_tau(tau),
        modality=modality,
    )


def _uses_video(model: RetrievalModel) -> bool:
    return model.modality != "audio"


def _uses_audio_block(model: RetrievalModel) -> bool:
    if model.modality == "audio":
        return True
    if model.modality == "video":
        return False
    return model.fusion.kind in (FusionKind.ADDITION, FusionKind.CONCAT_FC,
                                 FusionKind.XATTN)


def named_parameters(model: RetrievalModel, trainable_only: bool = True
                     ) -> dict[str, np.ndarray]:
    """Flat name -> array view of the model's parameters.

    With ``trainable_only`` the dict is restricted to parameters that the
    configured modality and fusion kind actually route gradients to.
    """
    out: dict[str, np.ndarray] = {}
    if not trainable_only or _uses_video(model):
        out.update({f"video.{k}": v for k, v in model.video.named().items()})
    if not trainable_only or _uses_audio_block(model):
        out.update({f"audio.{k}": v for k, v in model.audio.named().items()})
    if not trainable_only or model.modality == "both":
        out.update({f"fusion.{k}": v for k, v in model.fusion.named().items()})
    out["temperature.log_scale"] = model.temperature.log_scale
    return out


def _accumulate(grads: dict[str, np.ndarray], prefix: str,
                block_grads: dict[str, np.ndarray], affine: bool) -> None:
    for key, val in block_grads.items():
        if not affine and key in ("ln_o_gain", "ln_o_bias"):
            continue
        name = f"{prefix}.{key}"
        if name in grads:
            grads[name] += val
        else:
            grads[name] = val


@dataclass
class CandidateCache:
    """Everything needed to backpropagate one candidate column."""
    video_cache: object = None
    audio_cache: object = None
    fusion_cache: object = None
    fused: np.ndarray | None = None
    cos_cache: object = None


def _candidate_fused(model: RetrievalModel, texts: np.ndarray, corpus: Corpus,
                     j: int):
    """Fused embedding of candidate ``j`` for every query row in ``texts``."""
    kind = model.fusion.kind
    cache = CandidateCache()

    if model.modality == "video":
        fused, cache.video_cache = block_forward(model.video, texts, corpus.frames[j])
    elif model.modality == "audio":
        fused, cache.audio_cache = block_forward(model.audio, texts, corpus.audio[j])
    elif kind == FusionKind.STACKING:
        context = np.concatenate(
            [corpus.frames[j], corpus.summary_rows()[j:j + 1]], axis=0)
        fused, cache.video_cache = block_forward(model.video, texts, context)
    elif kind == FusionKind.LATE:
        e_v, cache.video_cache = block_forward(model.video, texts, corpus.frames[j])
        token_mean = corpus.audio[j].mean(axis=0, keepdims=True)
        fused, cache.fusion_cache = fuse_forward(
            model.fusion, video_cond=e_v, audio_token_mean=token_mean)
    else:
        e_v, cache.video_cache = block_forward(model.video, texts, corpus.frames[j])
        e_a, cache.audio_cache = block_forward(model.audio, texts, corpus.audio[j])
        fused, cache.fusion_cache = fuse_forward(
            model.fusion, video_cond=e_v, audio_cond=e_a, texts=texts)
    cache.fused = fused
    return fused, cache


def _candidate_backward(model: RetrievalModel, cache: CandidateCache,
                        d_fused: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    """Accumulate parameter gradients for one candidate column in place."""
    d_video_cond = d_audio_cond = None
    if cache.fusion_cache is not None:
        own, d_video_cond, d_audio_cond = fuse_backward(
            model.fusion, cache.fusion_cache, d_fused)
        for key, val in own.items():
            name = f"fusion.{key}"
            if name in grads:
                grads[name] += val
            else:
                grads[name] = val
    elif cache.video_cache is not None:
        d_video_cond = d_fused
    else:
        d_audio_cond = d_fused

    if cache.video_cache is not None and d_video_cond is not None:
        block_grads, _, _ = block_backward(model.video, cache.video_cache, d_video_cond)
        _accumulate(grads, "video", block_grads, model.video.output_affine)
    if cache.audio_cache is not None and d_audio_cond is not None:
        block_grads, _, _ = block_backward(model.audio, cache.audio_cache, d_audio_cond)
        _accumulate(grads, "audio", block_grads, model.audio.output_affine)


def candidate_scores(model: RetrievalModel, texts: np.ndarray, corpus: Corpus,
                     j: int, with_cache: bool = False):
    """Cosine scores of candidate ``j`` against every query row."""
    fused, cache = _candidate_fused(model, texts, corpus, j)
    scores, cos_cache = cosine_rows(texts, fused)
    if not with_cache:
        return scores, None
    cache.cos_cache = cos_cache
    return scores, cache


def similarity_matrix(model: RetrievalModel, corpus: Corpus,
                      query_texts: np.ndarray | None = None,
                      candidates: np.ndarray | None = None,
                      workers: int = 1) -> np.ndarray:
    """Dense T x V matrix of text-conditioned cosine similarities.

    Candidate columns are independent, so they may be computed by a worker
    pool; results are assembled by index, which keeps the output identical
    for any worker count.
    """
    texts = corpus.texts if query_texts is None else np.asarray(query_texts, float)
    if candidates is None:
        candidates = np.arange(len(corpus))
    sim = np.empty((texts.shape[0], len(candidates)))

    def column(slot_j):
        slot, j = slot_j
        scores, _ = candidate_scores(model, texts, corpus, int(j))
        return slot, scores

    tasks = list(enumerate(candidates))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for slot, scores in pool.map(column, tasks):
                sim[:, slot] = scores
    else:
        for slot, scores in map(column, tasks):
            sim[:, slot] = scores
    return sim


def batch_loss_and_grads(model: RetrievalModel, corpus: Corpus,
                         indices: np.ndarray):
    """Symmetric InfoNCE loss and parameter gradients for one mini-batch.

    The batch items serve as both queries and candidates; entry (i, j) of
    the similarity matrix scores candidate j's embedding conditioned on
    text i.  Gradients are reduced candidate-by-candidate in index order,
    so the result is deterministic.
    """
    indices = np.asarray(indices, dtype=np.intp)
    texts = corpus.texts[indices]
    b = len(indices)

    sim = np.empty((b, b))
    caches: list[CandidateCache] = []
    for col, j in enumerate(indices):
        scores, cache = candidate_scores(model, texts, corpus, int(j), with_cache=True)
        sim[:, col] = scores
        caches.append(cache)

    loss, d_sim, d_log_scale = infonce(sim, model.temperature)

    grads: dict[str, np.ndarray] = {"temperature.log_scale": d_log_scale}
    for col in range(b):
        d_fused = cosine_rows_backward(d_sim[:, col], caches[col].cos_cache)
        _candidate_backward(model, caches[col], d_fused, grads)
    return loss, grads, sim
