"""Finite-difference verification of every backward rule in the engine.

Each check perturbs every coordinate of every input/parameter with central
differences and compares against the analytic gradients, reporting the worst
relative error (see :func:`tefal.linalg.relative_error`).  Primitive and
single-module checks must come in under 1e-4; the end-to-end loss checks,
which stack many rules, under 1e-3.
"""

from dataclasses import dataclass

import numpy as np

from .attention import XAttnParams, block_backward, block_forward
from .contrastive import Temperature, cosine_rows, cosine_rows_backward, infonce
from .corpus import synth_corpus
from .fusion import FusionKind, FusionParams, fuse_backward, fuse_forward
from .linalg import grad_check, relative_error
from .model import batch_loss_and_grads, create_model, named_parameters

__all__ = ["CheckResult", "run_grad_checks", "end_to_end_check"]

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def _fd_scalar(arrays: dict, forward, analytic: dict, step: float) -> float:
    """Worst relative error between ``analytic`` grads and central
    differences of the scalar ``forward()`` w.r.t. every array in ``arrays``
    (perturbed in place)."""
    worst = 0.0
    for name, arr in arrays.items():
        numeric = np.zeros_like(arr)
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + step
            hi = forward()
            arr.flat[i] = orig - step
            lo = forward()
            arr.flat[i] = orig
            numeric.flat[i] = (hi - lo) / (2.0 * step)
        worst = max(worst, relative_error(analytic[name], numeric))
    return worst


def _block_check(seed: int, step: float) -> float:
    rng = np.random.default_rng(seed)
    params = XAttnParams.create(rng, 6, 4)
    text = rng.standard_normal((2, 6))
    context = rng.standard_normal((3, 6))
    cotangent = rng.standard_normal((2, 4))

    _, cache = block_forward(params, text, context)
    grads, d_text, d_context = block_backward(params, cache, cotangent)
    arrays = {**params.named(), "text": text, "context": context}
    analytic = {**grads, "text": d_text, "context": d_context}

    def forward():
        out, _ = block_forward(params, text, context)
        return float(np.sum(cotangent * out))

    return _fd_scalar(arrays, forward, analytic, step)


def _fusion_check(kind: FusionKind, seed: int, step: float) -> float:
    rng = np.random.default_rng(seed)
    dim, proj = 5, 5
    params = FusionParams.create(rng, kind, dim, proj)
    video_cond = rng.standard_normal((2, proj))
    audio_cond = rng.standard_normal((2, proj))
    texts = rng.standard_normal((2, dim))
    token_mean = rng.standard_normal((1, dim))
    cotangent = rng.standard_normal((2, proj))

    def inputs():
        return dict(video_cond=video_cond, audio_cond=audio_cond, texts=texts,
                    audio_token_mean=token_mean)

    _, cache = fuse_forward(params, **inputs())
    own, d_video, d_audio = fuse_backward(params, cache, cotangent)
    arrays = {f"param.{k}": v for k, v in params.named().items()}
    analytic = {f"param.{k}": v for k, v in own.items()}
    arrays["video_cond"] = video_cond
    analytic["video_cond"] = d_video
    if d_audio is not None:
        arrays["audio_cond"] = audio_cond
        analytic["audio_cond"] = d_audio

    def forward():
        fused, _ = fuse_forward(params, **inputs())
        return float(np.sum(cotangent * fused))

    return _fd_scalar(arrays, forward, analytic, step)


def _cosine_check(seed: int, step: float) -> float:
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((3, 4))
    f = rng.standard_normal((3, 4))
    cotangent = rng.standard_normal(3)
    scores, cache = cosine_rows(u, f)
    analytic = {"f": cosine_rows_backward(cotangent, cache)}

    def forward():
        s, _ = cosine_rows(u, f)
        return float(np.sum(cotangent * s))

    return _fd_scalar({"f": f}, forward, analytic, step)


def _infonce_check(seed: int, step: float) -> float:
    rng = np.random.default_rng(seed)
    sim = rng.uniform(-1.0, 1.0, size=(3, 3))
    temp = Temperature.from_tau(5.0)
    _, d_sim, d_log = infonce(sim, temp)
    analytic = {"sim": d_sim, "log_scale": d_log}

    def forward():
        return infonce(sim, temp)[0]

    return _fd_scalar({"sim": sim, "log_scale": temp.log_scale}, forward,
                      analytic, step)


def end_to_end_check(fusion: str = "addition", modality: str = "both",
                     seed: int = 0, step: float = 1e-5,
                     batch: int = 2, dim: int = 8, frames: int = 3,
                     audio_tokens: int = 5) -> float:
    """Finite differences through the whole training loss on a toy model."""
    corpus = synth_corpus(seed=seed + 1, n_items=max(4, batch), dim=dim,
                          frames=frames, audio_tokens=audio_tokens,
                          audio_informative=0.5, noise=0.3)
    model = create_model(seed=seed, dim=dim, proj_dim=dim, fusion=fusion,
                         modality=modality)
    indices = np.arange(batch)
    _, grads, _ = batch_loss_and_grads(model, corpus, indices)
    params = named_parameters(model, trainable_only=True)

    def forward():
        loss, _, _ = batch_loss_and_grads(model, corpus, indices)
        return loss

    return _fd_scalar(params, forward, grads, step)


def run_grad_checks(seed: int = 0, step: float = 1e-5) -> list[CheckResult]:
    """The full verification suite, primitive rules through end-to-end loss."""
    rng = np.random.default_rng(seed)
    results = [
        CheckResult("matmul", grad_check(
            "matmul", rng.standard_normal((3, 4)), rng.standard_normal((4, 2)),
            step=step, seed=seed), PRIMITIVE_TOL),
        CheckResult("softmax_rows", grad_check(
            "softmax_rows", rng.standard_normal((2, 5)), step=step, seed=seed),
            PRIMITIVE_TOL),
        CheckResult("layernorm_rows", grad_check(
            "layernorm_rows", rng.standard_normal((2, 8)),
            rng.standard_normal((1, 8)), rng.standard_normal((1, 8)),
            step=step, seed=seed), PRIMITIVE_TOL),
        CheckResult("attention_block", _block_check(seed, step), PRIMITIVE_TOL),
        CheckResult("cosine_similarity", _cosine_check(seed, step), PRIMITIVE_TOL),
        CheckResult("infonce", _infonce_check(seed, step), PRIMITIVE_TOL),
    ]
    for kind in (FusionKind.ADDITION, FusionKind.LATE, FusionKind.CONCAT_FC,
                 FusionKind.XATTN):
        results.append(CheckResult(
            f"fusion_{kind.value}", _fusion_check(kind, seed, step), PRIMITIVE_TOL))
    for fusion in ("addition", "late", "concat_fc", "xattn", "stacking"):
        results.append(CheckResult(
            f"end_to_end_{fusion}", end_to_end_check(fusion=fusion, seed=seed,
                                                     step=step), END_TO_END_TOL))
    for modality in ("video", "audio"):
        results.append(CheckResult(
            f"end_to_end_{modality}_only",
            end_to_end_check(modality=modality, seed=seed, step=step),
            END_TO_END_TOL))
    return results
