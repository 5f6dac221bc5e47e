"""Mini-batch contrastive training and the evaluation entry point.

One step: pairwise forward over the batch (every candidate conditioned on
every query text), symmetric InfoNCE loss, explicit backward, global
gradient-norm clipping, and an Adam update with decoupled weight decay and
optional cosine learning-rate decay.  Batches are drawn without replacement
each epoch and the last partial batch is dropped, so the in-batch negative
count is stable.  Everything is deterministic given the seed.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, TrainConfig
from .corpus import Corpus
from .linalg import ParamStore
from .model import (
    RetrievalModel,
    batch_loss_and_grads,
    create_model,
    named_parameters,
)
from .ranking import (
    EvalStats,
    RankingMetrics,
    compute_metrics,
    dual_softmax_postprocess,
    rank_exhaustive,
    ranks_from_similarity,
    rerank_two_stage,
    resolve_workers,
)

__all__ = ["TrainingDiverged", "AdamW", "TrainResult", "EvalResult",
           "train", "evaluate"]


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; carries the step and batch item ids."""


class AdamW:
    """Adam with decoupled weight decay over a :class:`ParamStore`."""

    def __init__(self, learning_rate: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, lr_scale: float = 1.0) -> None:
        t = store.step + 1
        lr = self.learning_rate * lr_scale
        for name, param in store.items():
            g = store.grad(name)
            m = self._m.setdefault(name, np.zeros_like(param))
            v = self._v.setdefault(name, np.zeros_like(param))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            param -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                           + self.weight_decay * param)
        store.step = t


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = store.global_grad_norm()
    if norm > max_norm:
        store.scale_grads(max_norm / norm)
    return min(norm, max_norm)


@dataclass
class TrainResult:
    model: RetrievalModel
    history: list[dict]
    config: TrainConfig
    steps: int = 0


def train(config: TrainConfig, corpus: Corpus) -> TrainResult:
    """Train a model described by ``config`` on ``corpus``.

    Returns the trained model with a per-epoch log of mean loss and
    temperature (plus R@1 probes when ``eval_every`` is set).
    """
    config.validate()
    if corpus.dim != config.dim:
        raise ConfigError(
            f"corpus embeds {corpus.dim} dims but config.dim is {config.dim}")
    if config.fusion == "stacking" and corpus.summary_tokens is None:
        raise ConfigError("stacking fusion needs audio summary rows, which this "
                          "corpus does not carry")
    if config.batch_size > len(corpus):
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds corpus size {len(corpus)}")

    model = create_model(
        seed=config.seed, dim=config.dim, proj_dim=config.proj_dim,
        fusion=config.fusion, modality=config.modality,
        tau=config.temperature_init, output_affine=config.output_affine)
    store = ParamStore(named_parameters(model, trainable_only=True))
    optimizer = AdamW(learning_rate=config.learning_rate, beta1=config.beta1,
                      beta2=config.beta2, eps=config.adam_eps,
                      weight_decay=config.weight_decay)

    shuffle_rng = np.random.default_rng(config.seed)
    steps_per_epoch = len(corpus) // config.batch_size
    total_steps = max(1, config.epochs * steps_per_epoch)
    history: list[dict] = []

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(corpus))
        losses = []
        for b in range(steps_per_epoch):
            batch = order[b * config.batch_size:(b + 1) * config.batch_size]
            loss, grads, _ = batch_loss_and_grads(model, corpus, batch)
            if not math.isfinite(loss):
                ids = [corpus.ids[i] for i in batch]
                raise TrainingDiverged(
                    f"non-finite loss at step {store.step} (epoch {epoch}); "
                    f"batch items: {ids}")
            store.zero_grad()
            store.accumulate(grads)
            clip_global_norm(store, config.grad_clip)
            lr_scale = (0.5 * (1.0 + math.cos(math.pi * store.step / total_steps))
                        if config.cosine_decay else 1.0)
            optimizer.step(store, lr_scale)
            model.temperature.project_()
            losses.append(loss)
        entry = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else None,
                 "tau": model.temperature.value}
        if config.eval_every and (epoch + 1) % config.eval_every == 0:
            probe = evaluate(model, corpus, workers=config.threads)
            entry["r1_t2v"] = probe.t2v.r1
        history.append(entry)

    return TrainResult(model=model, history=history, config=config,
                       steps=store.step)


@dataclass
class EvalResult:
    t2v: RankingMetrics
    v2t: RankingMetrics
    ranks_t2v: np.ndarray
    ranks_v2t: np.ndarray
    stats: EvalStats
    postprocess: list[str] = field(default_factory=list)
    k: int | None = None

    def as_dict(self) -> dict:
        return {
            "items": int(len(self.ranks_t2v)),
            "k": self.k,
            "postprocess": self.postprocess,
            "metrics": {"t2v": self.t2v.as_dict(), "v2t": self.v2t.as_dict()},
            "ranks": {"t2v": [int(r) for r in self.ranks_t2v],
                      "v2t": [int(r) for r in self.ranks_v2t]},
        }


def evaluate(model: RetrievalModel, corpus: Corpus, k: int | None = None,
             dsl_temp: float | None = None, workers: int = 1) -> EvalResult:
    """Rank the corpus in both directions and aggregate metrics.

    ``k`` switches from exhaustive scoring to two-stage re-ranking with a
    k-item shortlist.  ``dsl_temp`` enables dual-softmax re-scoring of the
    dense matrix, which requires the exhaustive path.
    """
    if len(corpus) == 0:
        raise ValueError("cannot evaluate an empty corpus")
    workers = resolve_workers(workers)
    n = len(corpus)
    postprocess: list[str] = []

    if k is None:
        result = rank_exhaustive(model, corpus, workers=workers)
        sim = result.sim
        stats = result.stats
        if dsl_temp is not None:
            postprocess.append(f"dsl(temp={dsl_temp:g})")
            ranks_t2v = ranks_from_similarity(
                dual_softmax_postprocess(sim, dsl_temp), corpus.ids)
            ranks_v2t = ranks_from_similarity(
                dual_softmax_postprocess(sim.T, dsl_temp), corpus.ids)
        else:
            ranks_t2v = result.ranks
            ranks_v2t = ranks_from_similarity(sim.T, corpus.ids)
    else:
        if dsl_temp is not None:
            raise ValueError("dual-softmax post-processing needs the dense "
                             "similarity matrix; drop k or drop dsl_temp")
        res_t2v = rerank_two_stage(model, corpus, k, workers=workers)
        res_v2t = rerank_two_stage(model, corpus, k, workers=workers,
                                   direction="v2t")
        ranks_t2v, ranks_v2t = res_t2v.ranks, res_v2t.ranks
        stats = EvalStats(
            stage1_comparisons=res_t2v.stats.stage1_comparisons
            + res_v2t.stats.stage1_comparisons,
            stage2_model_evals=res_t2v.stats.stage2_model_evals
            + res_v2t.stats.stage2_model_evals)

    return EvalResult(
        t2v=compute_metrics(ranks_t2v, n, "t2v"),
        v2t=compute_metrics(ranks_v2t, n, "v2t"),
        ranks_t2v=ranks_t2v,
        ranks_v2t=ranks_v2t,
        stats=stats,
        postprocess=postprocess,
        k=k,
    )
