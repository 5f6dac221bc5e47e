"""Text-conditioned cross-attention pooling.

One block turns a query text embedding plus a bag of context tokens (video
frame embeddings, or audio patch embeddings) into a single conditioned
embedding:

    q = LN(text) W_q                          (query projection)
    k = LN(context) W_k,  v = LN(context) W_v (shared context normalization)
    pooled = softmax(q k^T / sqrt(d_p)) v     (single-head attention)
    out = LN(pooled W_o)                      (output projection + norm)

The block has no positional encoding, so the pooled output is invariant
under any joint permutation of the context rows; pooling sums are
canonicalized (see :func:`tefal.linalg.canonical_sum`) to make that
invariance hold bit-for-bit.

Two independent instances of the block (disjoint parameter sets) condition
the video and audio sides on the same text query.  Forward functions accept
either a single 1 x D text row or a stack of query rows, which evaluates the
block for every query against one shared context.
"""

import math
from dataclasses import dataclass

import numpy as np

from .linalg import (
    ShapeError,
    as_matrix,
    canonical_sum,
    layernorm_rows,
    layernorm_rows_backward,
    softmax_rows_backward,
)

__all__ = [
    "XAttnParams",
    "project",
    "attend",
    "conditioned_embedding",
    "export_attention_weights",
    "block_forward",
    "block_backward",
    "block_forward_each",
    "block_backward_each",
]


@dataclass
class XAttnParams:
    """Learnable state of one cross-attention block.

    ``w_q``, ``w_k``, ``w_v`` are D x D_p, ``w_o`` is D_p x D_p.  Three
    LayerNorm affines: query side (over the text row), context side (shared
    by the key and value paths), and output side.  ``output_affine=False``
    freezes the output affine at gain 1 / bias 0 instead of training it.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln_q_gain: np.ndarray
    ln_q_bias: np.ndarray
    ln_c_gain: np.ndarray
    ln_c_bias: np.ndarray
    ln_o_gain: np.ndarray
    ln_o_bias: np.ndarray
    output_affine: bool = True

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def proj_dim(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, proj_dim: int,
               output_affine: bool = True) -> "XAttnParams":
        """Initialize weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
        LayerNorm gains at 1 and biases at 0."""
        def uniform(rows, cols):
            limit = 1.0 / math.sqrt(rows)
            return rng.uniform(-limit, limit, size=(rows, cols))

        return cls(
            w_q=uniform(dim, proj_dim),
            w_k=uniform(dim, proj_dim),
            w_v=uniform(dim, proj_dim),
            w_o=uniform(proj_dim, proj_dim),
            ln_q_gain=np.ones((1, dim)),
            ln_q_bias=np.zeros((1, dim)),
            ln_c_gain=np.ones((1, dim)),
            ln_c_bias=np.zeros((1, dim)),
            ln_o_gain=np.ones((1, proj_dim)),
            ln_o_bias=np.zeros((1, proj_dim)),
            output_affine=output_affine,
        )

    def named(self) -> dict[str, np.ndarray]:
        """Trainable parameters by name (output affine only when enabled)."""
        out = {
            "w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o,
            "ln_q_gain": self.ln_q_gain, "ln_q_bias": self.ln_q_bias,
            "ln_c_gain": self.ln_c_gain, "ln_c_bias": self.ln_c_bias,
        }
        if self.output_affine:
            out["ln_o_gain"] = self.ln_o_gain
            out["ln_o_bias"] = self.ln_o_bias
        return out


def _stable_rows_times(rows: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Row block times weight matrix, each output row computed identically
    regardless of its position.

    BLAS GEMM kernels associate the reduction differently between full and
    edge panels, so ``(a @ w)[perm]`` and ``a[perm] @ w`` can differ in the
    last bit.  ``einsum`` (which does not dispatch to BLAS) reduces every
    output element in one fixed order, which the block's bit-exact
    permutation invariance relies on.
    """
    if rows.ndim == 3:
        return np.einsum("bnd,dp->bnp", rows, weight)
    return np.einsum("nd,dp->np", rows, weight)


def _check_context(params: XAttnParams, context: np.ndarray) -> np.ndarray:
    context = as_matrix(context, "context")
    if context.shape[1] != params.dim:
        raise ShapeError(
            f"context has {context.shape[1]} columns, block expects {params.dim}")
    return context


def _check_text(params: XAttnParams, text: np.ndarray) -> np.ndarray:
    text = as_matrix(text, "text")
    if text.shape[1] != params.dim:
        raise ShapeError(
            f"text has {text.shape[1]} columns, block expects {params.dim}")
    return text


def project(params: XAttnParams, text: np.ndarray, context: np.ndarray):
    """Query/key/value projections of the normalized text and context rows."""
    text = _check_text(params, text)
    context = _check_context(params, context)
    t_n = layernorm_rows(text, params.ln_q_gain, params.ln_q_bias)
    c_n = layernorm_rows(context, params.ln_c_gain, params.ln_c_bias)
    return (t_n @ params.w_q,
            _stable_rows_times(c_n, params.w_k),
            _stable_rows_times(c_n, params.w_v))


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Scaled dot-product attention of query rows over one shared context.

    Returns ``(pooled, weights)`` where ``weights`` rows sum to 1.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if k.shape != v.shape:
        raise ShapeError(f"k has shape {k.shape}, v has shape {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q has {q.shape[1]} columns, k has {k.shape[1]}")
    logits = np.einsum("bd,nd->bn", q, k) / math.sqrt(q.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    weights = e / canonical_sum(e, axis=1)[:, None]
    pooled = canonical_sum(weights[:, :, None] * v[None, :, :], axis=1)
    return pooled, weights


def conditioned_embedding(params: XAttnParams, text: np.ndarray,
                          context: np.ndarray) -> np.ndarray:
    """Full block: attention-pooled context, projected and normalized."""
    out, _ = block_forward(params, text, context)
    return out


def export_attention_weights(params: XAttnParams, text: np.ndarray,
                             context: np.ndarray) -> np.ndarray:
    """The softmax weights the text places over the context rows."""
    q, k, _v = project(params, text, context)
    _, weights = attend(q, k, _v)
    return weights


@dataclass
class BlockCache:
    """Forward intermediates needed by :func:`block_backward`."""
    text: np.ndarray
    context: np.ndarray
    t_n: np.ndarray
    c_n: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    pooled: np.ndarray
    proj: np.ndarray


def block_forward(params: XAttnParams, text: np.ndarray, context: np.ndarray):
    """Forward pass returning ``(out, cache)``; ``out`` has one row per query."""
    text = _check_text(params, text)
    context = _check_context(params, context)
    t_n = layernorm_rows(text, params.ln_q_gain, params.ln_q_bias)
    c_n = layernorm_rows(context, params.ln_c_gain, params.ln_c_bias)
    q = t_n @ params.w_q
    k = _stable_rows_times(c_n, params.w_k)
    v = _stable_rows_times(c_n, params.w_v)
    pooled, weights = attend(q, k, v)
    proj = pooled @ params.w_o
    out = layernorm_rows(proj, params.ln_o_gain, params.ln_o_bias)
    cache = BlockCache(text, context, t_n, c_n, q, k, v, weights, pooled, proj)
    return out, cache


def block_backward(params: XAttnParams, cache: BlockCache, d_out: np.ndarray):
    """Reverse the block.  Returns ``(grads, d_text, d_context)`` where
    ``grads`` is keyed like :meth:`XAttnParams.named` (output affine always
    included; callers drop it when frozen)."""
    scale = 1.0 / math.sqrt(params.proj_dim)

    d_proj, d_go, d_bo = layernorm_rows_backward(d_out, cache.proj, params.ln_o_gain)
    d_wo = cache.pooled.T @ d_proj
    d_pooled = d_proj @ params.w_o.T

    d_v = cache.weights.T @ d_pooled
    d_weights = d_pooled @ cache.v.T
    d_logits = softmax_rows_backward(d_weights, cache.weights)
    d_q = (d_logits @ cache.k) * scale
    d_k = (d_logits.T @ cache.q) * scale

    d_wk = cache.c_n.T @ d_k
    d_wv = cache.c_n.T @ d_v
    d_cn = d_k @ params.w_k.T + d_v @ params.w_v.T
    d_context, d_gc, d_bc = layernorm_rows_backward(d_cn, cache.context, params.ln_c_gain)

    d_wq = cache.t_n.T @ d_q
    d_tn = d_q @ params.w_q.T
    d_text, d_gq, d_bq = layernorm_rows_backward(d_tn, cache.text, params.ln_q_gain)

    grads = {
        "w_q": d_wq, "w_k": d_wk, "w_v": d_wv, "w_o": d_wo,
        "ln_q_gain": d_gq, "ln_q_bias": d_bq,
        "ln_c_gain": d_gc, "ln_c_bias": d_bc,
        "ln_o_gain": d_go, "ln_o_bias": d_bo,
    }
    return grads, d_text, d_context


# ---------------------------------------------------------------------------
# per-row contexts (used by the cross-attention fusion variant, where every
# query row attends over its own stacked pair of conditioned embeddings)
# ---------------------------------------------------------------------------

@dataclass
class BlockEachCache:
    text: np.ndarray
    contexts: np.ndarray      # (B, n, D)
    t_n: np.ndarray
    c_n: np.ndarray           # (B, n, D)
    q: np.ndarray
    k: np.ndarray             # (B, n, D_p)
    v: np.ndarray
    weights: np.ndarray       # (B, n)
    pooled: np.ndarray
    proj: np.ndarray


def block_forward_each(params: XAttnParams, text: np.ndarray, contexts: np.ndarray):
    """Like :func:`block_forward` but query row ``b`` attends over
    ``contexts[b]``.  ``contexts`` has shape (B, n, D)."""
    text = _check_text(params, text)
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.ndim != 3 or contexts.shape[0] != text.shape[0]:
        raise ShapeError(
            f"contexts must be (B, n, D) with B={text.shape[0]}, got {contexts.shape}")
    if contexts.shape[2] != params.dim:
        raise ShapeError(
            f"contexts have {contexts.shape[2]} columns, block expects {params.dim}")

    t_n = layernorm_rows(text, params.ln_q_gain, params.ln_q_bias)
    c_n = layernorm_rows(contexts, params.ln_c_gain, params.ln_c_bias)
    q = t_n @ params.w_q
    k = _stable_rows_times(c_n, params.w_k)
    v = _stable_rows_times(c_n, params.w_v)

    scale = 1.0 / math.sqrt(params.proj_dim)
    logits = np.einsum("bd,bnd->bn", q, k) * scale
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    weights = e / canonical_sum(e, axis=1)[:, None]
    pooled = canonical_sum(weights[:, :, None] * v, axis=1)
    proj = pooled @ params.w_o
    out = layernorm_rows(proj, params.ln_o_gain, params.ln_o_bias)
    cache = BlockEachCache(text, contexts, t_n, c_n, q, k, v, weights, pooled, proj)
    return out, cache


def block_backward_each(params: XAttnParams, cache: BlockEachCache, d_out: np.ndarray):
    """Backward for :func:`block_forward_each`; returns
    ``(grads, d_text, d_contexts)``."""
    scale = 1.0 / math.sqrt(params.proj_dim)

    d_proj, d_go, d_bo = layernorm_rows_backward(d_out, cache.proj, params.ln_o_gain)
    d_wo = cache.pooled.T @ d_proj
    d_pooled = d_proj @ params.w_o.T

    d_v = cache.weights[:, :, None] * d_pooled[:, None, :]
    d_weights = np.einsum("bd,bnd->bn", d_pooled, cache.v)
    d_logits = softmax_rows_backward(d_weights, cache.weights)
    d_q = np.einsum("bn,bnd->bd", d_logits, cache.k) * scale
    d_k = d_logits[:, :, None] * cache.q[:, None, :] * scale

    flat = cache.c_n.reshape(-1, params.dim)
    d_wk = flat.T @ d_k.reshape(-1, params.proj_dim)
    d_wv = flat.T @ d_v.reshape(-1, params.proj_dim)
    d_cn = d_k @ params.w_k.T + d_v @ params.w_v.T
    d_contexts, d_gc, d_bc = layernorm_rows_backward(
        d_cn, cache.contexts, params.ln_c_gain)

    d_wq = cache.t_n.T @ d_q
    d_tn = d_q @ params.w_q.T
    d_text, d_gq, d_bq = layernorm_rows_backward(d_tn, cache.text, params.ln_q_gain)

    grads = {
        "w_q": d_wq, "w_k": d_wk, "w_v": d_wv, "w_o": d_wo,
        "ln_q_gain": d_gq, "ln_q_bias": d_bq,
        "ln_c_gain": d_gc, "ln_c_bias": d_bc,
        "ln_o_gain": d_go, "ln_o_bias": d_bo,
    }
    return grads, d_text, d_contexts
