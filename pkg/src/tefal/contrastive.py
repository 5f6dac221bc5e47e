"""Cosine similarity and the symmetric InfoNCE objective.

The loss treats the diagonal of a B x B similarity matrix as the positive
pairs and everything else in the batch as negatives, scaled by a learnable
temperature, and is applied in both retrieval directions:

    L = L_t2v + L_v2t
    L_t2v = -(1/B) sum_i log softmax_j(sim[i, :] * tau)[i]
    L_v2t = -(1/B) sum_i log softmax_j(sim[:, i] * tau)[i]
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError

TAU_MIN = 1.0
TAU_MAX = 100.0
TAU_INIT = 1.0 / 0.07


class ZeroNormWarning(UserWarning):
    """A zero-norm vector entered a cosine similarity; the score is 0."""


@dataclass
class Temperature:
    """Learnable softmax scale, parameterized as tau = exp(log_scale).

    ``value`` is clamped into [TAU_MIN, TAU_MAX]; the optimizer additionally
    projects ``log_scale`` back into range after each step, so the clamp is
    inactive (and the loss smooth) everywhere training normally operates.
    """

    log_scale: np.ndarray  # shape (1, 1)

    @classmethod
    def from_tau(cls, tau: float = TAU_INIT) -> "Temperature":
        if not TAU_MIN <= tau <= TAU_MAX:
            raise ValueError(f"tau must lie in [{TAU_MIN}, {TAU_MAX}], got {tau}")
        return cls(log_scale=np.array([[math.log(tau)]], dtype=np.float64))

    @property
    def value(self) -> float:
        return float(min(max(math.exp(self.log_scale[0, 0]), TAU_MIN), TAU_MAX))

    def project_(self) -> None:
        """Clamp log_scale in place so tau stays inside [TAU_MIN, TAU_MAX]."""
        self.log_scale[0, 0] = min(max(self.log_scale[0, 0], math.log(TAU_MIN)),
                                   math.log(TAU_MAX))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two row vectors, in [-1, 1].

    A zero-norm operand yields 0.0 with a :class:`ZeroNormWarning` rather
    than an error, so transient all-zero embeddings cannot abort training.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"vectors have shapes {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm vector in cosine similarity", ZeroNormWarning,
                      stacklevel=2)
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_rows(u: np.ndarray, f: np.ndarray, warn: bool = True):
    """Row-wise cosine between matching rows of ``u`` and ``f``.

    Returns ``(scores, cache)``; zero-norm rows score 0 and receive zero
    gradient from :func:`cosine_rows_backward`.
    """
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if u.shape != f.shape:
        raise ShapeError(f"row blocks have shapes {u.shape} and {f.shape}")
    nu = np.linalg.norm(u, axis=1)
    nf = np.linalg.norm(f, axis=1)
    # exact-zero test only: non-finite rows must propagate, not be masked
    zero = (nu == 0.0) | (nf == 0.0)
    if warn and np.any(zero):
        warnings.warn("zero-norm vector in cosine similarity", ZeroNormWarning,
                      stacklevel=2)
    denom = np.where(zero, 1.0, nu * nf)
    scores = np.where(zero, 0.0, np.sum(u * f, axis=1) / denom)
    return scores, (u, f, nu, nf, zero, scores)


def cosine_rows_backward(d_scores: np.ndarray, cache) -> np.ndarray:
    """Gradient of the scores w.r.t. the second argument ``f`` only (the
    first argument is raw query data in this engine).  Zero-norm rows get
    zero gradient."""
    u, f, nu, nf, zero, scores = cache
    denom = np.where(zero, 1.0, nu * nf)
    nf_sq = np.where(zero, 1.0, nf * nf)
    grad = (u / denom[:, None] - f * (scores / nf_sq)[:, None])
    grad = np.where(zero[:, None], 0.0, grad)
    return grad * d_scores[:, None]


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def infonce(sim: np.ndarray, temperature: Temperature):
    """Symmetric InfoNCE loss over a square similarity matrix.

    Returns ``(loss, d_sim, d_log_scale)``.  With B = 1 the loss is exactly
    zero (one positive, no negatives).  Transposing ``sim`` swaps the two
    directional terms and leaves the total unchanged.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    b = sim.shape[0]
    tau = temperature.value
    z = sim * tau

    log_p = _log_softmax_rows(z)          # text -> video, over rows
    log_q = _log_softmax_rows(z.T).T      # video -> text, over columns
    diag = np.arange(b)
    loss = -(log_p[diag, diag].sum() + log_q[diag, diag].sum()) / b

    p = np.exp(log_p)
    q = np.exp(log_q)
    eye = np.eye(b)
    d_z = ((p - eye) + (q - eye)) / b
    d_sim = d_z * tau
    # z = sim * tau and tau = exp(log_scale), so dL/dlog_scale = tau * sum(dL/dz * sim).
    # The bound constraint is owned by Temperature.project_ after each step,
    # so the gradient here is the smooth one.
    d_log_scale = np.array([[tau * float(np.sum(d_z * sim))]])
    return float(loss), d_sim, d_log_scale
