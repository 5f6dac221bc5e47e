"""In-memory corpus of aligned text / video-frame / audio-token embeddings.

Items are stored as uniform arrays (every item has the same frame count and
audio token count, matching the on-disk container).  Missing audio is
represented by all-zero token rows with the ``has_audio`` flag cleared.

``synth_corpus`` builds a controlled benchmark: each item has a primary
latent visible in its frames, and an ``audio_informative`` fraction of items
additionally carry a second latent that appears in the text and the audio
tokens but in none of the frames.  Audio is then genuinely complementary:
a retriever that reads it has strictly more signal than one that does not.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .fusion import audio_summary
from .linalg import ShapeError

__all__ = ["Corpus", "synth_corpus"]


@dataclass
class Corpus:
    """Aligned embedding triples, one per item.

    ``texts`` is (n, D); ``frames`` is (n, F, D); ``audio`` is (n, N_a, D).
    ``summary_tokens`` optionally holds the audio class/distillation rows
    (n, 2, D) used by the stacking fusion variant.
    """

    ids: list[str]
    texts: np.ndarray
    frames: np.ndarray
    audio: np.ndarray
    has_audio: np.ndarray
    summary_tokens: np.ndarray | None = None
    _summary_rows: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise ValueError("item ids must be unique")
        if self.texts.shape[0] != n or self.frames.shape[0] != n or self.audio.shape[0] != n:
            raise ShapeError("texts, frames, and audio must have one entry per item")
        if self.texts.ndim != 2 or self.frames.ndim != 3 or self.audio.ndim != 3:
            raise ShapeError("texts must be (n, D); frames and audio must be (n, rows, D)")
        dim = self.texts.shape[1]
        if self.frames.shape[2] != dim or self.audio.shape[2] != dim:
            raise ShapeError(
                f"embedding dims disagree: text {dim}, frames {self.frames.shape[2]}, "
                f"audio {self.audio.shape[2]}")
        if self.summary_tokens is not None and (
                self.summary_tokens.shape != (n, 2, dim)):
            raise ShapeError(
                f"summary tokens must be (n, 2, {dim}), got {self.summary_tokens.shape}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.texts.shape[1]

    @property
    def frame_count(self) -> int:
        return self.frames.shape[1]

    @property
    def audio_token_count(self) -> int:
        return self.audio.shape[1]

    @property
    def n_videos(self) -> int:
        return len(self.ids)

    @property
    def n_audios(self) -> int:
        return int(np.sum(self.has_audio))

    def summary_rows(self) -> np.ndarray:
        """Per-item audio summary rows (n, D): mean of class and dist rows."""
        if self.summary_tokens is None:
            raise ValueError("corpus has no audio summary tokens; the stacking "
                             "fusion variant is unavailable")
        if self._summary_rows is None:
            rows = [audio_summary(self.summary_tokens[i, 0:1, :],
                                  self.summary_tokens[i, 1:2, :])
                    for i in range(len(self.ids))]
            self._summary_rows = np.concatenate(rows, axis=0)
        return self._summary_rows

    def subset(self, indices) -> "Corpus":
        indices = np.asarray(indices, dtype=np.intp)
        return Corpus(
            ids=[self.ids[i] for i in indices],
            texts=self.texts[indices],
            frames=self.frames[indices],
            audio=self.audio[indices],
            has_audio=self.has_audio[indices],
            summary_tokens=None if self.summary_tokens is None
            else self.summary_tokens[indices],
        )


def synth_corpus(seed: int, n_items: int = 1000, dim: int = 32, frames: int = 4,
                 audio_tokens: int = 8, audio_informative: float = 0.5,
                 noise: float = 0.7) -> Corpus:
    """Deterministic synthetic corpus with controllable audio usefulness.

    ``audio_informative`` is the fraction of items whose audio tokens carry
    a second latent present in the text but absent from every frame; the
    remaining items get uninformative noise tokens.  At 0 the audio channel
    is useless for retrieval; near 1 with small ``noise`` it alone retrieves
    well above chance.

    Text and frames share one basis (their real encoders are pre-aligned);
    the audio tokens render their latent through a fixed random rotation,
    mimicking an audio encoder whose space is unaligned with the text/video
    space and must be mapped by the audio block's projections.
    """
    if not 0.0 <= audio_informative <= 1.0:
        raise ValueError(f"audio_informative must be in [0, 1], got {audio_informative}")
    if n_items < 1 or dim < 1 or frames < 1 or audio_tokens < 1:
        raise ValueError("n_items, dim, frames, and audio_tokens must be positive")

    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(dim)

    def draw(*shape):
        return rng.standard_normal(shape) * scale

    primary = draw(n_items, dim)
    secondary = draw(n_items, dim)
    informative = np.zeros(n_items, dtype=bool)
    informative[rng.permutation(n_items)[:round(audio_informative * n_items)]] = True

    texts = primary + np.where(informative[:, None], secondary, 0.0) \
        + noise * draw(n_items, dim)

    n_distract = frames // 3
    frame_arr = primary[:, None, :] + noise * draw(n_items, frames, dim)
    if n_distract:
        frame_arr[:, frames - n_distract:, :] = draw(n_items, n_distract, dim)

    rotation = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    n_carrier = max(1, audio_tokens // 2)
    audio_arr = draw(n_items, audio_tokens, dim)
    carrier = (secondary @ rotation)[:, None, :] + noise * draw(n_items, n_carrier, dim)
    audio_arr[informative, :n_carrier, :] = carrier[informative]

    token_mean = audio_arr.mean(axis=1)
    summary_tokens = token_mean[:, None, :] + 0.5 * noise * draw(n_items, 2, dim)

    return Corpus(
        ids=[f"item{i:05d}" for i in range(n_items)],
        texts=texts,
        frames=frame_arr,
        audio=audio_arr,
        has_audio=np.ones(n_items, dtype=bool),
        summary_tokens=summary_tokens,
    )
