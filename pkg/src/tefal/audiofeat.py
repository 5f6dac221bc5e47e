"""Raw-audio front end: adaptive-shift log-Mel filter bank and patch geometry.

The downstream audio encoder expects a fixed number of filter-bank frames
per clip.  Instead of truncating or padding long clips, the hop between
analysis windows is chosen per clip:

    f_shift [ms] = n_frm * 1000 / (sr * L_tar)

so that exactly ``L_tar`` frames tile the signal regardless of duration.
Filter-bank conventions follow the audio encoder family this front end
feeds: 16 kHz input, 25 ms Hamming windows, 128 triangular Mel filters on
the HTK scale spanning 0-8 kHz, natural log with a 1e-10 floor.
"""

import wave
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Waveform", "MelFilterBank", "PatchGrid",
    "adaptive_frame_shift", "compute_fbank", "zero_fbank",
    "patch_grid", "patch_count", "mel_filter_matrix",
    "hz_to_mel", "mel_to_hz", "read_wav",
    "SAMPLE_RATE", "LOG_FLOOR",
]

SAMPLE_RATE = 16_000
LOG_FLOOR = 1e-10
DEFAULT_TARGET_LENGTH = 1024
DEFAULT_N_MELS = 128
DEFAULT_WINDOW_MS = 25.0
DEFAULT_PATCH = 16
DEFAULT_STRIDE = 10
MEL_F_MAX = 8000.0


class AudioFormatError(ValueError):
    """Input audio does not meet the front end's requirements."""


@dataclass
class Waveform:
    """Mono PCM samples in [-1, 1] at a known sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise AudioFormatError("waveform is empty")
        if self.sample_rate <= 0:
            raise AudioFormatError(f"sample rate must be positive, got {self.sample_rate}")
        peak = float(np.max(np.abs(self.samples)))
        if peak > 1.0:
            raise AudioFormatError(f"samples must lie in [-1, 1]; peak is {peak:.4g}")

    @property
    def n_frm(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelFilterBank:
    """Log-Mel energies, exactly ``target_length`` rows per clip."""

    frames: np.ndarray           # (L_tar, n_mels)
    frame_shift_ms: float
    missing: bool = False        # all-zero stand-in for absent audio

    @property
    def target_length(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


@dataclass
class PatchGrid:
    """Geometry of overlapping patches tiling a (time, mel) feature map."""

    patch: int
    stride: int
    n_time: int
    n_freq: int

    @property
    def count(self) -> int:
        return self.n_time * self.n_freq


def adaptive_frame_shift(n_frm: int, sr: int, l_tar: int) -> float:
    """Per-clip hop in milliseconds yielding exactly ``l_tar`` frames."""
    if n_frm <= 0 or sr <= 0 or l_tar <= 0:
        raise ValueError(
            f"n_frm, sr, and l_tar must be positive, got {n_frm}, {sr}, {l_tar}")
    return n_frm * 1000.0 / (sr * l_tar)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_matrix(n_mels: int, n_fft: int, sr: int,
                      f_min: float = 0.0, f_max: float = MEL_F_MAX) -> np.ndarray:
    """Triangular HTK-scale filters over the rfft bins, shape (n_mels, bins)."""
    bin_freqs = np.arange(n_fft // 2 + 1) * (sr / n_fft)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    left, center, right = edges[:-2], edges[1:-1], edges[2:]
    up = (bin_freqs[None, :] - left[:, None]) / (center - left)[:, None]
    down = (right[:, None] - bin_freqs[None, :]) / (right - center)[:, None]
    return np.clip(np.minimum(up, down), 0.0, None)


def compute_fbank(w: Waveform, target_length: int = DEFAULT_TARGET_LENGTH,
                  n_mels: int = DEFAULT_N_MELS,
                  window_ms: float = DEFAULT_WINDOW_MS) -> MelFilterBank:
    """Log-Mel filter bank with the clip-adaptive frame shift.

    Frame ``k`` starts at ``round(k * f_shift * sr / 1000)`` samples; windows
    running past the end of the signal are zero-padded, which guarantees the
    row count.  Clips shorter than one analysis window are zero-padded to a
    single window (with a warning) rather than rejected.
    """
    if w.sample_rate != SAMPLE_RATE:
        raise AudioFormatError(
            f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate} Hz; "
            "resample upstream before feature extraction")
    window = round(SAMPLE_RATE * window_ms / 1000.0)
    samples = w.samples
    if samples.size < window:
        warnings.warn(
            f"clip of {samples.size} samples is shorter than one {window}-sample "
            "window; zero-padding", stacklevel=2)
        samples = np.concatenate([samples, np.zeros(window - samples.size)])

    n_frm = samples.size
    f_shift = adaptive_frame_shift(n_frm, SAMPLE_RATE, target_length)
    starts = np.round(np.arange(target_length) * f_shift * SAMPLE_RATE / 1000.0
                      ).astype(np.int64)
    padded = np.concatenate([samples, np.zeros(max(0, starts[-1] + window - n_frm))])
    frames = padded[starts[:, None] + np.arange(window)[None, :]]

    n_fft = 1 << (window - 1).bit_length()
    spectrum = np.abs(np.fft.rfft(frames * np.hamming(window), n=n_fft))
    mel = spectrum @ mel_filter_matrix(n_mels, n_fft, SAMPLE_RATE).T
    return MelFilterBank(frames=np.log(np.maximum(mel, LOG_FLOOR)),
                         frame_shift_ms=f_shift)


def zero_fbank(target_length: int = DEFAULT_TARGET_LENGTH,
               n_mels: int = DEFAULT_N_MELS) -> MelFilterBank:
    """All-zero filter bank standing in for a clip with no audio track."""
    return MelFilterBank(frames=np.zeros((target_length, n_mels)),
                         frame_shift_ms=0.0, missing=True)


def patch_grid(l_tar: int = DEFAULT_TARGET_LENGTH, n_mels: int = DEFAULT_N_MELS,
               patch: int = DEFAULT_PATCH, stride: int = DEFAULT_STRIDE) -> PatchGrid:
    """How many overlapping patches the audio encoder cuts from the features."""
    if patch <= 0 or stride <= 0:
        raise ValueError(f"patch and stride must be positive, got {patch}, {stride}")
    if patch > min(l_tar, n_mels):
        raise ValueError(
            f"patch size {patch} exceeds the {l_tar} x {n_mels} feature grid")
    return PatchGrid(
        patch=patch, stride=stride,
        n_time=(l_tar - patch) // stride + 1,
        n_freq=(n_mels - patch) // stride + 1,
    )


def patch_count(l_tar: int = DEFAULT_TARGET_LENGTH, n_mels: int = DEFAULT_N_MELS,
                patch: int = DEFAULT_PATCH, stride: int = DEFAULT_STRIDE) -> int:
    return patch_grid(l_tar, n_mels, patch, stride).count


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono RIFF WAV file.

    Stereo or non-16-bit files are rejected here; the sample rate is carried
    through and checked by :func:`compute_fbank`.
    """
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise AudioFormatError(
                f"expected mono input, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise AudioFormatError(
                f"expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)
