#!/usr/bin/env python3
"""The adaptive-shift filter bank: fixed-length features for any duration.

Clips of wildly different lengths all come out as 1024 x 128 log-Mel
matrices because the hop between analysis windows scales with the clip.
A pure tone shows up in the Mel bin whose filter brackets its frequency.
"""

import numpy as np

from tefal.audiofeat import (
    SAMPLE_RATE,
    Waveform,
    adaptive_frame_shift,
    compute_fbank,
    hz_to_mel,
    mel_to_hz,
    patch_count,
)

print("frame shift adapts to clip length (target 1024 frames):")
print(f"{'duration':>10s} {'samples':>10s} {'shift (ms)':>11s}")
for seconds in (1.0, 10.24, 32.0, 60.0, 300.0):
    n = int(seconds * SAMPLE_RATE)
    shift = adaptive_frame_shift(n, SAMPLE_RATE, 1024)
    print(f"{seconds:9.2f}s {n:10d} {shift:11.4f}")

print()
for seconds in (2.0, 45.0):
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    clip = Waveform(0.8 * np.sin(2 * np.pi * 1000.0 * t), SAMPLE_RATE)
    fb = compute_fbank(clip)
    peak = int(np.argmax(fb.frames.mean(axis=0)))
    edges = mel_to_hz(np.linspace(hz_to_mel(0), hz_to_mel(8000), 130))
    print(f"{seconds:5.1f}s 1 kHz tone -> {fb.frames.shape} features, "
          f"peak Mel bin {peak} spanning "
          f"{edges[peak]:.0f}-{edges[peak + 2]:.0f} Hz")

tokens = patch_count(1024, 128, 16, 10)
print(f"\n16x16 patches at stride 10 tile the 1024x128 map into {tokens} tokens,")
print("matching the audio encoder's input grid.")
