#!/usr/bin/env python3
"""The binary containers: embeddings, manifest, checkpoint.

Everything round-trips bit-exactly (float32 on disk) and every file ends in
a CRC32, so a single flipped byte anywhere is caught on read.
"""

import tempfile
from pathlib import Path

import numpy as np

from tefal.config import TrainConfig
from tefal.corpus import synth_corpus
from tefal.model import create_model
from tefal.storage import (
    FormatError,
    load_checkpoint,
    load_corpus,
    read_embeddings,
    save_checkpoint,
    save_corpus,
    write_embeddings,
)

workdir = Path(tempfile.mkdtemp(prefix="tefal-formats-"))
print(f"working in {workdir}\n")

# embedding container
emb_path = workdir / "vectors.emb1"
write_embeddings(emb_path, np.random.default_rng(0).standard_normal((3, 2, 4)))
vectors = read_embeddings(emb_path)
print(f"embedding container: {vectors.shape} items, "
      f"{emb_path.stat().st_size} bytes on disk")

blob = bytearray(emb_path.read_bytes())
blob[30] ^= 0x40  # a payload byte, past the 20-byte header
emb_path.write_bytes(bytes(blob))
try:
    read_embeddings(emb_path)
except FormatError as exc:
    print(f"flipped one payload bit -> {exc}")

# corpus: three EMB1 files plus a JSON manifest
corpus = synth_corpus(seed=1, n_items=8, dim=16, frames=3, audio_tokens=4)
corpus.has_audio[5] = False
manifest = save_corpus(corpus, workdir / "corpus")
reloaded = load_corpus(manifest)
print(f"\ncorpus manifest: {len(reloaded)} items, "
      f"{reloaded.n_audios} with audio; missing audio loads as zero tokens: "
      f"{bool(np.all(reloaded.audio[5] == 0))}")

# checkpoint
model = create_model(seed=2, dim=16)
ckpt = workdir / "model.ckpt"
save_checkpoint(ckpt, model, step=7, config=TrainConfig(dim=16, proj_dim=16))
_, step, config = load_checkpoint(ckpt)
print(f"\ncheckpoint: step {step}, fusion {config.fusion!r}, "
      f"{ckpt.stat().st_size} bytes; config snapshot rides inside the file")
