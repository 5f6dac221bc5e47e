"""Binary containers and the corpus manifest.

Embedding container ("EMB1"):

    magic "EMB1" | u32 version | u32 item_count | u32 rows_per_item |
    u32 cols | item_count * rows * cols float32 little-endian | u32 CRC32

Checkpoint container ("TFCK"):

    magic "TFCK" | u32 version | u32 param_count |
    per parameter: u16 name length | UTF-8 name | u32 rows | u32 cols |
                   rows * cols float32 little-endian |
    u32 CRC32

Both CRCs cover every preceding byte.  Filter-bank features reuse the EMB1
container with one item of shape (target_length, n_mels).  The checkpoint's
step counter and config snapshot travel as reserved ``__``-prefixed entries
(the config text encoded one codepoint per float32 cell), keeping the wire
format uniform.  All arrays are float32 on disk and float64 in memory.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .audiofeat import MelFilterBank
from .config import TrainConfig, config_to_text, parse_config_text
from .corpus import Corpus
from .model import RetrievalModel, create_model, named_parameters

__all__ = [
    "FormatError", "write_embeddings", "read_embeddings",
    "write_fbank", "read_fbank", "save_corpus", "load_corpus",
    "save_checkpoint", "load_checkpoint",
]

EMB_MAGIC = b"EMB1"
CKPT_MAGIC = b"TFCK"
EMB_VERSION = 1
CKPT_VERSION = 1
MANIFEST_VERSION = 1

_EMB_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """Corrupt, truncated, or mismatched on-disk data."""


def write_embeddings(path, items: np.ndarray) -> None:
    """Write an (item_count, rows, cols) array as an EMB1 file."""
    items = np.asarray(items)
    if items.ndim != 3:
        raise FormatError(f"embedding payload must be 3-D, got shape {items.shape}")
    count, rows, cols = items.shape
    payload = np.ascontiguousarray(items, dtype="<f4").tobytes()
    blob = _EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, count, rows, cols) + payload
    blob += struct.pack("<I", zlib.crc32(blob))
    Path(path).write_bytes(blob)


def read_embeddings(path) -> np.ndarray:
    """Read an EMB1 file into a float64 (item_count, rows, cols) array."""
    blob = Path(path).read_bytes()
    if len(blob) < _EMB_HEADER.size + 4:
        raise FormatError(f"{path}: file too short for an EMB1 header")
    magic, version, count, rows, cols = _EMB_HEADER.unpack_from(blob)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = _EMB_HEADER.size + 4 * count * rows * cols + 4
    if len(blob) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(blob)}")
    stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(blob[:-4]) != stored:
        raise FormatError(f"{path}: CRC mismatch")
    data = np.frombuffer(blob, dtype="<f4", count=count * rows * cols,
                         offset=_EMB_HEADER.size)
    return data.reshape(count, rows, cols).astype(np.float64)


def write_fbank(path, fbank: MelFilterBank) -> None:
    write_embeddings(path, fbank.frames[None, :, :])


def read_fbank(path) -> MelFilterBank:
    items = read_embeddings(path)
    if items.shape[0] != 1:
        raise FormatError(f"{path}: filter-bank file must hold exactly one item")
    frames = items[0]
    missing = not np.any(frames)
    return MelFilterBank(frames=frames, frame_shift_ms=0.0 if missing else float("nan"),
                         missing=missing)


# ---------------------------------------------------------------------------
# corpus manifest
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, directory) -> Path:
    """Write a corpus as EMB1 files plus a manifest; returns the manifest path.

    Items without audio get a null audio index; their zero token rows are
    reconstructed on load.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_embeddings(directory / "text.emb1", corpus.texts[:, None, :])
    write_embeddings(directory / "video.emb1", corpus.frames)

    files = {"text": "text.emb1", "video": "video.emb1"}
    audio_index = {}
    with_audio = [i for i in range(len(corpus)) if corpus.has_audio[i]]
    if with_audio:
        write_embeddings(directory / "audio.emb1", corpus.audio[with_audio])
        files["audio"] = "audio.emb1"
        audio_index = {i: slot for slot, i in enumerate(with_audio)}
    if corpus.summary_tokens is not None:
        write_embeddings(directory / "audio_summary.emb1", corpus.summary_tokens)
        files["audio_summary"] = "audio_summary.emb1"

    items = []
    for i, item_id in enumerate(corpus.ids):
        has = bool(corpus.has_audio[i])
        items.append({
            "id": item_id,
            "text": i,
            "video": i,
            "audio": audio_index[i] if has else None,
            "has_audio": has,
            "audio_summary": i if corpus.summary_tokens is not None else None,
        })
    manifest = {"version": MANIFEST_VERSION, "files": files, "items": items,
                "audio_tokens": int(corpus.audio_token_count)}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_corpus(manifest_path) -> Corpus:
    """Materialize a corpus from a manifest; missing audio becomes zero rows."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{manifest_path}: unsupported manifest version")
    base = manifest_path.parent
    files = manifest["files"]
    items = manifest["items"]
    if not items:
        raise FormatError(f"{manifest_path}: manifest lists no items")

    texts_file = read_embeddings(base / files["text"])
    video_file = read_embeddings(base / files["video"])
    audio_file = read_embeddings(base / files["audio"]) if "audio" in files else None
    summary_file = (read_embeddings(base / files["audio_summary"])
                    if "audio_summary" in files else None)

    if texts_file.shape[1] != 1:
        raise FormatError("text embeddings must have one row per item")
    dim = texts_file.shape[2]
    for name, arr in (("video", video_file), ("audio", audio_file),
                      ("audio_summary", summary_file)):
        if arr is not None and arr.shape[2] != dim:
            raise FormatError(
                f"dim disagreement: text has {dim} columns, {name} has {arr.shape[2]}")
    if summary_file is not None and summary_file.shape[1] != 2:
        raise FormatError("audio_summary entries must hold two rows (class, dist)")

    n_audio_tokens = (audio_file.shape[1] if audio_file is not None
                      else int(manifest.get("audio_tokens", 1)))

    ids, text_rows, frame_rows, audio_rows, has_audio, summary_rows = [], [], [], [], [], []
    for entry in items:
        ids.append(entry["id"])
        for key, arr in (("text", texts_file), ("video", video_file)):
            if not 0 <= entry[key] < arr.shape[0]:
                raise FormatError(
                    f"item {entry['id']!r}: {key} index {entry[key]} out of range "
                    f"[0, {arr.shape[0]})")
        text_rows.append(texts_file[entry["text"], 0])
        frame_rows.append(video_file[entry["video"]])
        has = bool(entry.get("has_audio", entry.get("audio") is not None))
        if has:
            if audio_file is None:
                raise FormatError(f"item {entry['id']!r}: has_audio set but the "
                                  "manifest lists no audio file")
            idx = entry["audio"]
            if idx is None or not 0 <= idx < audio_file.shape[0]:
                raise FormatError(
                    f"item {entry['id']!r}: audio index {idx} out of range "
                    f"[0, {audio_file.shape[0]})")
            audio_rows.append(audio_file[idx])
        else:
            audio_rows.append(np.zeros((n_audio_tokens, dim)))
        has_audio.append(has)
        if summary_file is not None:
            idx = entry.get("audio_summary")
            if idx is None or not 0 <= idx < summary_file.shape[0]:
                raise FormatError(
                    f"item {entry['id']!r}: audio_summary index {idx} out of range")
            summary_rows.append(summary_file[idx])

    return Corpus(
        ids=ids,
        texts=np.stack(text_rows),
        frames=np.stack(frame_rows),
        audio=np.stack(audio_rows),
        has_audio=np.array(has_audio, dtype=bool),
        summary_tokens=np.stack(summary_rows) if summary_rows else None,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _encode_entry(name: str, matrix: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    rows, cols = matrix.shape
    return (struct.pack("<H", len(encoded)) + encoded
            + struct.pack("<II", rows, cols)
            + np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def save_checkpoint(path, model: RetrievalModel, step: int,
                    config: TrainConfig) -> None:
    entries = [("__step__", np.array([[float(step)]])),
               ("__config__", _text_to_matrix(config_to_text(config)))]
    entries.extend(named_parameters(model, trainable_only=False).items())
    blob = struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(entries))
    for name, matrix in entries:
        blob += _encode_entry(name, matrix)
    blob += struct.pack("<I", zlib.crc32(blob))
    Path(path).write_bytes(blob)


def _text_to_matrix(text: str) -> np.ndarray:
    codes = np.array([[float(ord(c)) for c in text]])
    if codes.size == 0 or np.max(codes) >= 2 ** 20:
        raise FormatError("config text must be non-empty basic-plane text")
    return codes


def _matrix_to_text(matrix: np.ndarray) -> str:
    return "".join(chr(int(round(c))) for c in matrix.reshape(-1))


def load_checkpoint(path):
    """Returns ``(model, step, config)`` reconstructed from a TFCK file."""
    blob = Path(path).read_bytes()
    head = struct.calcsize("<4sII")
    if len(blob) < head + 4:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    magic, version, count = struct.unpack_from("<4sII", blob)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(blob[:-4]) != stored:
        raise FormatError(f"{path}: CRC mismatch")

    offset = head
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rows, cols = struct.unpack_from("<II", blob, offset)
        offset += 8
        data = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
        offset += 4 * rows * cols
        entries[name] = data.reshape(rows, cols).astype(np.float64)
    if offset != len(blob) - 4:
        raise FormatError(f"{path}: trailing bytes after parameter entries")

    try:
        step = int(entries.pop("__step__")[0, 0])
        config_text = _matrix_to_text(entries.pop("__config__"))
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint is missing {exc} entry") from None
    config = TrainConfig(**parse_config_text(config_text)).validate()

    model = create_model(seed=0, dim=config.dim, proj_dim=config.proj_dim,
                         fusion=config.fusion, modality=config.modality,
                         output_affine=config.output_affine)
    target = named_parameters(model, trainable_only=False)
    if set(target) != set(entries):
        missing = set(target) ^ set(entries)
        raise FormatError(f"{path}: parameter names do not match the config "
                          f"snapshot (difference: {sorted(missing)[:4]})")
    for name, arr in entries.items():
        if target[name].shape != arr.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {arr.shape}, "
                              f"expected {target[name].shape}")
        target[name][...] = arr
    return model, step, config
