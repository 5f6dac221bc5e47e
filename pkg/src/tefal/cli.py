"""Command-line harness.

Subcommands: synth, train, eval, rerank, fbank, gradcheck, export-attn.
Exit codes: 0 on success, 1 on a runtime failure (with a diagnostic on
stderr), 2 on usage errors.  Runs are reproducible: the same argv and seed
produce byte-identical artifacts.  Model geometry (dim, frames, audio
tokens) always comes from the loaded data, not from flags.
"""

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .attention import export_attention_weights
from .audiofeat import compute_fbank, read_wav
from .config import load_config
from .corpus import Corpus, synth_corpus
from .ranking import resolve_workers
from .storage import load_checkpoint, load_corpus, save_checkpoint, save_corpus, write_fbank
from .training import evaluate, train
from .verify import run_grad_checks


def _round4(value: float) -> float:
    return round(float(value), 4)


def _metrics_json(result) -> dict:
    data = result.as_dict()
    for direction in data["metrics"]:
        data["metrics"][direction] = {
            key: _round4(val) for key, val in data["metrics"][direction].items()}
    return data


def _emit_json(data: dict, out_path: str | None) -> None:
    text = json.dumps(data, indent=2) + "\n"
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _parse_k(raw: str | None, n: int) -> int | None:
    if raw is None:
        return None
    raw = raw.strip()
    if raw.endswith("%"):
        pct = float(raw[:-1])
        if not 0 < pct <= 100:
            raise ValueError(f"shortlist percentage must be in (0, 100], got {raw!r}")
        return max(1, round(n * pct / 100.0))
    return int(raw)


def _load_corpus_or_fail(path: str) -> Corpus:
    corpus = load_corpus(path)
    if len(corpus) == 0:
        raise ValueError(f"{path}: corpus has no items")
    return corpus


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    corpus = synth_corpus(seed=args.seed, n_items=args.items, dim=args.dim,
                          frames=args.frames, audio_tokens=args.audio_tokens,
                          audio_informative=args.audio_informative,
                          noise=args.noise)
    manifest = save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} items to {manifest}")
    return 0


def _cmd_train(args) -> int:
    corpus = _load_corpus_or_fail(args.data)
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.learning_rate, "seed": args.seed,
        "fusion": args.fusion, "modality": args.modality,
        "threads": args.threads,
    }
    config = load_config(args.config, {k: v for k, v in overrides.items()
                                       if v is not None})
    config = dataclasses.replace(
        config, dim=corpus.dim, proj_dim=corpus.dim,
        frames=corpus.frame_count, audio_tokens=corpus.audio_token_count)
    result = train(config, corpus)
    for entry in result.history:
        tau = f"{entry['tau']:.4f}"
        print(f"epoch {entry['epoch']:3d}  loss {entry['loss']:.6f}  tau {tau}")
    save_checkpoint(args.out, result.model, result.steps, result.config)
    print(f"wrote checkpoint to {args.out}")
    if args.log:
        _emit_json({"history": [
            {k: (_round4(v) if isinstance(v, float) else v)
             for k, v in entry.items()} for entry in result.history]}, args.log)
    return 0


def _eval_common(args, k_required: bool) -> int:
    corpus = _load_corpus_or_fail(args.data)
    model, _step, config = load_checkpoint(args.checkpoint)
    k = _parse_k(args.k, len(corpus))
    if k_required and k is None:
        raise ValueError("rerank requires --k")
    workers = resolve_workers(args.threads if args.threads else config.threads)
    result = evaluate(model, corpus, k=k,
                      dsl_temp=getattr(args, "dsl_temp", None), workers=workers)
    _emit_json(_metrics_json(result), args.out)
    return 0


def _cmd_eval(args) -> int:
    return _eval_common(args, k_required=False)


def _cmd_rerank(args) -> int:
    return _eval_common(args, k_required=True)


def _cmd_fbank(args) -> int:
    waveform = read_wav(args.infile)
    fbank = compute_fbank(waveform, target_length=args.target_length,
                          n_mels=args.mels)
    write_fbank(args.out, fbank)
    print(f"wrote {fbank.target_length} x {fbank.n_mels} filter bank "
          f"(shift {fbank.frame_shift_ms:.4f} ms) to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_grad_checks(seed=args.seed)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:28s} {r.error:12.4e}  (tolerance {r.threshold:g})  {status}")
        failed |= not r.passed
    print(f"max relative error: {max(r.error for r in results):.4e}")
    return 1 if failed else 0


def _cmd_export_attn(args) -> int:
    corpus = _load_corpus_or_fail(args.data)
    model, _step, config = load_checkpoint(args.checkpoint)
    rows = []
    for i, item_id in enumerate(corpus.ids):
        text = corpus.texts[i:i + 1]
        if config.modality != "audio":
            weights = export_attention_weights(model.video, text, corpus.frames[i])
            rows.append((item_id, "video", weights[0]))
        if config.modality != "video":
            weights = export_attention_weights(model.audio, text, corpus.audio[i])
            rows.append((item_id, "audio", weights[0]))
    if args.format == "json":
        _emit_json({"items": [
            {"id": item_id, "modality": modality,
             "weights": [_round4(w) for w in weights]}
            for item_id, modality, weights in rows]}, args.out)
    else:
        with open(args.out, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            for item_id, modality, weights in rows:
                writer.writerow([item_id, modality]
                                + [f"{w:.6f}" for w in weights])
        print(f"wrote {len(rows)} weight rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tefal",
        description="Text-conditioned audio/video retrieval engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus (EMB1 + manifest)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--items", type=int, default=1000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--audio-tokens", type=int, default=8)
    p.add_argument("--audio-informative", type=float, default=0.5,
                   help="fraction of items whose audio carries text-correlated signal")
    p.add_argument("--noise", type=float, default=0.7)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus manifest")
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--fusion",
                   choices=["addition", "late", "concat_fc", "xattn", "stacking"])
    p.add_argument("--modality", choices=["both", "video", "audio"])
    p.add_argument("--threads", type=int)
    p.add_argument("--log", help="write the per-epoch history as JSON")
    p.set_defaults(handler=_cmd_train)

    for name, k_required in (("eval", False), ("rerank", True)):
        p = sub.add_parser(name, help="rank a corpus and report metrics"
                           if name == "eval" else
                           "two-stage re-ranking with a top-k shortlist")
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--k", required=k_required,
                       help="shortlist size, absolute or a percentage like 10%%")
        if name == "eval":
            p.add_argument("--dsl-temp", type=float, default=None,
                           help="dual-softmax post-processing temperature")
        p.add_argument("--threads", type=int, default=0)
        p.add_argument("--out", help="write metrics JSON here instead of stdout")
        p.set_defaults(handler=_cmd_eval if name == "eval" else _cmd_rerank)

    p = sub.add_parser("fbank", help="log-Mel filter bank from a 16 kHz mono WAV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-length", type=int, default=1024)
    p.add_argument("--mels", type=int, default=128)
    p.set_defaults(handler=_cmd_fbank)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("export-attn", help="export attention weights per item")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(handler=_cmd_export_attn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
