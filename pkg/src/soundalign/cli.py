"""Command-line entry point: ``soundalign <subcommand> [flags]``.

Subcommands: synth-data, train, eval, embed, export-conditioning. The
config file comes from ``--config`` or the ``SSOUNDS_CONFIG`` environment
variable; ``--set section.key=value`` and the dedicated flags override it.
Every artifact is written atomically, and each text table has a JSON twin.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

from ._binio import atomic_write
from .alignment import forward, write_conditioning
from .config import ExperimentConfig, load_config
from .encoders import EmbeddingArchive, FrozenEncoders, read_raw_f32, read_wav, write_embedding_archive
from .errors import ConfigurationError, SoundAlignError
from .evaluation import evaluate_retrieval, mix_probe_grid, volume_probe, volume_variants
from .training import (Corpus, TrainingDiverged, generate_synthetic_corpus, load_checkpoint, load_corpus,
                       save_checkpoint, save_corpus, train)

logger = logging.getLogger("soundalign")


def _write_text(path: str, text: str) -> None:
    atomic_write(path, lambda f: f.write(text), mode="w")


def _write_json(path: str, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set {item!r}: expected section.key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config(args, extra: dict[str, str] | None = None) -> ExperimentConfig:
    path = args.config or os.environ.get("SSOUNDS_CONFIG") or None
    overrides = _overrides(args)
    overrides.update(extra or {})
    return load_config(path, overrides)


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    corpus = generate_synthetic_corpus(args.classes, args.per_class, args.seed or 0, args.duration,
                                       val_fraction=args.val_fraction)
    save_corpus(corpus, _out_dir(args))
    logger.info("wrote %d clips (%d train / %d val) to %s", len(corpus.clips), len(corpus.train),
                len(corpus.val), args.out)
    return 0


def cmd_train(args) -> int:
    extra = {}
    if args.seed is not None:
        extra.update({"training.seed": str(args.seed), "model.seed": str(args.seed)})
    for flag, key in (("lr_text", "training.lr_text"), ("lr_vision", "training.lr_vision"),
                      ("max_epochs", "training.max_epochs"), ("patience", "training.patience")):
        value = getattr(args, flag)
        if value is not None:
            extra[key] = str(value)
    if args.ext:
        extra["training.ext_loss_enabled"] = "true"
    config = _config(args, extra)
    corpus = load_corpus(args.data)
    out = _out_dir(args)
    try:
        ckpt = train(corpus, config, out_dir=out)
    except TrainingDiverged as exc:
        save_checkpoint(exc.checkpoint, os.path.join(out, "diverged.ssck"))
        raise
    save_checkpoint(ckpt, os.path.join(out, "model.ssck"))
    first, best = ckpt.history[0], ckpt.history[ckpt.best_epoch]
    summary = {"epochs": ckpt.epoch, "best_epoch": ckpt.best_epoch, "initial_val_loss": first["val_loss"],
               "best_val_loss": ckpt.best_val_loss, "final_val_loss": ckpt.history[-1]["val_loss"],
               "best_val_text": best["val_text"], "best_val_vision": best["val_vision"],
               "config_hash": ckpt.config_hash.hex()}
    _write_json(os.path.join(out, "summary.json"), summary)
    logger.info("trained %d epochs, best val %.6f at epoch %d", ckpt.epoch, ckpt.best_val_loss, ckpt.best_epoch)
    return 0


def _eval_clips(corpus: Corpus, split: str):
    return {"val": corpus.val_clips, "train": corpus.train_clips, "all": list(corpus.clips)}[split]


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model(args.which)
    encoders = FrozenEncoders(ckpt.config.encoders)
    corpus = load_corpus(args.data)
    clips = _eval_clips(corpus, args.split)
    k_list = [int(k) for k in args.k.split(",")]
    out = _out_dir(args)
    report = evaluate_retrieval(model, clips, corpus.captions, k_list, encoders)
    _write_json(os.path.join(out, "report.json"), report.to_dict())
    _write_text(os.path.join(out, "report.txt"), report.to_table())
    _write_text(os.path.join(out, "confusion.csv"), report.confusion_csv())
    if not args.quiet:
        sys.stdout.write(report.to_table())
    if args.probes:
        rules = ckpt.config.caption_rules()
        alphas = [float(a) for a in args.alphas.split(",")]
        rows, lines = [], [f"{'clip':<12}{'alpha':>7} {'volume':<8}{'winner':<9}{'margin':>9}"]
        for clip in clips:
            for r in volume_probe(model, clip, alphas, volume_variants(corpus.captions[clip.label], rules), encoders):
                rows.append({"clip": clip.source_id, **vars(r)})
                lines.append(f"{clip.source_id:<12}{r.alpha:>7.3f} {r.volume:<8}{r.winner:<9}{r.margin:>9.5f}")
        _write_json(os.path.join(out, "volume_probe.json"), rows)
        _write_text(os.path.join(out, "volume_probe.txt"), "\n".join(lines) + "\n")
        mix = mix_probe_grid(model, clips, corpus.captions, encoders, margin=args.margin, rules=rules)
        _write_json(os.path.join(out, "mix_probe.json"), mix.to_dict())
        grid = [f"{'u,v':<8}{'pass %':>8}"] + [f"{f'{u},{v}':<8}{r:>8.1f}" for (u, v), r in mix.grid().items()]
        grid.append(f"{'all':<8}{mix.pass_rate:>8.1f}")
        _write_text(os.path.join(out, "mix_probe.txt"), "\n".join(grid) + "\n")
    return 0


def cmd_embed(args) -> int:
    config = _config(args)
    encoders = FrozenEncoders(config.encoders)
    corpus = load_corpus(args.data)
    e = config.encoders
    archive = EmbeddingArchive(e.d_audio, e.d_text, e.d_vision)
    for clip in corpus.clips:
        archive.add(f"audio:{clip.source_id}", encoders.audio(clip))
    for c, caption in sorted(corpus.captions.items()):
        archive.add(f"text:{c}", encoders.text(caption))
        archive.add(f"vision:{c}", encoders.vision(caption)[None, :])
    path = os.path.join(_out_dir(args), "embeddings.ssea")
    write_embedding_archive(archive, path)
    logger.info("wrote %d entries to %s", len(archive.records), path)
    return 0


def _input_clips(args, corpus: Corpus | None):
    if corpus is not None:
        return list(corpus.clips)
    clips = []
    for path in args.inputs:
        if path.endswith(".wav"):
            clips.append(read_wav(path))
        else:
            clips.append(read_raw_f32(path, args.sample_rate, source_id=os.path.splitext(os.path.basename(path))[0]))
    return clips


def cmd_export_conditioning(args) -> int:
    if not args.data and not args.inputs:
        raise ConfigurationError("export-conditioning needs --data or input clip paths")
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model(args.which)
    encoders = FrozenEncoders(ckpt.config.encoders)
    corpus = load_corpus(args.data) if args.data else None
    pairs = {}
    for clip in _input_clips(args, corpus):
        length = args.text_len
        if length is None:
            if corpus is None:
                raise ConfigurationError("--text-len is required for clips without a caption")
            length = encoders.caption_record(clip.label, corpus.captions[clip.label]).length
        pair = forward(model, encoders.audio(clip), length)
        pairs[clip.source_id or clip.label] = (pair.z_hat_T.data, pair.z_hat_V.data)
    path = os.path.join(_out_dir(args), "conditioning.sscp")
    write_conditioning(path, {str(k): v for k, v in pairs.items()}, model.config.d_text, model.config.d_vision)
    logger.info("wrote %d conditioning pairs to %s", len(pairs), path)
    return 0


# ---------------------------------------------------------------------------
# parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI config file (default: $SSOUNDS_CONFIG)", **kw)
    p.add_argument("--seed", type=int, help="corpus seed (synth-data) or training/model seed (train)", **kw)
    p.add_argument("--out", help="output directory", **({"default": "."} | kw))
    p.add_argument("--quiet", action="store_true", help="only report errors", **kw)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soundalign", parents=[_global_flags(False)],
                                     description="Align audio tokens with frozen text and vision-text spaces.")
    sub = parser.add_subparsers(dest="command", required=True)
    # global flags may also follow the subcommand; suppressed defaults keep
    # the subparser from clobbering values given before it
    common = _global_flags(True)

    p = sub.add_parser("synth-data", parents=[common], help="generate the synthetic class corpus")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--duration", type=float, default=1.0, help="clip length in seconds")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train adapters and poolers")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--lr-text", type=float)
    p.add_argument("--lr-vision", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--ext", action="store_true", help="train on transformed and mixed clips too")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="retrieval report and controllability probes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--which", choices=("best", "last"), default="best")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--k", default="1,5", help="comma-separated recall cutoffs")
    p.add_argument("--probes", action="store_true", help="also run volume and mix probes")
    p.add_argument("--alphas", default="0.1,0.15,0.3,0.5,1.0")
    p.add_argument("--margin", type=float, default=0.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", parents=[common], help="cache frozen-encoder outputs")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("export-conditioning", parents=[common], help="write per-clip conditioning pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="corpus directory")
    p.add_argument("inputs", nargs="*", help="clip files (.wav or raw float32)")
    p.add_argument("--sample-rate", type=int, default=16000, help="rate of raw float32 inputs")
    p.add_argument("--text-len", type=int, help="text-branch output length (default: class caption length)")
    p.add_argument("--which", choices=("best", "last"), default="best")
    p.set_defaults(func=cmd_export_conditioning)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (SoundAlignError, OSError) as exc:
        print(f"soundalign {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
