"""``ser-forge`` command line: every experiment is a sequence of file-producing commands.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure
(non-finite loss or parameters), 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import container
from .audio import read_wav
from .data import DEFAULT_RATIOS, load_manifest, resolve_labels, split
from .errors import DivergenceError, ParseError, SerForgeError, VersionError
from .evaluation import evaluate
from .experiment import ExperimentConfig, run_experiment
from .features import SpectrogramConfig
from .model import ModelConfig, init_model
from .pipeline import Featurizer, featurize_split
from .synth import SynthSpec, domain_spec, synth_corpus
from .training import Checkpoint, TrainConfig, head_swap, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("ser_forge")


class UsageError(Exception):
    """Bad flags, missing inputs or invalid configuration (exit 2)."""


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for flags whose default is resolved at run time (``None``)."""

    def _get_help_string(self, action):
        if action.default is None or "(default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers -------------------------------------------------------------------

def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path) -> dict:
    p = _existing(path, "config file")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    return obj


def _load_ckpt(path) -> Checkpoint:
    return load_checkpoint(_existing(path, "checkpoint"))


def _load_manifest(path, labels, audio_root=None):
    manifest = load_manifest(_existing(path, "manifest"), labels)
    if audio_root is not None:
        manifest.root = _existing(audio_root, "audio root")
    return manifest


def _build(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise UsageError(f"{where}: unknown field(s) {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise UsageError(f"{where}: {exc}") from None


def _validated(obj, where: str):
    try:
        return obj.validate()
    except (SerForgeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}") from None


_D_MODEL = ModelConfig("raw_audio", 2)
_D_TRAIN = TrainConfig()
_D_SPEC = SpectrogramConfig()

# flag dest -> (config section, field)
_MODEL_FLAGS = {"pathway": "pathway", "d_model": "d_model", "n_layers": "n_layers", "n_heads": "n_heads",
                "ff_dim": "ff_dim", "conv_channels": "conv_channels", "dropout": "dropout",
                "max_tokens": "max_tokens"}
_TRAIN_FLAGS = {"epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate",
                "weight_decay": "weight_decay", "seed": "seed", "patience": "early_stop_patience",
                "class_weighting": "class_weighting"}
_SPEC_FLAGS = {f.name: f.name for f in fields(SpectrogramConfig)}


def _add_spectrogram_flags(p):
    g = p.add_argument_group("spectrogram frontend")
    for f in fields(SpectrogramConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(getattr(_D_SPEC, f.name)),
                       default=None, help=f"(default: {getattr(_D_SPEC, f.name)})")


def _overrides(args, mapping: dict) -> dict:
    return {field_: getattr(args, dest) for dest, field_ in mapping.items() if getattr(args, dest, None) is not None}


def _spectrogram_config(args, section: dict) -> SpectrogramConfig:
    merged = {**section, **_overrides(args, _SPEC_FLAGS)}
    cfg = _build(SpectrogramConfig, merged, "spectrogram")
    return _validated(cfg, "spectrogram")


# -- commands ------------------------------------------------------------------

def cmd_split(args) -> int:
    manifest = _load_manifest(args.manifest, args.labels)
    out = split(manifest, tuple(args.ratios), seed=args.seed, stratified=args.stratified)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out.save(out_path)
    counts = out.split_counts()
    print(f"train {counts['train']} val {counts['val']} test {counts['test']}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(_read_json(args.spec)) if args.spec else domain_spec(args.domain)
    if args.per_class is not None:
        spec = replace(spec, per_class=args.per_class)
    _validated(spec, "synth spec")
    manifest = synth_corpus(spec, args.seed, _out_dir(args.out))
    print(f"wrote {len(manifest)} files to {Path(args.out) / 'wav'}")
    return EXIT_OK


def cmd_featurize(args) -> int:
    clip = read_wav(_existing(args.wav, "wav file"))
    spec_cfg = _spectrogram_config(args, _read_json(args.config) if args.config else {})
    stats = None if args.stats is None else tuple(args.stats)
    featurizer = Featurizer(args.pathway, spec_cfg, stats)
    raw = featurizer.raw(clip)
    name = "waveform" if args.pathway == "raw_audio" else "log_mel"
    values = raw if args.pathway == "raw_audio" or stats is None else featurizer.finish(raw)
    header = {"kind": "features", "pathway": args.pathway, "source_id": clip.source_id,
              "normalized": args.pathway == "raw_audio" or stats is not None,
              "frontend_stats": None if stats is None else list(stats),
              "spectrogram_config": spec_cfg.to_dict() if args.pathway == "spectrogram" else None}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    container.write(out, header, {name: np.asarray(values, dtype=np.float32)})
    print(f"{name} {list(values.shape)} -> {out}")
    return EXIT_OK


def _resolve_train_config(args):
    cfg = _read_json(args.config) if args.config else {}
    unknown = sorted(set(cfg) - {"model", "train", "spectrogram", "manifest", "audio_root", "labels", "out",
                                 "init_from"})
    if unknown:
        raise UsageError(f"config: unknown section(s) {unknown}")
    for key in ("manifest", "audio_root", "labels", "out", "init_from"):
        if getattr(args, key) is None and key in cfg:
            setattr(args, key, cfg[key])
    if args.manifest is None:
        raise UsageError("train needs --manifest (or 'manifest' in the config file)")
    if args.out is None:
        raise UsageError("train needs --out (or 'out' in the config file)")
    train_cfg = _validated(_build(TrainConfig, {**cfg.get("train", {}), **_overrides(args, _TRAIN_FLAGS)},
                                  "train"), "train")
    return cfg, train_cfg


def cmd_train(args) -> int:
    cfg, train_cfg = _resolve_train_config(args)
    model_section = {**cfg.get("model", {}), **_overrides(args, _MODEL_FLAGS)}
    spec_cfg = _spectrogram_config(args, cfg.get("spectrogram", {}))

    if args.init_from:
        ckpt = _load_ckpt(args.init_from)
        labels = resolve_labels(args.labels) if args.labels else resolve_labels(ckpt.label_set)
        if tuple(labels) != ckpt.label_set:
            raise UsageError(f"--labels {list(labels)} do not match the checkpoint head {list(ckpt.label_set)}; "
                             "run swap-head first")
        pathway = model_section.pop("pathway", ckpt.model_config.pathway)
        if pathway != ckpt.model_config.pathway:
            raise UsageError(f"--pathway {pathway} conflicts with the {ckpt.model_config.pathway} checkpoint")
        extra = sorted(set(model_section) - {"dropout"})
        if extra:
            raise UsageError(f"model fields {extra} are fixed by the --init-from checkpoint")
        model = ckpt.to_model()
        model.config = _validated(replace(ckpt.model_config, **model_section), "model")
        if ckpt.spectrogram_config is not None:
            spec_cfg = ckpt.spectrogram_config
        provenance = ckpt.training_provenance
    else:
        labels = resolve_labels(args.labels or "SHEMO6")
        model_section.setdefault("pathway", "raw_audio")
        model_section["n_classes"] = len(labels)
        model_section.setdefault("seed", train_cfg.seed)
        model = init_model(_validated(_build(ModelConfig, model_section, "model"), "model"), tuple(labels))
        provenance = []

    manifest = _load_manifest(args.manifest, labels, args.audio_root)
    mcfg = model.config
    featurizer = Featurizer(mcfg.pathway, spec_cfg)
    train_set = featurize_split(manifest, "train", featurizer, fit_stats=True)
    val_set = featurize_split(manifest, "val", featurizer)
    for fs in (train_set, val_set):
        fs.patch_size, fs.patch_stride = mcfg.patch_size, mcfg.patch_stride
    result = train(model, train_set, val_set, train_cfg, frontend_stats=featurizer.stats,
                   spectrogram_config=spec_cfg if mcfg.pathway == "spectrogram" else None,
                   provenance=provenance, dataset_id=Path(args.manifest).name)
    out = _out_dir(args.out)
    save_checkpoint(result.checkpoint, out / "checkpoint.serf")
    (out / "history.json").write_text(result.history_json(), encoding="utf-8")
    _write_json(out / "run_config.json", {"model": mcfg.to_dict(), "train": train_cfg.to_dict(),
                                          "spectrogram": spec_cfg.to_dict(), "labels": list(labels),
                                          "manifest": str(args.manifest), "init_from": args.init_from})
    print(f"best epoch {result.best_epoch} val accuracy {result.best_val_accuracy:.4f} -> {out / 'checkpoint.serf'}")
    return EXIT_OK


def cmd_swap_head(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    try:
        swapped = head_swap(ckpt, tuple(resolve_labels(args.labels)), seed=args.seed)
    except SerForgeError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(swapped, out)
    print(f"{len(ckpt.label_set)} -> {len(swapped.label_set)} classes: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    try:
        manifest = _load_manifest(args.manifest, ckpt.label_set, args.audio_root)
    except SerForgeError as exc:
        raise UsageError(f"{exc}; swap the head to the manifest's label set first") from None
    metrics, cm = evaluate(ckpt, manifest, args.split)
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(metrics.to_json(), encoding="utf-8")
    (out / "confusion.txt").write_text(cm.to_text(), encoding="utf-8")
    print(f"accuracy {metrics.accuracy:.4f} balanced {metrics.balanced_accuracy:.4f} "
          f"macro_f1 {metrics.macro_f1:.4f} (n={metrics.n_examples})")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    clip = read_wav(_existing(args.wav, "wav file"))
    cfg = ckpt.model_config
    featurizer = Featurizer(cfg.pathway, ckpt.spectrogram_config, ckpt.frontend_stats)
    x = featurizer(clip)[None]
    if cfg.pathway == "spectrogram":
        from .features import patchify_batch
        x, _, _ = patchify_batch(x, cfg.patch_size, cfg.patch_stride)
    logits = ckpt.to_model().logits(np.asarray(x, dtype=np.float32))[0].astype(np.float64)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    best = int(np.argmax(logits))
    print(ckpt.label_set[best])
    width = max(len(n) for n in ckpt.label_set)
    for name, z, p in zip(ckpt.label_set, logits, probs):
        print(f"{name.ljust(width)}  logit {z:+.4f}  prob {p:.4f}")
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    cfg = ExperimentConfig.from_dict(_read_json(args.config)) if args.config else ExperimentConfig()
    if args.pathways:
        cfg.pathways = tuple(args.pathways)
    if args.seeds:
        cfg.seeds = tuple(args.seeds)
    if args.stage2_epochs is not None:
        cfg.stage2_epochs = args.stage2_epochs
    report = run_experiment(cfg, _out_dir(args.out))
    for pathway, entry in report["summary"].items():
        print(pathway, json.dumps(entry, sort_keys=True))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ser-forge", description="Speech emotion recognition toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    fmt = _HelpFormatter

    s = sub.add_parser("split", help="assign train/val/test splits", formatter_class=fmt)
    s.add_argument("--manifest", required=True, help="input manifest CSV")
    s.add_argument("--labels", default="SHEMO6", help="SHEMO6, SRC4 or a comma-separated list")
    s.add_argument("--ratios", type=float, nargs=3, default=list(DEFAULT_RATIOS), metavar=("TRAIN", "VAL", "TEST"),
                   help="split fractions")
    s.add_argument("--seed", type=int, default=0, help="permutation seed")
    s.add_argument("--stratified", action="store_true", help="split within each label")
    s.add_argument("--out", required=True, help="output manifest CSV")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("synth", help="generate a synthetic emotional-speech corpus", formatter_class=fmt)
    s.add_argument("--domain", choices=("tgt", "src"), default="tgt", help="built-in domain preset")
    s.add_argument("--spec", help="JSON generator spec (overrides --domain)")
    s.add_argument("--per-class", type=int, default=None, help="clips per label (default: 40)")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("featurize", help="write one clip's model input as a SERF file", formatter_class=fmt)
    s.add_argument("--wav", required=True, help="input WAV file")
    s.add_argument("--pathway", choices=("raw_audio", "spectrogram"), default="spectrogram", help="model input kind")
    s.add_argument("--config", help="JSON spectrogram config")
    s.add_argument("--stats", type=float, nargs=2, metavar=("MEAN", "STD"), default=None,
                   help="normalize the log-mel grid with corpus statistics")
    s.add_argument("--out", required=True, help="output .serf file")
    _add_spectrogram_flags(s)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="train or fine-tune a model", formatter_class=fmt)
    s.add_argument("--config", help="JSON run config; flags take precedence")
    s.add_argument("--manifest", help="split manifest CSV")
    s.add_argument("--audio-root", help="directory audio paths are relative to (default: manifest directory)")
    s.add_argument("--labels", help="SHEMO6, SRC4 or a comma-separated list (default: SHEMO6)")
    s.add_argument("--init-from", help="checkpoint to fine-tune instead of random init")
    s.add_argument("--out", help="output directory")
    g = s.add_argument_group("model")
    g.add_argument("--pathway", choices=("raw_audio", "spectrogram"), default=None, help="(default: raw_audio)")
    for dest in ("d_model", "n_layers", "n_heads", "ff_dim", "conv_channels"):
        g.add_argument("--" + dest.replace("_", "-"), dest=dest, type=int, default=None,
                       help=f"(default: {getattr(_D_MODEL, dest)})")
    g.add_argument("--max-tokens", type=int, default=None, help="(default: what a 5 s input needs)")
    g.add_argument("--dropout", type=float, default=None, help=f"(default: {_D_MODEL.dropout})")
    g = s.add_argument_group("optimization")
    g.add_argument("--epochs", type=int, default=None, help=f"(default: {_D_TRAIN.epochs})")
    g.add_argument("--batch-size", type=int, default=None, help=f"(default: {_D_TRAIN.batch_size})")
    g.add_argument("--lr", type=float, default=None, help=f"Adam learning rate (default: {_D_TRAIN.learning_rate})")
    g.add_argument("--weight-decay", type=float, default=None, help=f"(default: {_D_TRAIN.weight_decay})")
    g.add_argument("--seed", type=int, default=None, help=f"(default: {_D_TRAIN.seed})")
    g.add_argument("--patience", type=int, default=None,
                   help=f"early-stop patience in epochs (default: {_D_TRAIN.early_stop_patience})")
    g.add_argument("--class-weighting", action="store_true", default=None,
                   help="inverse-frequency loss weights (default: off)")
    _add_spectrogram_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("swap-head", help="replace the classification head", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="input checkpoint")
    s.add_argument("--labels", required=True, help="SHEMO6, SRC4 or a comma-separated list")
    s.add_argument("--seed", type=int, default=0, help="seed for the new head")
    s.add_argument("--out", required=True, help="output checkpoint file")
    s.set_defaults(func=cmd_swap_head)

    s = sub.add_parser("eval", help="metrics and confusion table on one split", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--manifest", required=True, help="split manifest CSV")
    s.add_argument("--audio-root", default=None, help="default: manifest directory")
    s.add_argument("--split", choices=("train", "val", "test"), default="test", help="which split to score")
    s.add_argument("--out", required=True, help="output directory for metrics.json and confusion.txt")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="classify one WAV file", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--wav", required=True, help="input WAV file")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("run-experiment", help="scratch and transfer protocols end to end", formatter_class=fmt)
    s.add_argument("--config", help="JSON experiment config")
    s.add_argument("--pathways", nargs="+", choices=("raw_audio", "spectrogram"), default=None,
                   help="(default: both)")
    s.add_argument("--seeds", type=int, nargs="+", default=None, help="(default: 0 1 2 3 4)")
    s.add_argument("--stage2-epochs", type=int, default=None,
                   help=f"matched fine-tuning budget (default: {ExperimentConfig().stage2_epochs})")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_run_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ser-forge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ser-forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"ser-forge {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, VersionError, OSError) as exc:
        print(f"ser-forge {args.command}: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SerForgeError, ValueError, KeyError) as exc:
        print(f"ser-forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
