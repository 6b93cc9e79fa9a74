"""Command-line entry point: ``spoofsplice <group> <command> [flags]``.

Configuration precedence is flag > ``--set key=value`` > ``--config`` JSON
file > built-in default.  Keys in the file and in ``--set`` are dotted
paths into a nested object, e.g. ``train.epochs`` or ``model.input_shape``.
Logs are ``key=value`` lines on standard error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .audio_io import AlignmentError, AudioFormatError, DegeneratePowerError, SampleRateError, read_wav
from .autodiff import NumericError, ShapeError
from .features import (CqtConfig, CqtConfigError, FeatureFileError, TooShortError, cqt, fit_frames,
                       write_features)
from .metrics import (TDCF_VARIANT, MetricError, TdcfConfig, eer, merge_to_binary, min_tdcf,
                      read_asv_rates, read_scores, sca, write_det)
from .model import (PRESETS, CheckpointError, ModelConfig, ModelConfigError, build, load_checkpoint,
                    save_checkpoint)
from .splicing import (GenerationError, SpliceConfigError, build_corpus, detect_boundaries,
                       write_decisions)
from .training import (CLASS_NAMES, LabelError, TrainConfigError, TrainingError, load_examples,
                       read_manifest, stack, train, write_log)

log = logging.getLogger("spoofsplice")

DOMAIN_ERRORS = (
    AudioFormatError, SampleRateError, AlignmentError, DegeneratePowerError, CqtConfigError,
    FeatureFileError, TooShortError, MetricError, ModelConfigError, CheckpointError, GenerationError,
    SpliceConfigError, LabelError, TrainConfigError, TrainingError, NumericError, ShapeError,
    FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError,
)

DEFAULTS: Dict[str, Any] = {
    "train": {"epochs": 50, "batch_size": 16, "lr": 1e-3, "mode": "2class"},
    "model": {},
    "splice": {"pairs_per_speaker": 1, "hop_frames": 8},
}


class UsageError(Exception):
    pass


# -- configuration -------------------------------------------------------

def parse_value(text: str) -> Any:
    """JSON if it parses (numbers, lists, true/false), otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(tree: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise UsageError(f"--set {key}: {part!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def merge(base: Dict[str, Any], over: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: Optional[str], overrides: Sequence[str]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    if path:
        try:
            tree = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config {path}: {exc}") from None
        if not isinstance(tree, dict):
            raise UsageError(f"--config {path}: top level must be an object")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        set_dotted(tree, key.strip(), parse_value(value))
    return merge(DEFAULTS, tree)


def pick(args: argparse.Namespace, cfg: Dict[str, Any], section: str, key: str) -> Any:
    flag = getattr(args, key, None)
    return flag if flag is not None else cfg.get(section, {}).get(key)


def model_config(name_or_path: str, overrides: Dict[str, Any]) -> ModelConfig:
    if name_or_path in PRESETS:
        base = PRESETS[name_or_path].to_dict()
    else:
        p = Path(name_or_path)
        if not p.exists():
            raise ModelConfigError(f"{name_or_path!r} is neither a preset ({', '.join(sorted(PRESETS))}) "
                                   "nor a JSON file")
        base = json.loads(p.read_text(encoding="utf-8"))
    return ModelConfig.from_dict(merge(base, overrides))


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{flag}: no such file {path}")
    return p


def _require_dir(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise NotADirectoryError(f"{flag}: no such directory {path}")
    return p


# -- commands ------------------------------------------------------------

def _extract(src: Path, dst: Path, frames: Optional[int], config: CqtConfig) -> None:
    spec = cqt(read_wav(src), config)
    if frames:
        spec = fit_frames(spec, frames)
    dst.parent.mkdir(parents=True, exist_ok=True)
    write_features(spec, dst)


def cmd_features_extract(args, cfg) -> int:
    config = CqtConfig()
    frames = args.frames
    if frames is not None and frames < 1:
        raise UsageError("--frames must be positive")
    out = Path(args.out)
    if args.wav:
        src = _require_file(args.wav, "--wav")
        _extract(src, out, frames, config)
        log.info("event=features wav=%s out=%s", src, out)
        return 0
    if args.in_dir:
        in_dir = _require_dir(args.in_dir, "--in")
        if (in_dir / "manifest.csv").is_file():
            manifest = in_dir / "manifest.csv"
        else:
            wavs = sorted(in_dir.rglob("*.wav"))
            for wav in wavs:
                _extract(wav, out / wav.relative_to(in_dir).with_suffix(".cqt"), frames, config)
            log.info("event=features in=%s count=%d out=%s", in_dir, len(wavs), out)
            return 0
    else:
        manifest = _require_file(args.manifest, "--manifest")
    out.mkdir(parents=True, exist_ok=True)
    rows = read_manifest(manifest)
    column = rows[0][1] if rows else "label"
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", column])
        for path, _, value in rows:
            name = Path(path).stem + ".cqt"
            _extract(Path(path), out / name, frames, config)
            w.writerow([name, value])
    log.info("event=features manifest=%s count=%d out=%s", manifest, len(rows), out)
    return 0


def cmd_train(args, cfg) -> int:
    train_manifest = _require_file(args.train, "--train")
    dev_manifest = _require_file(args.dev, "--dev")
    mode = args.mode
    if args.classes is not None:
        implied = f"{args.classes}class"
        if mode is not None and mode != implied:
            raise UsageError(f"--classes {args.classes} conflicts with --mode {mode}")
        mode = implied
    mode = mode or cfg["train"]["mode"]
    overrides = dict(cfg.get("model", {}))
    if args.variant:
        overrides["variant"] = args.variant
    if args.classes is not None or args.mode is not None:
        overrides["num_classes"] = 2 if mode == "2class" else 3
    else:
        overrides.setdefault("num_classes", 2 if mode == "2class" else 3)
    mcfg = model_config(args.model_config or f"default-{args.variant or 'plain'}", overrides)
    expected = 2 if mode == "2class" else 3
    if mcfg.num_classes != expected:
        raise TrainConfigError(f"mode {mode} needs num_classes={expected}, model has {mcfg.num_classes}")
    frames = mcfg.input_shape[0]
    train_set = load_examples(train_manifest, mode, frames)
    dev_set = load_examples(dev_manifest, mode, frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build(mcfg, seed=args.seed)
    log.info("event=train_start seed=%d params=%d train=%d dev=%d", args.seed, model.count_params(),
             len(train_set), len(dev_set))
    result = train(model, train_set, dev_set, epochs=int(pick(args, cfg, "train", "epochs")),
                   batch_size=int(pick(args, cfg, "train", "batch_size")), seed=args.seed,
                   lr=float(pick(args, cfg, "train", "lr")))
    result.best.metadata["mode"] = mode
    save_checkpoint(result.best, out / "best.ckpt")
    write_log(result.log, out / "train_log.csv")
    log.info("event=train_done best_epoch=%d best_dev_loss=%.6f out=%s", result.best_epoch,
             result.best_dev_loss, out)
    return 0


def cmd_score(args, cfg) -> int:
    model = load_checkpoint(_require_file(args.model, "--model"))
    manifest = _require_file(args.manifest, "--manifest")
    mode = "2class" if model.config.num_classes == 2 else "3class"
    examples = load_examples(manifest, mode, model.config.input_shape[0])
    x, y = stack(examples)
    probs = model.predict(x, batch_size=8)
    scores = merge_to_binary(probs)
    pred = np.argmax(probs, axis=1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "score", "truth", "label", "pred"])
        for e, s, p in zip(examples, scores, pred):
            w.writerow([e.utt_id, repr(float(s)), "bonafide" if e.label == 0 else "spoof", e.label, int(p)])
    log.info("event=score count=%d classes=%s out=%s", len(examples),
             ",".join(CLASS_NAMES[model.config.num_classes]), out)
    return 0


def _read_column(path: Path, column: str) -> Dict[str, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not {"utt_id", column} <= set(reader.fieldnames or []):
            raise MetricError(f"{path}: expected columns utt_id,{column}")
        return {r["utt_id"]: int(r[column]) for r in reader}


def cmd_metrics_sca(args, cfg) -> int:
    if args.scores:
        path = _require_file(args.scores, "--scores")
        pred, truth = _read_column(path, "pred"), _read_column(path, "label")
    elif args.pred and args.truth:
        pred = _read_column(_require_file(args.pred, "--pred"), "pred")
        truth = _read_column(_require_file(args.truth, "--truth"), "label")
        missing = sorted(set(pred) ^ set(truth))
        if missing:
            raise MetricError(f"--pred and --truth disagree on utterance {missing[0]!r}")
    else:
        raise UsageError("metrics sca needs --scores or both --pred and --truth")
    ids = sorted(truth)
    value = sca([pred[i] for i in ids], [truth[i] for i in ids])
    print(f"sca={value:.6f}")
    return 0


def cmd_metrics_eer(args, cfg) -> int:
    records = read_scores(_require_file(args.scores, "--scores"))
    value, threshold = eer(records)
    if args.det_out:
        write_det(records, args.det_out)
    print(f"eer={value:.6f} threshold={threshold!r}")
    return 0


def cmd_metrics_tdcf(args, cfg) -> int:
    records = read_scores(_require_file(args.scores, "--scores"))
    tcfg = TdcfConfig(**cfg.get("tdcf", {}))
    if args.asv_rates:
        tcfg = dataclasses.replace(tcfg, **read_asv_rates(_require_file(args.asv_rates, "--asv-rates")))
    value = min_tdcf(records, tcfg)
    print(f"min_tdcf={value:.6f} variant={TDCF_VARIANT}")
    return 0


def cmd_splice_generate(args, cfg) -> int:
    corpus = _require_dir(args.corpus, "--corpus")
    noise = None
    if args.noise:
        if args.snr is None:
            raise UsageError("--noise requires --snr")
        noise = (read_wav(_require_file(args.noise, "--noise")), float(args.snr))
    pairs = int(pick(args, cfg, "splice", "pairs_per_speaker"))
    records = build_corpus(corpus, args.out, noise, pairs, args.seed)
    log.info("event=splice_generate seed=%d records=%d out=%s", args.seed, len(records), args.out)
    return 0


def cmd_splice_detect(args, cfg) -> int:
    model = load_checkpoint(_require_file(args.model, "--model"))
    clip = read_wav(_require_file(args.wav, "--wav"))
    decisions = detect_boundaries(model, clip, hop_frames=int(pick(args, cfg, "splice", "hop_frames")))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_decisions(decisions, out)
    log.info("event=splice_detect chunks=%d positives=%d out=%s", len(decisions),
             sum(d.decision for d in decisions), out)
    return 0


def cmd_model_info(args, cfg) -> int:
    model = build(model_config(args.config_name, cfg.get("model", {})), seed=args.seed)
    print(f"variant={model.config.variant} input_shape={list(model.config.input_shape)} "
          f"classes={model.config.num_classes}")
    for i, layer in enumerate(model.manifest, 1):
        print(f"layer {i}: {layer}")
    print(f"params={model.count_params()}")
    return 0


# -- parser --------------------------------------------------------------

def _common(config_flag: str = "--config") -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="root seed for all randomness (default 0)")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all cores)")
    p.add_argument(config_flag, dest="config", help="JSON configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key, e.g. train.epochs=2 (repeatable)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="spoofsplice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"spoofsplice {__version__} "
                        f"(numpy {np.__version__}, python {sys.version.split()[0]})")
    groups = parser.add_subparsers(dest="group", metavar="{features,train,score,metrics,splice,model}",
                                   required=True)

    feats = groups.add_parser("features", help="feature extraction").add_subparsers(dest="command",
                                                                                  required=True)
    p = feats.add_parser("extract", parents=[common], help="CQT features for a WAV or a manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="in_dir", help="directory of WAVs (its manifest.csv is followed if present)")
    src.add_argument("--wav", help="single input WAV")
    src.add_argument("--manifest", help="CSV with path and label/attack_id columns")
    p.add_argument("--out", required=True, help="feature file (--wav) or output directory")
    p.add_argument("--frames", type=int, help="fit every matrix to this many frames (default: keep all)")
    p.set_defaults(func=cmd_features_extract)

    p = groups.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--train", required=True, help="training manifest CSV")
    p.add_argument("--dev", required=True, help="dev manifest CSV used for model selection")
    p.add_argument("--variant", choices=["plain", "conformer"],
                   help="architecture; without --model-config selects the default-<variant> preset")
    p.add_argument("--classes", type=int, choices=[2, 3], help="2 (bonafide/spoof) or 3 (bonafide/TTS/VC)")
    p.add_argument("--model-config", help="preset name or JSON model config (default default-plain)")
    p.add_argument("--mode", choices=["2class", "3class"], help="same as --classes (default 2class)")
    p.add_argument("--epochs", type=int, help="epochs (default 50)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="minibatch size (default 16)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    p.add_argument("--out", required=True, help="output directory for best.ckpt and train_log.csv")
    p.set_defaults(func=cmd_train)

    p = groups.add_parser("score", parents=[common], help="bonafide scores for a manifest")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--manifest", required=True, help="CSV with path and label/attack_id columns")
    p.add_argument("--out", required=True, help="scores CSV")
    p.set_defaults(func=cmd_score)

    mets = groups.add_parser("metrics", help="evaluation metrics").add_subparsers(dest="command",
                                                                                  required=True)
    p = mets.add_parser("sca", parents=[common], help="sparse categorical accuracy")
    p.add_argument("--scores", help="CSV with utt_id, label and pred columns (as written by score)")
    p.add_argument("--pred", help="CSV with utt_id,pred columns")
    p.add_argument("--truth", help="CSV with utt_id,label columns")
    p.set_defaults(func=cmd_metrics_sca)
    p = mets.add_parser("eer", parents=[common], help="equal error rate")
    p.add_argument("--scores", required=True, help="scores CSV (utt_id,score,truth)")
    p.add_argument("--det-out", dest="det_out", help="optional DET curve CSV")
    p.set_defaults(func=cmd_metrics_eer)
    p = mets.add_parser("tdcf", parents=[common], help="normalized minimum t-DCF")
    p.add_argument("--scores", required=True, help="scores CSV (utt_id,score,truth)")
    p.add_argument("--asv-rates", "--asv", dest="asv_rates",
                   help="ASV rates file (p_miss_asv, p_fa_asv, p_miss_spoof_asv)")
    p.set_defaults(func=cmd_metrics_tdcf)

    spl = groups.add_parser("splice", help="spliced corpora and boundary detection").add_subparsers(
        dest="command", required=True)
    p = spl.add_parser("generate", parents=[common], help="build a spliced corpus")
    p.add_argument("--corpus", required=True, help="directory of <speaker>/<utt>.wav + .wrd")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise", help="noise WAV mixed into host and donor before splicing")
    p.add_argument("--snr", type=float, help="noise SNR in dB (with --noise)")
    p.add_argument("--pairs-per-speaker", dest="pairs_per_speaker", type=int, help="default 1")
    p.set_defaults(func=cmd_splice_generate)
    p = spl.add_parser("detect", parents=[common], help="per-chunk boundary decisions")
    p.add_argument("--model", required=True, help="2-class chunk-model checkpoint")
    p.add_argument("--wav", required=True, help="input WAV")
    p.add_argument("--hop-frames", dest="hop_frames", type=int, help="window hop in frames (default 8)")
    p.add_argument("--out", required=True, help="decision CSV")
    p.set_defaults(func=cmd_splice_detect)

    mdl = groups.add_parser("model", help="model inspection").add_subparsers(dest="command", required=True)
    # here --config names the model; the JSON run configuration moves to --config-file
    p = mdl.add_parser("info", parents=[_common("--config-file")], help="layer manifest and parameter count")
    p.add_argument("--config", dest="config_name", required=True, help="preset name or JSON model config")
    p.set_defaults(func=cmd_model_info)
    return parser


def _setup_logging(level: str) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)


def dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    log.info("event=start command=%s seed=%d", " ".join(filter(None, [args.group, getattr(args, "command", None)])),
             args.seed)
    try:
        cfg = load_config(args.config, args.set)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args, cfg)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spoofsplice: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        log.error("event=error type=%s message=%s", type(exc).__name__, json.dumps(str(exc)))
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
