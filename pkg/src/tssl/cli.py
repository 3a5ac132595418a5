"""Command line entry point: ``tssl {synth,pretrain,finetune,eval,gradcheck,schema}``.

Exit codes: 0 success, 2 config or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as cfgmod
from . import features, metrics
from .numerics import NumericalError

logger = logging.getLogger("tssl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MANIFEST = "manifest.json"
_UNDIGESTED = {MANIFEST, "timing.csv"}  # wall-clock content is not reproducible


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digests(root: Path) -> dict:
    root = Path(root)
    if root.is_file():
        return {root.name: _sha256(root)}
    return {
        p.relative_to(root).as_posix(): _sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in _UNDIGESTED
    }


def combined_digest(root: Path) -> str:
    h = hashlib.sha256()
    for name, d in tree_digests(root).items():
        h.update(f"{name}\0{d}\n".encode())
    return h.hexdigest()


def write_manifest(out: Path, argv: List[str], config_path, resolved: dict, inputs: dict) -> None:
    manifest = {
        "command": argv,
        "config_path": None if config_path is None else str(config_path),
        "resolved_config": resolved,
        "inputs": inputs,
        "outputs": tree_digests(out),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _corpus_arrays(path):
    try:
        utts, class_map = features.load_corpus(path)
        frames = features.stack_frames(utts).astype(np.float32)
    except features.FeatureError as e:
        raise UsageError(str(e)) from None
    labels = np.array([u.label for u in utts], dtype=np.int64)
    return frames, labels, class_map


def _split(frames, labels, fraction: float, seed: int):
    if fraction <= 0:
        return (frames, labels), None
    order = np.random.default_rng(seed).permutation(len(frames))
    n_test = max(1, int(round(fraction * len(frames))))
    te, tr = np.sort(order[:n_test]), np.sort(order[n_test:])
    return (frames[tr], labels[tr]), (frames[te], labels[te])


def _precision_dtype(precision: str):
    return np.float64 if precision == "float64" else np.float32


# --- commands -----------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    spec = cfgmod.load_synth_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = features.synth_class_names(spec.num_classes)
    if args.format == "wav":
        counters = {}
        for k, _, pcm in features.synthesize_pcm(spec):
            (out / names[k]).mkdir(exist_ok=True)
            j = counters.get(k, 0)
            counters[k] = j + 1
            features.write_wav(out / names[k] / f"{j:05d}.wav", pcm)
    else:
        features.save_corpus(out, features.synthesize_corpus(spec), names)
    write_manifest(out, argv, args.spec, {"synth": spec.__dict__, "format": args.format},
                   {"spec": _sha256(Path(args.spec))})
    print(json.dumps({"out": str(out), "digest": combined_digest(out)}))
    return EXIT_OK


def cmd_pretrain(args, argv) -> int:
    from .trainer import pretrain

    method = args.method + ("+" if args.uwdb == "on" else "")
    model_cfg, train_cfg = cfgmod.load_config(
        args.config, {"method": method, "seed": args.seed, "epochs_pretrain": args.epochs,
                      "epochs_uwdb": args.uwdb_epochs, "precision": args.precision})
    frames, _, _ = _corpus_arrays(args.data)
    frames = frames.astype(_precision_dtype(train_cfg.precision))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, run = pretrain(train_cfg, frames, model_cfg, out, init_checkpoint=args.init, step1_checkpoint=args.step1)
    inputs = {"data": combined_digest(Path(args.data))}
    if args.step1:
        inputs["step1"] = _sha256(Path(args.step1))
    write_manifest(out, argv, args.config, cfgmod.resolved(model_cfg, train_cfg), inputs)
    print(json.dumps({"checkpoint": run.checkpoints[-1], "final_loss": run.epoch_means()[-1],
                      "lineage": run.lineage}))
    return EXIT_OK


def cmd_finetune(args, argv) -> int:
    from .trainer import finetune

    freeze = {"encoder": "encoder_frozen", "none": "none"}[args.freeze]
    model_cfg, train_cfg = cfgmod.load_config(
        args.config, {"freeze_mode": freeze, "seed": args.seed, "epochs_finetune": args.epochs,
                      "precision": args.precision, "method": "scratch" if args.checkpoint is None else None})
    frames, labels, class_map = _corpus_arrays(args.data)
    frames = frames.astype(_precision_dtype(train_cfg.precision))
    (tr_x, tr_y), test = _split(frames, labels, train_cfg.test_fraction, train_cfg.seed)
    if args.test is not None:
        te_x, te_y, te_map = _corpus_arrays(args.test)
        if te_map != class_map:
            raise UsageError("test corpus classes differ from the training corpus")
        test = (te_x.astype(tr_x.dtype), te_y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, run = finetune(train_cfg, tr_x, tr_y, len(class_map), args.checkpoint, model_cfg, test, out)
    (out / "classes.json").write_text(json.dumps(class_map, indent=2, sort_keys=True) + "\n")
    inputs = {"data": combined_digest(Path(args.data))}
    if args.checkpoint:
        inputs["checkpoint"] = _sha256(Path(args.checkpoint))
    write_manifest(out, argv, args.config, cfgmod.resolved(model_cfg, train_cfg), inputs)
    print(json.dumps({"checkpoint": run.checkpoints[-1], **{k: v[-1] for k, v in run.metrics.items() if v}}))
    return EXIT_OK


def _load_classifier(path):
    from .checkpoint import CheckpointError, load_model

    try:
        model, meta = load_model(path)
    except (CheckpointError, FileNotFoundError) as e:
        raise UsageError(str(e)) from None
    if model.classifier is None:
        raise UsageError(f"{path} has no classifier head; fine-tune it first")
    return model, meta.get("attention", "none")


def cmd_eval(args, argv) -> int:
    from .trainer import predict

    report: dict
    if args.mode == "relfar":
        if not (args.baseline and args.candidate):
            raise UsageError("relfar needs --baseline and --candidate trial files")
        try:
            report = metrics.relative_far_report(metrics.read_trials(args.candidate),
                                                 metrics.read_trials(args.baseline), args.threshold)
        except (metrics.MetricError, OSError) as e:
            raise UsageError(str(e)) from None
    else:
        if not (args.checkpoint and args.data):
            raise UsageError(f"{args.mode} needs --checkpoint and --data")
        model, attention = _load_classifier(args.checkpoint)
        frames, labels, class_map = _corpus_arrays(args.data)
        post = predict(model, frames, attention)
        if args.mode == "accuracy":
            report = {"accuracy": metrics.accuracy(post.argmax(1), labels), "n": int(len(labels))}
        else:
            if args.keyword is None:
                raise UsageError("trials mode needs --keyword")
            k = class_map.get(args.keyword)
            if k is None:
                k = int(args.keyword) if args.keyword.isdigit() else None
            if k is None or not 0 <= k < post.shape[1]:
                raise UsageError(f"unknown keyword {args.keyword!r}")
            if not args.trials_out:
                raise UsageError("trials mode needs --trials-out")
            metrics.write_trials(args.trials_out, post[:, k], labels == k)
            report = {"trials": args.trials_out, "keyword": k, "n": int(len(labels))}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text + "\n")
        inputs = {k: _sha256(Path(v)) for k, v in
                  (("baseline", args.baseline), ("candidate", args.candidate), ("checkpoint", args.checkpoint))
                  if v}
        if args.data:
            inputs["data"] = combined_digest(Path(args.data))
        write_manifest(out, argv, None, {"mode": args.mode, "threshold": args.threshold}, inputs)
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    from . import gradcheck

    coords = None if args.coords == 0 else args.coords
    ok = gradcheck.main(coords, args.seed)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_schema(args, argv) -> int:
    schema = cfgmod.synth_schema() if args.which == "synth" else cfgmod.config_schema()
    print(json.dumps(schema, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tssl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic keyword corpus")
    s.add_argument("--spec", required=True, help="JSON corpus spec")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("lfbe", "wav"), default="lfbe")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    s.add_argument("--method", choices=("apc", "mpc", "cl"), required=True)
    s.add_argument("--uwdb", choices=("on", "off"), default="off")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--step1", help="existing step-1 checkpoint for --uwdb on")
    s.add_argument("--init", help="warm-start checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--uwdb-epochs", type=int)
    s.add_argument("--precision", choices=("float32", "float64"))
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="keyword classification fine-tuning")
    s.add_argument("--checkpoint", help="pretrained checkpoint; omit to train from scratch")
    s.add_argument("--freeze", choices=("none", "encoder"), default="none")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--test", help="held-out corpus for test accuracy")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--precision", choices=("float32", "float64"))
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="accuracy, detection trials, or relative FAR")
    s.add_argument("--mode", choices=("accuracy", "trials", "relfar"), required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--keyword", help="class name or index scored in trials mode")
    s.add_argument("--trials-out")
    s.add_argument("--baseline")
    s.add_argument("--candidate")
    s.add_argument("--threshold", type=float, default=0.5, help="baseline operating threshold")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    s.add_argument("--coords", type=int, default=300, help="coordinates per loss; 0 = all")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("schema", help="print the JSON schema for configs")
    s.add_argument("which", nargs="?", choices=("config", "synth"), default="config")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("TSSL_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args, argv)
    except (cfgmod.ConfigError, UsageError) as e:
        print(f"tssl: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"tssl: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
