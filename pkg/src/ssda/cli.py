"""Experiment driver: generate / train / calibrate-bn / eval /
export-embeddings / sweep."""

from __future__ import annotations

import argparse
import glob
import json
import os
import subprocess
import sys

import numpy as np

from .bncal import calibrate
from .config import PRESETS, load_config
from .data import ConfigurationError, DataError, load_manifest, manifest_path
from .evaluation import evaluate, export_embeddings
from .model import load_checkpoint, save_checkpoint
from .report import plot_confusion, plot_training_curves
from .training import train


def _data_root(args) -> str:
    root = getattr(args, "data_root", None) or os.environ.get(
        "SSDA_DATA_ROOT")
    if not root:
        raise ConfigurationError(
            "no data root: pass --data-root or set SSDA_DATA_ROOT")
    return root


def cmd_generate(args) -> int:
    from .data import generate_synthetic_pair
    spec, _ = load_config(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    marker = manifest_path(args.out_dir, "source", "train")
    if os.path.exists(marker) and not args.force:
        print(f"refusing to overwrite existing dataset at {args.out_dir} "
              f"(use --force)", file=sys.stderr)
        return 1
    generate_synthetic_pair(spec, args.out_dir)
    print(f"generated synthetic pair under {args.out_dir}")
    return 0


def _run_dir(out_dir: str, preset: str | None, cfg) -> str:
    name = f"{preset or 'run'}-{cfg.config_hash()}-seed{cfg.seed}"
    return os.path.join(out_dir, name)


def _preset_of(path: str) -> str | None:
    # parse the preset back out of the [train] section, if present
    import configparser
    p = configparser.ConfigParser()
    p.read(path)
    return p.get("train", "preset", fallback=None)


def _find_src_baseline(out_dir: str, seed: int) -> float | None:
    """Final target metric of a completed SRC run with the same seed in a
    sibling run directory, for the SRC-relative gain in summary.json."""
    for path in glob.glob(os.path.join(out_dir, "..", "src-*-seed%d" % seed,
                                       "summary.json")):
        with open(path, "r", encoding="utf-8") as f:
            s = json.load(f)
        if s.get("preset") == "src":
            return s.get("final_target")
    return None


def cmd_train(args) -> int:
    spec, cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    preset = _preset_of(args.config)
    data_root = _data_root(args)
    run_dir = _run_dir(args.out_dir, preset, cfg)
    summary_path = os.path.join(run_dir, "summary.json")
    if os.path.exists(summary_path) and not args.force:
        print(f"run already completed: {run_dir} (use --force)",
              file=sys.stderr)
        return 1
    os.makedirs(run_dir, exist_ok=True)

    result = train(data_root, cfg, run_dir)
    plot_training_curves(result["metrics_log"],
                         os.path.join(run_dir, "training_curves.png"))

    final = dict(result["final"])
    calibrated = None
    if cfg.bn_calibration:
        nets, arch, payload = load_checkpoint(result["checkpoint_last"])
        encoder, main_head, pretext_head, disc = nets
        tgt_train = load_manifest(manifest_path(data_root, "target",
                                                "train"), "train")
        calibrate(encoder, main_head, tgt_train, passes=cfg.bn_passes,
                  batch_size=cfg.batch_size_target, seed=cfg.seed)
        cal_path = os.path.join(run_dir, "checkpoint_calibrated.pt")
        save_checkpoint(cal_path,
                        {"encoder": encoder, "main_head": main_head,
                         "pretext_head": pretext_head,
                         "discriminator": disc},
                        arch, cfg.task, payload["num_classes"],
                        payload["num_pretext_labels"], cfg.config_hash(),
                        extra={"calibrated": True})
        calibrated = {}
        for dom in ("source", "target"):
            manifest = load_manifest(manifest_path(data_root, dom, "test"),
                                     "test")
            rec = evaluate(encoder, main_head, manifest, cfg.task)
            metric = "accuracy" if cfg.task == "classification" else "miou"
            calibrated[dom] = getattr(rec, metric)
        final = calibrated

    src_target = _find_src_baseline(run_dir, cfg.seed)
    summary = {
        "preset": preset,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "metric": result["metric"],
        "uncalibrated": result["final"],
        "calibrated": calibrated,
        "final_source": final.get("source"),
        "final_target": final.get("target"),
        "diverged": result["diverged"],
        "target_train_label_reads": result["target_train_label_reads"],
        "src_relative_gain": (final.get("target") - src_target
                              if src_target is not None else None),
    }
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary))
    return 0


def cmd_calibrate_bn(args) -> int:
    nets, arch, payload = load_checkpoint(args.ckpt)
    encoder, main_head, pretext_head, disc = nets
    data_root = _data_root(args)
    tgt_train = load_manifest(manifest_path(data_root, "target", "train"),
                              "train")
    calibrate(encoder, main_head, tgt_train, passes=args.passes,
              batch_size=args.batch_size, seed=args.seed or 0)
    save_checkpoint(args.out,
                    {"encoder": encoder, "main_head": main_head,
                     "pretext_head": pretext_head, "discriminator": disc},
                    arch, payload["task"], payload["num_classes"],
                    payload["num_pretext_labels"], payload["config_hash"],
                    extra={"calibrated": True})
    print(f"calibrated checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    nets, arch, payload = load_checkpoint(args.ckpt)
    encoder, main_head = nets[0], nets[1]
    manifest = load_manifest(args.manifest, "test")
    rec = evaluate(encoder, main_head, manifest, payload["task"])
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.ckpt))
    os.makedirs(out_dir, exist_ok=True)
    result = {"accuracy": rec.accuracy, "miou": rec.miou,
              "per_class_iou": rec.per_class_iou,
              "num_units": rec.num_units}
    with open(os.path.join(out_dir, "eval_metrics.json"), "w",
              encoding="utf-8") as f:
        json.dump(result, f, indent=2)
    np.savetxt(os.path.join(out_dir, "confusion_matrix.csv"),
               rec.confusion, fmt="%d", delimiter=",")
    plot_confusion(rec.confusion,
                   os.path.join(out_dir, "confusion_matrix.png"))
    print(json.dumps(result))
    return 0


def cmd_export_embeddings(args) -> int:
    nets, _, payload = load_checkpoint(args.ckpt)
    encoder = nets[0]
    data_root = _data_root(args)
    manifests = [load_manifest(manifest_path(data_root, dom, args.split),
                               args.split)
                 for dom in ("source", "target")]
    rows = export_embeddings(encoder, manifests, args.tap, args.out)
    print(f"wrote {rows} embedding rows to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    """Launch one independent training process per (preset, seed)."""
    presets = args.presets.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    for preset in presets:
        if preset not in PRESETS:
            print(f"unknown preset {preset!r}", file=sys.stderr)
            return 1
    import configparser
    base = configparser.ConfigParser()
    base.read(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    for preset in presets:
        cfgp = configparser.ConfigParser()
        cfgp.read_dict({s: dict(base[s]) for s in base.sections()})
        if not cfgp.has_section("train"):
            cfgp.add_section("train")
        cfgp.set("train", "preset", preset)
        cfg_path = os.path.join(args.out_dir, f"sweep_{preset}.ini")
        with open(cfg_path, "w", encoding="utf-8") as f:
            cfgp.write(f)
        for seed in seeds:
            cmd = [sys.executable, "-m", "ssda", "train",
                   "--config", cfg_path, "--seed", str(seed),
                   "--data-root", _data_root(args),
                   "--out-dir", args.out_dir]
            if args.force:
                cmd.append("--force")
            rc = subprocess.call(cmd)
            if rc != 0:
                return rc
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssda",
        description="self-supervised domain adaptation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render the synthetic domain pair")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--data-root")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate-bn",
                       help="checkpoint-in/checkpoint-out BN calibration")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-root")
    p.add_argument("--out", required=True)
    p.add_argument("--passes", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_calibrate_bn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings",
                       help="pooled tap features as CSV for projection")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-root")
    p.add_argument("--out", required=True)
    p.add_argument("--tap", default="middle", choices=["middle", "final"])
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("sweep",
                       help="independent runs over preset/seed grids")
    p.add_argument("--config", required=True)
    p.add_argument("--data-root")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--presets", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
