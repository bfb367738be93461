"""Command-line entry point.

Subcommands: ``pretrain``, ``probe``, ``mask-stats``, ``dump-embeddings``,
``analyze``.  Exit codes: 0 success, 1 configuration error, 2 runtime
failure; on failure a one-line JSON reason is printed to stderr.  Every
artifact-producing run writes a resolved-config snapshot and a ``run.json``
stamp beside its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    cka_matrix,
    compute_embedding_dump,
    pearson_matrix,
    spatial_autocorr,
    target_layer_profiles,
)
from .checkpoint import file_sha256, load_dump, save_dump
from .config import ConfigError, TrainConfig, config_hash, dump_config, load_config
from .distill import default_tap_set
from .masking import mask_statistics
from .probe import train_probe
from .train import NonFiniteLossError, Trainer, build_dataset, load_pretrained

try:
    import tomllib
except ImportError:
    import tomli as tomllib


def _fail(code: int, kind: str, reason: str) -> int:
    print(json.dumps({"error": kind, "reason": reason}), file=sys.stderr)
    return code


def _write_run_stamp(out_dir: Path, command: str, argv: list[str], cfg_hash: str | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "config_hash": cfg_hash,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "run.json").write_text(json.dumps(stamp, indent=2) + "\n")


def _load_config_or_fail(args) -> TrainConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    try:
        return load_config(args.config, overrides)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {exc.filename}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc


def _write_grid_csv(path: Path, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in grid:
            writer.writerow([int(v) for v in row])


def cmd_pretrain(args, argv) -> int:
    cfg = _load_config_or_fail(args)
    out = Path(args.out)
    _write_run_stamp(out, "pretrain", argv, config_hash(cfg))
    trainer = Trainer(cfg, out)
    final = trainer.run(resume_from=args.resume)
    _render_loss_curve(out)
    print(f"final checkpoint: {final}")
    return 0


def _render_loss_curve(out: Path) -> None:
    from .plots import save_lines

    metrics_path = out / "metrics.jsonl"
    if not metrics_path.exists():
        return
    steps, losses = [], []
    for line in metrics_path.read_text().splitlines():
        rec = json.loads(line)
        if rec.get("loss") is not None:
            steps.append(rec["step"])
            losses.append(rec["loss"])
    if steps:
        save_lines(
            {"monitored loss": (np.asarray(steps), np.asarray(losses))},
            out / "loss_curve.png",
            "monitored training loss",
            "step",
            "loss",
            logy=True,
        )


def cmd_probe(args, argv) -> int:
    cfg = _load_config_or_fail(args)
    out = Path(args.out)
    _write_run_stamp(out, "probe", argv, config_hash(cfg))
    bundle = load_pretrained(args.checkpoint)
    dataset = build_dataset(cfg)
    result = train_probe(bundle.encoder, dataset, cfg)
    with open(out / "probe-results.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "lr", "wd", "accuracy"])
        for lr, wd, acc in result.rows:
            writer.writerow([result.kind, lr, wd, f"{acc:.6f}"])
    summary = {
        "kind": result.kind,
        "best_lr": result.best_lr,
        "best_wd": result.best_wd,
        "best_accuracy": result.best_accuracy,
        "checkpoint": str(args.checkpoint),
        "checkpoint_step": bundle.step,
    }
    (out / "probe-summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out / "resolved-config.toml").write_text(dump_config(cfg))
    print(f"best {result.kind} accuracy: {result.best_accuracy:.4f}")
    return 0


def cmd_mask_stats(args, argv) -> int:
    cfg = _load_config_or_fail(args)
    out = Path(args.out)
    _write_run_stamp(out, "mask-stats", argv, config_hash(cfg))
    mask_cfg = cfg.mask_config()
    report = mask_statistics(
        mask_cfg, batch_size=args.batch_size, n_batches=args.batches, seed=cfg.train.seed
    )
    payload = report.to_dict()

    golden_path = out / "golden.json"
    if args.golden == "check":
        if not golden_path.exists():
            raise FileNotFoundError(f"golden file {golden_path} not found")
        golden = json.loads(golden_path.read_text())
        if golden != payload:
            raise RuntimeError("mask statistics do not match the golden file")
    elif args.golden == "write":
        golden_path.write_text(json.dumps(payload, indent=2) + "\n")

    lines = [
        f"batch_size = {report.batch_size}",
        f"n_batches = {report.n_batches}",
        f"samples = {report.batch_size * report.n_batches}",
        f"seen_mean = {report.seen_mean:.6f}",
        f"seen_std = {report.seen_std:.6f}",
        f"seen_min = {report.seen_min:.6f}",
        f"seen_max = {report.seen_max:.6f}",
        f"target_mean = {report.target_mean:.6f}",
        f"target_std = {report.target_std:.6f}",
        f"target_min = {report.target_min:.6f}",
        f"target_max = {report.target_max:.6f}",
        f"adjacency_mean = {report.adjacency_mean:.6f}",
        f"adjacency_std = {report.adjacency_std:.6f}",
    ]
    (out / "stats.txt").write_text("\n".join(lines) + "\n")
    _write_grid_csv(out / "visibility_grid.csv", report.visibility_grid)
    _write_grid_csv(out / "target_grid.csv", report.target_grid)
    from .plots import save_heatmap

    save_heatmap(report.visibility_grid, out / "visibility_grid.png",
                 "per-position visibility count")
    save_heatmap(report.target_grid, out / "target_grid.png", "per-position target count")
    (out / "resolved-config.toml").write_text(dump_config(cfg))
    print("\n".join(lines))
    return 0


def cmd_dump_embeddings(args, argv) -> int:
    bundle = load_pretrained(args.checkpoint)
    dataset = build_dataset(bundle.cfg)
    out_file = Path(args.out)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    _write_run_stamp(out_file.parent, "dump-embeddings", argv, None)
    encoder = bundle.teacher if args.source == "teacher" else bundle.encoder
    dump = compute_embedding_dump(
        encoder, dataset, bundle.cfg, n_images=args.images,
        source_hash=file_sha256(args.checkpoint),
    )
    save_dump(out_file, dump)
    print(f"wrote {out_file} with layers: {', '.join(dump.layer_names)}")
    return 0


def cmd_analyze(args, argv) -> int:
    out = Path(args.out)
    _write_run_stamp(out, "analyze", argv, None)
    dump = load_dump(args.dump)
    names = dump.layer_names

    pearson = pearson_matrix(dump)
    cka = cka_matrix(dump)
    if args.taps:
        tap_names = [t.strip() for t in args.taps.split(",")]
    else:
        depth = sum(1 for n in names if n.startswith("block_"))
        tap_names = [f"block_{t.layer}" for t in default_tap_set(depth)]
    profiles = target_layer_profiles(dump, tap_names)

    def write_matrix(path, matrix):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["layer"] + names)
            for name, row in zip(names, matrix):
                writer.writerow([name] + [f"{v:.8f}" for v in row])

    write_matrix(out / "pearson.csv", pearson)
    write_matrix(out / "cka.csv", cka)
    with open(out / "target_profiles.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tap"] + names)
        for tap, row in profiles.items():
            writer.writerow([tap] + [f"{v:.8f}" for v in row])

    radial_layers = [n for n in ("tokenizer", names[1], names[len(names) // 2],
                                 names[-2], "final") if n in names]
    radial_layers = list(dict.fromkeys(radial_layers))
    curves = {}
    with open(out / "radial.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "distance", "correlation"])
        for name in radial_layers:
            sa = spatial_autocorr(dump.layers[name], dump.grid_h, dump.grid_w)
            for d, c in zip(sa.radial_distance, sa.radial_correlation):
                writer.writerow([name, f"{d:.6f}", f"{c:.8f}"])
            curves[name] = (sa.radial_distance, sa.radial_correlation)

    from .plots import save_heatmap, save_lines

    save_heatmap(pearson, out / "pearson.png", "inter-layer Pearson", names, vmin=-1, vmax=1)
    save_heatmap(cka, out / "cka.png", "inter-layer linear CKA", names, vmin=0, vmax=1)
    save_lines(
        {tap: (np.arange(len(names)), row) for tap, row in profiles.items()},
        out / "target_profiles.png",
        "correlation of each layer with the distillation targets",
        "layer index",
        "pearson r",
    )
    save_lines(curves, out / "radial.png", "azimuthally averaged spatial correlation",
               "offset distance (tokens)", "pearson r")
    print(f"analysis written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multitap", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p, with_out=True):
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        if with_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pretrain", help="run self-distillation pretraining")
    add_config_args(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="train frozen-encoder probes")
    add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("mask-stats", help="mask statistics report")
    add_config_args(p)
    p.add_argument("--batches", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--golden", choices=["write", "check"], default=None)
    p.set_defaults(func=cmd_mask_stats)

    p = sub.add_parser("dump-embeddings", help="dump per-layer token embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output dump file")
    p.add_argument("--images", type=int, default=256)
    p.add_argument("--source", choices=["student", "teacher"], default="student")
    p.set_defaults(func=cmd_dump_embeddings)

    p = sub.add_parser("analyze", help="representation analysis over a dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taps", default=None, help="comma-separated layer names")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "out"):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        if args.command != "dump-embeddings":
            Path(args.out).mkdir(parents=True, exist_ok=True)
    try:
        try:
            return args.func(args, argv)
        except ConfigError as exc:
            return _fail(1, "config", str(exc))
    except NonFiniteLossError as exc:
        reason = str(exc)
        if exc.checkpoint_path is not None:
            reason += f" (diagnostic checkpoint: {exc.checkpoint_path})"
        return _fail(2, "non_finite_loss", reason)
    except FileNotFoundError as exc:
        return _fail(2, "missing_file", str(exc))
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        return _fail(2, "runtime", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
