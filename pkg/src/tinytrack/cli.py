"""Command line entry point: ``tinytrack <subcommand> [options]``.

Every subcommand takes ``--seed``, ``--config`` (YAML mapping; unknown keys
are rejected) and ``--out`` (run directory). The effective configuration is
written to ``<out>/config.yaml``. Exit codes: 0 success, 1 validation
failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("tinytrack")


class UsageError(Exception):
    pass


# subcommand -> allowed config keys and their defaults (train/track use their dataclasses)
SYNTH_DEFAULTS = {"count": 10, "frames": 60, "tiny": True, "image_size": [320, 240], "prefix": "seq"}
SPLIT_DEFAULTS = {"test_count": None, "test_pool": None}
DEGRADE_DEFAULTS = {"scale_divisor": 16.0, "input_size": 352, "search_scale": 5.0, "limit": None}
EVAL_DEFAULTS = {"workers": 1}
TRAIN_EXTRA = {"stage": "distill", "teacher": None}


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a key-value mapping")
    return data


def _merge(defaults: dict, file_cfg: dict, overrides: dict) -> dict:
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = dict(defaults)
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _echo(out: Path, subcommand: str, seed: int, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"subcommand": subcommand, "seed": seed, "config": cfg}
    (out / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


def _load_manifest(root: str):
    from .dataset import DatasetError, load_manifest

    try:
        return load_manifest(root)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc


# -- subcommands --------------------------------------------------------------------------------


def cmd_stats(args, out: Path) -> int:
    from .dataset import dataset_stats

    _echo(out, "stats", args.seed, {"data": args.data})
    manifest = _load_manifest(args.data)
    for err in manifest.errors:
        print(f"warning: {err}", file=sys.stderr)
    if not manifest.sequences:
        print("no loadable sequences", file=sys.stderr)
        return EXIT_INVALID
    stats = dataset_stats(manifest)
    rows = stats.rows()
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "value"])
        w.writerows(rows)
        w.writerow(["avg frames (exact)", f"{stats.avg_frames:.4f}"])
    return EXIT_OK


def cmd_validate(args, out: Path) -> int:
    _echo(out, "validate", args.seed, {"data": args.data})
    manifest = _load_manifest(args.data)
    lines = [f"{len(manifest.sequences)} valid sequence(s), {len(manifest.errors)} error(s)"]
    lines += [f"ERROR {err.sequence}: {err.message}" for err in manifest.errors]
    report = "\n".join(lines) + "\n"
    (out / "validation.txt").write_text(report)
    print(report, end="")
    return EXIT_INVALID if manifest.errors else EXIT_OK


def cmd_split(args, out: Path) -> int:
    from .dataset import split_manifest

    cfg = _merge(SPLIT_DEFAULTS, args.file_config, {"test_count": args.test_count, "test_pool": args.test_pool})
    _echo(out, "split", args.seed, {"data": args.data, **cfg})
    manifest = _load_manifest(args.data)
    if cfg["test_count"] is None:
        raise UsageError("split needs --test-count")
    pool = manifest.names()
    if cfg["test_pool"]:
        pool = [line.strip() for line in Path(cfg["test_pool"]).read_text().splitlines() if line.strip()]
    try:
        split = split_manifest(manifest, pool, int(cfg["test_count"]), args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    (out / "split.json").write_text(json.dumps(split.split_tags, indent=1, sort_keys=True))
    n_test = sum(t == "test" for t in split.split_tags.values())
    print(f"test {n_test} / train {len(split.split_tags) - n_test}")
    return EXIT_OK


def cmd_synth(args, out: Path) -> int:
    from .synth import preset_configs, write_dataset

    overrides = {"count": args.count, "frames": args.frames, "tiny": args.tiny}
    cfg = _merge(SYNTH_DEFAULTS, args.file_config, overrides)
    _echo(out, "synth", args.seed, cfg)
    configs = preset_configs(int(cfg["count"]), args.seed, bool(cfg["tiny"]), int(cfg["frames"]),
                             tuple(cfg["image_size"]))
    paths = write_dataset(out / "data", configs, cfg["prefix"])
    (out / "synth_configs.json").write_text(json.dumps([c.to_dict() for c in configs], indent=1))
    print(f"wrote {len(paths)} sequences to {out / 'data'}")
    return EXIT_OK


def cmd_degrade(args, out: Path) -> int:
    from PIL import Image

    from .degrade import DegradeSpec, batch_scale_factor, degrade_tensor, laplacian_energy
    from .tracker import crops

    cfg = _merge(DEGRADE_DEFAULTS, args.file_config, {"limit": args.limit})
    _echo(out, "degrade", args.seed, {"data": args.data, **cfg})
    manifest = _load_manifest(args.data)
    spec = DegradeSpec(float(cfg["scale_divisor"]), int(cfg["input_size"]), args.seed)
    rng = spec.rng()
    img_dir = out / "crops"
    img_dir.mkdir(exist_ok=True)
    rows = []
    seqs = manifest.sequences[: cfg["limit"]] if cfg["limit"] else manifest.sequences
    for seq in seqs:
        box = seq.annotations[0].box
        side = crops.search_side(box.w, box.h, float(cfg["search_scale"]))
        image = crops.image_to_tensor(seq.load_frame(0))
        crop = crops.crop_and_resize(image, box.center, side, spec.network_input_size)
        crop_box = crops.box_to_crop(box.as_list(), box.center, side, spec.network_input_size)
        d = batch_scale_factor([crop_box], spec)
        low = degrade_tensor(crop[None], d, spec, rng)[0]
        pair = []
        for tag, x in (("hr", crop), ("lr", low)):
            arr = np.clip(np.rint((x.permute(1, 2, 0).numpy() + 0.5) * 255), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(img_dir / f"{seq.name}_{tag}.png")
            pair.append(laplacian_energy(arr))
        rows.append([seq.name, f"{d:.4f}", f"{pair[0]:.4f}", f"{pair[1]:.4f}"])
    with open(out / "degrade.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "factor", "energy_hr", "energy_lr"])
        w.writerows(rows)
    print(f"degraded {len(rows)} crops into {img_dir}")
    return EXIT_OK


def _train_config(args):
    from .distill.training import TrainConfig

    defaults = {f.name: None for f in fields(TrainConfig)}
    defaults.update(TRAIN_EXTRA)
    overrides = {"epochs": args.epochs, "videos_per_epoch": args.videos_per_epoch, "stage": args.stage,
                 "teacher": args.teacher}
    cfg = _merge(defaults, args.file_config, overrides)
    extra = {k: cfg.pop(k) for k in TRAIN_EXTRA}
    cfg = {k: v for k, v in cfg.items() if v is not None}
    cfg["seed"] = args.seed
    try:
        return TrainConfig.from_dict(cfg), extra
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args, out: Path) -> int:
    import torch

    from .distill.checkpoint import load_checkpoint, save_checkpoint
    from .distill.training import train, train_baseline

    config, extra = _train_config(args)
    _echo(out, "train", args.seed, {**config.to_dict(), **extra, "data": args.data})
    manifest = _load_manifest(args.data)
    seqs = manifest.subset("train") or manifest.sequences
    if args.split:
        tags = json.loads(Path(args.split).read_text())
        seqs = [s for s in manifest.sequences if tags.get(s.name) == "train"]
    if not seqs:
        raise UsageError("no training sequences")
    torch.set_num_threads(1)
    if extra["stage"] == "baseline":
        result = train_baseline(config, seqs)
    elif extra["stage"] == "distill":
        if not extra["teacher"]:
            raise UsageError("distill stage needs a teacher checkpoint (--teacher)")
        teacher, meta = load_checkpoint(extra["teacher"])
        if meta["arch"] != config.net.to_dict():
            raise UsageError("teacher architecture differs from the configured net")
        result = train(config, seqs, teacher)
    else:
        raise UsageError(f"unknown stage {extra['stage']!r}")
    ckpt = save_checkpoint(out / "student", result.net, args.seed, result.steps,
                           {"stage": extra["stage"], "skipped_steps": result.skipped})
    if result.history:
        keys = list(result.history[0])
        with open(out / "history.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(result.history)
    print(f"{result.steps} steps ({result.skipped} skipped); checkpoint {ckpt}")
    return EXIT_OK


def _tracker_config(args):
    from .tracker.tracking import TrackerConfig

    defaults = TrackerConfig().to_dict()
    cfg = _merge(defaults, args.file_config, {})
    cfg["seed"] = args.seed
    try:
        return TrackerConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_track(args, out: Path) -> int:
    import torch

    from .distill.checkpoint import load_checkpoint
    from .metrics import save_results
    from .tracker.network import NetConfig, TrackerNet
    from .tracker.tracking import track_sequence

    config = _tracker_config(args)
    _echo(out, "track", args.seed, {**config.to_dict(), "data": args.data, "checkpoint": args.checkpoint})
    manifest = _load_manifest(args.data)
    torch.set_num_threads(1)
    if args.checkpoint:
        net, _ = load_checkpoint(args.checkpoint)
    else:
        torch.manual_seed(args.seed)
        net = TrackerNet(NetConfig())
        log.warning("no checkpoint given: tracking with an untrained network")
    seqs = manifest.sequences
    if args.sequence:
        seqs = [manifest[n] for n in args.sequence]
    results = []
    for seq in seqs:
        results.append(track_sequence(net, seq, config=config, tracker_name=args.name))
        print(f"tracked {seq.name} ({len(seq)} frames)")
    save_results(out / "results.json", results)
    (out / "updates.json").write_text(json.dumps({r.sequence_name: r.info for r in results}, indent=1))
    return EXIT_OK


def _evaluate(results_paths, manifest, workers: int):
    from .metrics import aggregate, evaluate_sequence, group_by_tracker, load_results

    results = [r for p in results_paths for r in load_results(p)]
    by_tracker = group_by_tracker(results)
    scores, per_seq = [], {}
    names = set(manifest.names())
    for tracker, by_seq in by_tracker.items():
        missing = [n for n in by_seq if n not in names]
        if missing:
            raise UsageError(f"{tracker}: results for unknown sequences {missing[:5]}")
        items = sorted(by_seq.items())
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            seq_scores = list(pool.map(lambda kv: evaluate_sequence(kv[1], manifest[kv[0]], kv[0]), items))
        per_seq[tracker] = seq_scores
        scores.append(aggregate(tracker, seq_scores))
    return results, scores, per_seq


def cmd_eval(args, out: Path) -> int:
    from .metrics import rank_trackers, write_per_sequence_csv, write_plots, write_scores_csv

    cfg = _merge(EVAL_DEFAULTS, args.file_config, {"workers": args.workers})
    _echo(out, "eval", args.seed, {**cfg, "results": args.results, "data": args.data})
    manifest = _load_manifest(args.data)
    _, scores, per_seq = _evaluate(args.results, manifest, int(cfg["workers"]))
    write_scores_csv(out / "scores.csv", scores)
    write_per_sequence_csv(out / "per_sequence.csv", per_seq)
    write_plots(out, scores)
    for s in rank_trackers(scores):
        print(f"{s.tracker}: PR {s.pr:.4f}  NPR {s.npr:.4f}  SR {s.sr:.4f}  ({len(s.sequences)} sequences)")
    return EXIT_OK


def cmd_report(args, out: Path) -> int:
    from .metrics import attribute_report, rank_trackers, write_attribute_csv, write_plots

    cfg = _merge(EVAL_DEFAULTS, args.file_config, {})
    _echo(out, "report", args.seed, {**cfg, "results": args.results, "data": args.data})
    manifest = _load_manifest(args.data)
    results, scores, _ = _evaluate(args.results, manifest, int(cfg["workers"]))
    entries = attribute_report(results, manifest)
    write_attribute_csv(out / "attributes.csv", entries)
    for metric in ("pr", "npr", "sr"):
        write_attribute_csv(out / f"attributes_{metric}.csv", entries, metric)
    write_plots(out, scores)
    lines = ["| tracker | PR | NPR | SR |", "|---|---|---|---|"]
    lines += [f"| {s.tracker} | {s.pr:.3f} | {s.npr:.3f} | {s.sr:.3f} |" for s in rank_trackers(scores)]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global random seed")
    common.add_argument("--config", help="YAML key-value config file")
    common.add_argument("--out", help="run directory (default runs/<subcommand>)")

    parser = argparse.ArgumentParser(prog="tinytrack", description="Tiny-object tracking lab toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", parents=[common], help="dataset summary table")
    p.add_argument("data")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", parents=[common], help="check a dataset directory")
    p.add_argument("data")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("split", parents=[common], help="seeded train/test split")
    p.add_argument("data")
    p.add_argument("--test-count", type=int)
    p.add_argument("--test-pool", help="file with one candidate test sequence name per line")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--frames", type=int)
    size = p.add_mutually_exclusive_group()
    size.add_argument("--tiny", dest="tiny", action="store_true", default=None)
    size.add_argument("--normal", dest="tiny", action="store_false")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", parents=[common], help="write high/low resolution crop pairs")
    p.add_argument("data")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", parents=[common], help="baseline pretraining or distillation")
    p.add_argument("data")
    p.add_argument("--stage", choices=("baseline", "distill"))
    p.add_argument("--teacher", help="teacher checkpoint (.pt) for the distill stage")
    p.add_argument("--split", help="split.json; only sequences tagged train are used")
    p.add_argument("--epochs", type=int)
    p.add_argument("--videos-per-epoch", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common], help="run the tracker over a dataset")
    p.add_argument("data")
    p.add_argument("--checkpoint")
    p.add_argument("--sequence", action="append", help="restrict to this sequence (repeatable)")
    p.add_argument("--name", default="tracker", help="tracker name written into the results")
    p.set_defaults(func=cmd_track)

    for name, func, help_ in (("eval", cmd_eval, "PR/NPR/SR tables and plots"),
                              ("report", cmd_report, "per-attribute tables and summary")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--results", action="append", required=True, help="results JSON (repeatable)")
        p.add_argument("--data", required=True)
        if name == "eval":
            p.add_argument("--workers", type=int)
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out or Path("runs") / args.command)
    try:
        args.file_config = _read_config(args.config)
        if args.command in ("stats", "validate") and args.file_config:
            raise UsageError(f"unknown config keys: {sorted(args.file_config)}")
        return args.func(args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
