"""``rayzer-lab`` command line: data generation, training, evaluation, probing,
interpolation and rendering.

Exit codes: 0 success, 2 usage or config error, 3 training divergence,
4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch
from PIL import Image

from .checkpoint import (
    CheckpointError,
    CheckpointMismatch,
    load_parameters,
    read_container,
    restore_optimizer,
    save_checkpoint,
)
from .config import CONDITIONING_MODES, ConfigError, ModelConfig, RunConfig, preset_config, substream_seed
from .data import DatasetError, OrbitDataset, to_uint8, write_dataset
from .evaluation import eval_window, interp_eval, nvs_reports, predict_views, probe_pose
from .model import RayZer, build_model
from .training import Trainer, TrainingDivergence, make_optimizer

log = logging.getLogger("rayzer_lab")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4
DATA_ENV = "RAYZER_LAB_DATA"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else preset_config(args.preset)
    flat = {}
    if args.seed is not None:
        flat["seed"] = args.seed
    if args.out is not None:
        flat["out"] = args.out
    if args.workers is not None:
        flat["workers"] = args.workers
    run = run.updated(flat) if flat else run
    run = run.with_overrides(args.set or [])
    if getattr(args, "ablate", None):
        run = run.updated({"model.conditioning": args.ablate})
    return run


def data_root(args, run: RunConfig) -> Path:
    return Path(getattr(args, "data", None) or os.environ.get(DATA_ENV) or run.data.root)


def load_dataset(args, run: RunConfig) -> OrbitDataset:
    root = data_root(args, run)
    if not (root / "manifest.json").exists():
        raise UsageError(f"no dataset at {root} (missing manifest.json); run gen-data or set {DATA_ENV}")
    return OrbitDataset.load(root)


def model_overridden(args) -> bool:
    return bool(args.config) or any(s.split("=", 1)[0].startswith("model.") for s in args.set or [])


def load_model(path, run: RunConfig, strict_config: bool):
    """Model from checkpoint ``path``; with ``strict_config`` it must match ``run.model``."""
    header, records = read_container(path)
    stored = ModelConfig(**header["model_config"])
    cfg = stored
    if strict_config and stored != run.model:
        # shape errors name both shapes; other differences are listed field by field
        load_parameters(RayZer(run.model), records)
        diffs = [f"{k}: config {getattr(run.model, k)!r} vs checkpoint {getattr(stored, k)!r}"
                 for k in stored.__dict__ if getattr(run.model, k) != getattr(stored, k)]
        raise CheckpointMismatch("checkpoint does not match config: " + "; ".join(diffs))
    model = RayZer(cfg)
    load_parameters(model, records)
    return model, header, records


def out_dir(run: RunConfig) -> Path:
    path = Path(run.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_json(run: RunConfig, path: Path) -> None:
    run.dump(path / "run.json")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, run: RunConfig) -> int:
    n_scenes = run.data.scenes if args.scenes is None else args.scenes
    frames = run.data.frames if args.frames is None else args.frames
    if n_scenes < 1:
        raise UsageError(f"--scenes must be at least 1, got {n_scenes}")
    if frames < 2:
        raise UsageError(f"--frames must be at least 2, got {frames}")
    test = min(run.data.test_scenes, n_scenes - 1) if args.test_scenes is None else args.test_scenes
    root = Path(args.out) if args.out else data_root(args, run)
    try:
        manifest = write_dataset(
            root, n_scenes, frames, run.model.width, run.model.height, run.data.focal_ratio,
            test_scenes=test, seed=run.seed, workers=run.workers,
        )
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {root}: {exc}") from exc
    splits = {}
    for entry in manifest["scenes"]:
        splits[entry["split"]] = splits.get(entry["split"], 0) + 1
    print(f"wrote {n_scenes} scenes x {frames} frames to {root} ({', '.join(f'{k}: {v}' for k, v in sorted(splits.items()))})")
    return EXIT_OK


def cmd_train(args, run: RunConfig) -> int:
    dataset = load_dataset(args, run)
    out = out_dir(run)
    ckpt_dir = out / "checkpoints"
    start = 0
    if args.resume:
        model, header, records = load_model(args.resume, run, strict_config=True)
        optimizer = make_optimizer(model, run.train)
        restore_optimizer(model, optimizer, header, records)
        start = int(header["meta"]["iteration"])
        log.info("resuming from %s at iteration %d", args.resume, start)
    else:
        model = build_model(run.model, substream_seed(run.seed, "init"))
        optimizer = make_optimizer(model, run.train)
        # the untrained state is the first last-good checkpoint
        save_checkpoint(ckpt_dir / "last.ckpt", model, optimizer, 0)
    write_run_json(run, out)
    trainer = Trainer(model, dataset, run, start_iter=start, optimizer=optimizer)
    try:
        trainer.run(metrics_path=out / "metrics.csv", checkpoint_dir=ckpt_dir)
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}; last good checkpoint kept at {ckpt_dir / 'last.ckpt'}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained to iteration {trainer.iteration}; checkpoint {ckpt_dir / 'last.ckpt'}")
    return EXIT_OK


def _eval_model(args, run):
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    model, _, _ = load_model(args.ckpt, run, strict_config=model_overridden(args))
    if model.cfg != run.model:
        run = run.updated({f"model.{k}": v for k, v in model.cfg.__dict__.items()})
    return model.float(), run


def cmd_eval(args, run: RunConfig) -> int:
    model, run = _eval_model(args, run)
    dataset = load_dataset(args, run)
    out = out_dir(run)
    write_run_json(run, out)
    strips = out / "strips" if args.strips else None
    with torch.no_grad():
        ours, copy = nvs_reports(model, dataset, args.mode, run.train, run.seed, args.split, strip_dir=strips)
    for name, report in ((f"nvs_{args.mode}", ours), (f"copy_{args.mode}", copy)):
        csv_path, json_path = report.write(out, name)
        print(f"{name}: PSNR {report.mean_psnr:.3f} SSIM {report.mean_ssim:.4f} -> {csv_path}, {json_path}")
    return EXIT_OK


def cmd_interp(args, run: RunConfig) -> int:
    model, run = _eval_model(args, run)
    dataset = load_dataset(args, run)
    out = out_dir(run)
    write_run_json(run, out)
    strips = out / "strips" if args.strips else None
    ours, copy = interp_eval(model, dataset, run.train, run.seed, args.split, strip_dir=strips)
    for name, report in (("interp", ours), ("interp_copy", copy)):
        csv_path, json_path = report.write(out, name)
        print(f"{name}: PSNR {report.mean_psnr:.3f} SSIM {report.mean_ssim:.4f} -> {csv_path}, {json_path}")
    return EXIT_OK


def cmd_probe(args, run: RunConfig) -> int:
    if args.ckpt:
        model, run = _eval_model(args, run)
    else:
        log.info("no checkpoint given; probing a freshly initialized backbone")
        model = build_model(run.model, substream_seed(run.seed, "init"))
    dataset = load_dataset(args, run)
    out = out_dir(run)
    write_run_json(run, out)
    report = probe_pose(model, dataset, run.train, run.eval, run.seed)
    path = out / "probe.json"
    path.write_text(json.dumps(report.summary(), indent=2) + "\n")
    print(json.dumps(report.summary()))
    print(f"probe report -> {path}")
    return EXIT_OK


def cmd_render(args, run: RunConfig) -> int:
    model, run = _eval_model(args, run)
    dataset = load_dataset(args, run)
    try:
        views = [int(v) for v in args.views.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--views expects comma-separated integers, got {args.views!r}") from exc
    K = run.train.num_views
    bad = [v for v in views if not 0 <= v < K]
    if not views or bad:
        raise UsageError(f"--views must lie in 0..{K - 1} (window positions), got {args.views!r}")
    sid = dataset.scene_ids(args.split)[0] if args.scene is None else args.scene
    seq, _ = dataset[sid]
    frames, plan = eval_window(len(seq), run.train, sid, run.seed, "even")
    renders_b, renders_a, _ = predict_views(model, torch.from_numpy(seq[frames]), plan)
    by_pos = {p: renders_a[k] for k, p in enumerate(plan.a)} | {p: renders_b[k] for k, p in enumerate(plan.b)}
    out = out_dir(run)
    write_run_json(run, out)
    for v in views:
        path = out / f"scene_{sid:04d}_view_{v:02d}_frame_{frames[v]:03d}.png"
        Image.fromarray(to_uint8(by_pos[v].numpy())).save(path)
        print(path)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "interp": cmd_interp,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (e.g. a previous run.json)")
    common.add_argument("--preset", default="toy", choices=["toy", "paper"])
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (dataset root for gen-data)")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rayzer-lab", description=__doc__.replace("``", ""),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic orbit dataset")
    p.add_argument("--scenes", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--test-scenes", type=int)

    p = sub.add_parser("train", parents=[common], help="self-supervised training")
    p.add_argument("--data", help=f"dataset root (default: ${DATA_ENV} or data.root)")
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--ablate", choices=[m for m in CONDITIONING_MODES if m != "pluecker"])

    for name, helptext in (("eval", "novel view synthesis with predicted poses"),
                           ("interp", "render Slerp-interpolated poses"),
                           ("probe", "fit a pose probe on frozen camera features"),
                           ("render", "write rendered views as PNGs")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data")
        p.add_argument("--ckpt")
        p.add_argument("--split", default="test", choices=["train", "test"])
        if name == "eval":
            p.add_argument("--mode", default="even", choices=["even", "random"])
        if name in ("eval", "interp"):
            p.add_argument("--strips", action="store_true", help="also save GT/prediction strips")
        if name == "render":
            p.add_argument("--views", required=True, help="comma-separated window positions")
            p.add_argument("--scene", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve_config(args)
        return COMMANDS[args.command](args, run)
    except (UsageError, ConfigError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
