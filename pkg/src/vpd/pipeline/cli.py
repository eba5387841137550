"""Command-line entry point: ``vpd <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..diffusion import make_schedule
from ..synth import CorruptionSpec, SceneConfig
from . import io
from .config import RunConfig, desk_preset
from .evaluate import Setting, ablate, evaluate, predict_scene, scene_seed, write_ablation
from .model import DepthDiffusionModel
from .train import train


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags given here override it")
    p.add_argument("--preset", choices=["full", "desk"], default="full",
                   help="defaults to start from (desk: narrow net, larger step size)")
    for f in fields(RunConfig):
        if f.name in ("multipliers",):
            p.add_argument("--multipliers", type=int, nargs=3)
            continue
        kind = {bool: _bool, int: int, float: float, str: str}.get(type(f.default), str)
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)


def _run_config(args) -> RunConfig:
    cfg = desk_preset() if args.preset == "desk" else RunConfig()
    if args.config:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **json.loads(Path(args.config).read_text())})
    changes = {f.name: getattr(args, f.name) for f in fields(RunConfig)
               if getattr(args, f.name, None) is not None}
    return cfg.replace(**changes)


def _dataset_dir(name: str, root: str | None) -> Path:
    base = Path(root) if root else io.data_root()
    return base / name


def cmd_synth(args) -> int:
    corruption = CorruptionSpec(args.occlusion_blocks, args.occlusion_size, args.noise_sigma,
                                args.flatten_prob)
    cfg = SceneConfig(height=args.height, width=args.width, num_planes=args.planes,
                      d_min=args.d_min, d_max=args.d_max, corruption=corruption)
    train_seeds = list(range(args.seed, args.seed + args.train))
    eval_seeds = list(range(args.seed + 100000, args.seed + 100000 + args.eval))
    path = io.build_dataset(_dataset_dir(args.name, args.data_root), cfg, train_seeds, eval_seeds)
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest = _dataset_dir(cfg.dataset, args.data_root)
    res = train(cfg, manifest, args.out or cfg.out_dir, log=print)
    print(f"checkpoint {res.checkpoint}  ({res.seconds:.1f} s)")
    return 0


def cmd_sample(args) -> int:
    model = DepthDiffusionModel.load(args.checkpoint)
    run = model.run
    manifest = io.read_manifest(_dataset_dir(args.dataset or run.dataset, args.data_root))
    scenes = io.load_split(manifest, args.split)
    scene = scenes[args.index]
    setting = Setting("sample", run.use_cvp, run.use_cacc, run.use_of, args.steps or run.reverse_steps)
    prob, depth = predict_scene(model, scene, setting, scene_seed(args.seed, args.index))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = depth.shape
    io.write_volume(out / "probability.vol", prob.astype(np.float32))
    io.write_volume(out / "depth.vol", np.asarray(depth.values, dtype=np.float32).reshape(1, 1, h, w))
    if model.occupancy is not None:
        with T.no_grad():
            occ = model.occupancy_probs(T.Tensor(prob), T.Tensor(scene.contexts[0])).data
        io.write_volume(out / "occupancy.vol", occ.argmax(axis=0).astype(np.int32)[None])
    print(out)
    return 0


def cmd_eval(args) -> int:
    model_run = DepthDiffusionModel.load(args.checkpoint).run
    manifest = _dataset_dir(args.dataset or model_run.dataset, args.data_root)
    settings = None
    if args.steps is not None:
        settings = [Setting(f"steps={args.steps}", model_run.use_cvp, model_run.use_cacc,
                            model_run.use_of, args.steps)]
    reports = evaluate(args.checkpoint, manifest, settings, args.out, args.seed)
    print(json.dumps(reports, sort_keys=True, indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    manifest = io.read_manifest(_dataset_dir(cfg.dataset, args.data_root))
    result = ablate(cfg, io.load_split(manifest, "train"), io.load_split(manifest, "eval"),
                    log=print)
    write_ablation(result, args.out or cfg.out_dir)
    for r in result.ladder + result.sweep:
        print(f"{r['setting']:>14s}  abs {r['depth']['abs']:.4f}  {r['seconds']:.2f} s")
    return 0


def cmd_schedule_dump(args) -> int:
    s = make_schedule(args.T, args.kind, args.beta_start, args.beta_end)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["t", "alpha", "alpha_bar"])
    for t in range(1, s.T + 1):
        w.writerow([t, f"{s.alphas[t - 1]:.10g}", f"{s.alpha_bars[t - 1]:.10g}"])
    return 0


def cmd_plot(args) -> int:
    """Print a curve from a run directory as comma-separated text."""
    src = Path(args.source)
    if src.is_dir():
        for name in ("losses.csv", "ladder.csv", "sweep.csv"):
            if (src / name).exists() and (args.what in (None, name.split(".")[0])):
                src = src / name
                break
        else:
            raise SystemExit(f"nothing to plot in {args.source}")
    sys.stdout.write(src.read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpd", description="Volumetric depth diffusion toolkit")
    p.add_argument("--data-root", help=f"dataset root (default ${io.DATA_ROOT_ENV} or ./data)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset and its manifest")
    s.add_argument("--name", default="default")
    s.add_argument("--train", type=int, default=64)
    s.add_argument("--eval", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--planes", type=int, default=16)
    s.add_argument("--d-min", type=float, default=2.0)
    s.add_argument("--d-max", type=float, default=10.0)
    s.add_argument("--occlusion-blocks", type=int, default=4)
    s.add_argument("--occlusion-size", type=int, default=7)
    s.add_argument("--noise-sigma", type=float, default=0.35)
    s.add_argument("--flatten-prob", type=float, default=0.05)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a dataset")
    _add_run_flags(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="refine one scene and write its volumes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset")
    s.add_argument("--split", default="eval", choices=["train", "eval"])
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate the component ladder and step sweep")
    _add_run_flags(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("schedule-dump", help="print t, alpha_t, alpha_bar_t as CSV")
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--kind", default="linear", choices=["linear", "cosine"])
    s.add_argument("--beta-start", type=float, default=1e-4)
    s.add_argument("--beta-end", type=float, default=0.02)
    s.set_defaults(func=cmd_schedule_dump)

    s = sub.add_parser("plot", help="emit a loss curve or ablation table as CSV")
    s.add_argument("source", help="run directory or CSV file")
    s.add_argument("--what", choices=["losses", "ladder", "sweep"])
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
