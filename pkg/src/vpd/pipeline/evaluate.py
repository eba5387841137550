"""Held-out evaluation under component toggles, the ablation ladder, and the step sweep."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..diffusion import make_schedule, sample
from ..metrics import depth_metrics, pool_depth_maps, semantic_metrics
from ..synth import SceneSample
from ..volume import probabilize, wta
from . import io
from .config import RunConfig
from .model import DepthDiffusionModel


@dataclass(frozen=True)
class Setting:
    """One evaluation row. ``steps == 0`` bypasses diffusion: WTA on the coarse prior."""

    name: str
    use_cvp: bool = True
    use_cacc: bool = True
    use_of: bool = True
    steps: int = 4


BASELINE = Setting("base", use_cvp=True, use_cacc=False, use_of=False, steps=0)


def scene_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def predict_scene(model: DepthDiffusionModel | None, scene: SceneSample, setting: Setting,
                  seed: int) -> tuple[np.ndarray, object]:
    """Final probability volume and the depth map from the matching head."""
    if setting.steps == 0:
        prob = probabilize(scene.coarse_cost).data
        return prob, wta(prob, scene.planes)[0]
    run = model.run
    schedule = make_schedule(run.T, run.schedule, run.beta_start, run.beta_end)
    prior = model.prior(scene, setting.use_cvp)
    contexts = [T.Tensor(c) for c in scene.contexts]
    prob = sample(prior, contexts, model.denoiser(setting.use_cacc), schedule, setting.steps,
                  seed, scene.planes, setting.use_of, run.filter_mode)
    depth = model.depth_head(prob, scene.planes)
    if isinstance(depth.depths, T.Tensor):
        depth.depths = depth.depths.data
    return prob, depth


def evaluate_setting(model: DepthDiffusionModel | None, scenes: list[SceneSample], setting: Setting,
                     sample_seed: int = 0) -> dict:
    """Pooled metrics over all scenes plus the wall-clock of the prediction loop."""
    preds, gts, sem = [], [], []
    start = time.perf_counter()
    for i, scene in enumerate(scenes):
        prob, depth = predict_scene(model, scene, setting, scene_seed(sample_seed, i))
        preds.append(depth)
        if model is not None and model.occupancy is not None and setting.steps > 0:
            with T.no_grad():
                occ = model.occupancy_probs(T.Tensor(prob), T.Tensor(scene.contexts[0])).data
            sem.append((occ.argmax(axis=0), scene.semantic_grid))
    seconds = time.perf_counter() - start
    gts = [s.gt_depth for s in scenes]
    gt = pool_depth_maps(gts)
    pred = pool_depth_maps([type(g)(p.values, g.mask) for p, g in zip(preds, gts)])
    report = {"setting": setting.name, "use_cvp": setting.use_cvp, "use_cacc": setting.use_cacc,
              "use_of": setting.use_of, "steps": setting.steps, "seconds": seconds,
              "scenes": len(scenes), "depth": depth_metrics(pred, gt).to_dict()}
    if sem:
        p = np.concatenate([a.ravel() for a, _ in sem])
        g = np.concatenate([b.ravel() for _, b in sem])
        report["semantic"] = semantic_metrics(p, g, model.num_classes).to_dict()
    return report


def evaluate(checkpoint, manifest_path, settings: list[Setting] | None = None,
             out_dir=None, sample_seed: int = 0) -> list[dict]:
    """Evaluate a checkpoint on the manifest's held-out split, one report per setting."""
    model = DepthDiffusionModel.load(checkpoint) if checkpoint else None
    manifest = io.read_manifest(manifest_path)
    scenes = io.load_split(manifest, "eval")
    if model is not None:
        _check_compatible(model, scenes[0])
    if settings is None:
        run = model.run
        settings = [Setting("configured", run.use_cvp, run.use_cacc, run.use_of, run.reverse_steps)]
    reports = []
    for s in settings:
        if s.steps > 0 and model is None:
            raise ValueError(f"setting {s.name!r} needs a checkpoint")
        reports.append(evaluate_setting(model, scenes, s, sample_seed))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in reports:
            io.write_json(out / f"report_{r['setting']}.json", r)
    return reports


def _check_compatible(model: DepthDiffusionModel, scene: SceneSample) -> None:
    cfg = model.unet_config
    _, d, h, w = scene.coarse_cost.shape
    if (cfg.depth, cfg.height, cfg.width) != (d, h, w):
        raise ValueError(f"checkpoint expects volumes {(cfg.depth, cfg.height, cfg.width)}, "
                         f"dataset has {(d, h, w)}")
    if scene.contexts[0].shape[0] != cfg.context_channels:
        raise ValueError("checkpoint and dataset disagree on context channels")


LADDER = ("base", "+CVP", "+CVP+CACC", "+CVP+CACC+OF")
SWEEP_STEPS = (1, 2, 4, 8)


@dataclass
class AblationResult:
    ladder: list[dict]
    sweep: list[dict]
    train_seconds: dict


def ablate(config: RunConfig, train_scenes: list[SceneSample], eval_scenes: list[SceneSample],
           out_dir=None, log=None, models: dict | None = None) -> AblationResult:
    """Train the two networks the ladder needs and evaluate every row.

    The +CVP row uses a network trained without CACC; the CACC rows share one
    trained with it, differing only in whether filtering runs during sampling.
    ``models`` may supply already-trained networks under keys "plain" and "cacc".
    """
    from .train import train_model

    models = dict(models or {})
    train_seconds = {}
    for key, use_cacc in (("plain", False), ("cacc", True)):
        if key not in models:
            start = time.perf_counter()
            models[key], _ = train_model(config.replace(use_cacc=use_cacc), train_scenes, log)
            train_seconds[key] = time.perf_counter() - start
    rows = [
        (None, BASELINE),
        (models["plain"], Setting("+CVP", True, False, False, config.reverse_steps)),
        (models["cacc"], Setting("+CVP+CACC", True, True, False, config.reverse_steps)),
        (models["cacc"], Setting("+CVP+CACC+OF", True, True, True, config.reverse_steps)),
    ]
    ladder = [evaluate_setting(m, eval_scenes, s, config.sample_seed) for m, s in rows]
    sweep = [evaluate_setting(models["cacc"], eval_scenes, Setting(f"steps={n}", True, True, True, n),
                              config.sample_seed) for n in SWEEP_STEPS]
    result = AblationResult(ladder, sweep, train_seconds)
    if out_dir is not None:
        write_ablation(result, out_dir)
    return result


def table_rows(reports: list[dict]) -> list[list]:
    rows = []
    for r in reports:
        d = r["depth"]
        rows.append([r["setting"], r["steps"], f"{d['abs']:.6f}", f"{d['abs_rel']:.6f}",
                     f"{d['rmse']:.6f}", f"{d['delta']['1']:.6f}", f"{r['seconds']:.3f}"])
    return rows


TABLE_HEADER = ["setting", "steps", "abs", "abs_rel", "rmse", "delta1", "seconds"]


def write_ablation(result: AblationResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "ablation.json", {"ladder": result.ladder, "sweep": result.sweep,
                                          "train_seconds": result.train_seconds})
    io.write_csv(out / "ladder.csv", TABLE_HEADER, table_rows(result.ladder))
    io.write_csv(out / "sweep.csv", TABLE_HEADER, table_rows(result.sweep))
