from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..diffusion import forward_sample, make_schedule
from ..optim import Adam
from ..synth import SceneSample
from . import io
from .config import RunConfig
from .model import DepthDiffusionModel


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float]
    seconds: float
    model: DepthDiffusionModel


def train_model(config: RunConfig, scenes: list[SceneSample], log=None) -> tuple[DepthDiffusionModel, list[float]]:
    """Fit a fresh model on ``scenes`` in memory; deterministic given ``config.seed``."""
    if not scenes:
        raise ValueError("no training scenes")
    model = DepthDiffusionModel.for_scene(config, scenes[0])
    opt = Adam(model.parameters(), config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    schedule = make_schedule(config.T, config.schedule, config.beta_start, config.beta_end)
    targets = [model.target(s) for s in scenes]
    losses = []
    for step in range(config.steps):
        opt.zero_grad()
        total = 0.0
        for _ in range(config.batch_size):
            i = int(rng.integers(len(scenes)))
            t = int(rng.integers(1, config.T + 1))
            noise = rng.standard_normal(targets[i].shape).astype(np.float32)
            y_t = forward_sample(targets[i], t, schedule, noise)
            loss = model.loss(scenes[i], y_t, t)
            if config.batch_size > 1:
                loss = loss * (1.0 / config.batch_size)
            loss.backward()
            total += loss.item()
        if not np.isfinite(total):
            raise TrainingDiverged(step, total)
        opt.step()
        losses.append(total)
        if log is not None and (step % 100 == 0 or step == config.steps - 1):
            log(f"step {step:5d}  loss {total:.4f}")
    return model, losses


def train(config: RunConfig, manifest_path, out_dir=None, log=None) -> TrainResult:
    """Train on a stored dataset and write the checkpoint plus a loss curve CSV."""
    manifest = io.read_manifest(manifest_path)
    scenes = io.load_split(manifest, "train")
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    model, losses = train_model(config, scenes, log)
    seconds = time.perf_counter() - start
    ckpt = out / "model.ckpt"
    model.save(ckpt)
    io.write_csv(out / "losses.csv", ["step", "loss"], [[i, f"{v:.9g}"] for i, v in enumerate(losses)])
    return TrainResult(ckpt, losses, seconds, model)
