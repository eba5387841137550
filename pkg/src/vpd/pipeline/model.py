"""The trainable model: the UNet plus the task heads and their losses."""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .. import nn
from .. import tensor as T
from ..cacc import lift_context
from ..losses import classification_loss, regression_loss, semantic_loss, unification_loss
from ..synth import NUM_CLASSES, SceneSample
from ..tensor import ShapeError, Tensor
from ..unet import UNet3D, UNetConfig, to_probability
from ..volume import (ONE_HOT, TWO_BIN, DepthMap, HypothesisPlanes, OccupancyHead, normalize_along_depth,
                      probabilize, project_unimodal, soft_argmin_depth, uniform_volume,
                      unity_regress_depth, wta)
from . import io
from .config import RunConfig


class DepthDiffusionModel(nn.Module):
    def __init__(self, run: RunConfig, unet: UNetConfig, num_classes: int = NUM_CLASSES):
        self.run = run
        self.unet_config = unet
        self.unet = UNet3D(unet)
        self.num_classes = num_classes
        self.occupancy = None
        if run.task == "ssc":
            rng = np.random.default_rng([run.seed, 1])
            self.occupancy = OccupancyHead(1 + unet.context_channels, num_classes, rng)

    @classmethod
    def for_scene(cls, run: RunConfig, scene: SceneSample) -> "DepthDiffusionModel":
        _, d, h, w = scene.coarse_cost.shape
        return cls(run, run.unet_config(d, h, w, scene.contexts[0].shape[0]))

    # -- volumes and heads -------------------------------------------------

    def target(self, scene: SceneSample) -> np.ndarray:
        """Clean volume the diffusion chain is trained to reach."""
        mode = ONE_HOT if self.run.loss == "classification" else TWO_BIN
        return project_unimodal(scene.gt_depth, scene.planes, mode)

    def prior(self, scene: SceneSample, use_cvp: bool | None = None) -> np.ndarray:
        use_cvp = self.run.use_cvp if use_cvp is None else use_cvp
        if use_cvp:
            return probabilize(scene.coarse_cost).data.astype(np.float32)
        _, d, h, w = scene.coarse_cost.shape
        return uniform_volume(d, h, w)

    def volume(self, raw: Tensor) -> Tensor:
        """Probability volume from raw head output (unity volume for the unified loss)."""
        return T.sigmoid(raw) if self.run.loss == "unification" else to_probability(raw)

    def depth_head(self, volume, planes: HypothesisPlanes) -> DepthMap:
        if self.run.loss == "classification":
            return wta(volume, planes)[0]
        if self.run.loss == "regression":
            v = volume if isinstance(volume, Tensor) else Tensor(np.asarray(volume))
            return soft_argmin_depth(v, planes)
        return unity_regress_depth(volume, planes)

    def occupancy_probs(self, volume: Tensor, context: Tensor) -> Tensor:
        if self.occupancy is None:
            raise ValueError("model was not built for semantic occupancy")
        lifted = lift_context(context, volume)
        feats = T.concat([volume, lifted], axis=0)
        return self.occupancy(feats)

    # -- training ------------------------------------------------------------

    def loss(self, scene: SceneSample, y_t: np.ndarray, t: int, use_cacc: bool | None = None) -> Tensor:
        use_cacc = self.run.use_cacc if use_cacc is None else use_cacc
        contexts = [Tensor(c) for c in scene.contexts]
        raw = self.unet(y_t, self.prior(scene), t, contexts, use_cacc)
        vol = self.volume(raw)
        planes, gt = scene.planes, scene.gt_depth
        cfg = self.run.loss_config()
        if self.run.loss == "classification":
            total = classification_loss(vol, gt, planes, cfg.focal_gamma)
        elif self.run.loss == "regression":
            total = regression_loss(soft_argmin_depth(vol, planes), gt, cfg.beta_meters(planes))
        else:
            q = self.target(scene)
            total = unification_loss(vol, q, cfg, gt.mask)
        if self.occupancy is not None:
            prob = vol if self.run.loss != "unification" else vol / vol.sum(axis=1, keepdims=True)
            occ = self.occupancy_probs(prob, contexts[0])
            total = total + semantic_loss(occ, scene.semantic_grid) * self.run.semantic_weight
        return total

    # -- sampling ------------------------------------------------------------

    def denoiser(self, use_cacc: bool = True):
        def model(y_t, prior, t, contexts):
            with T.no_grad():
                raw = self.unet(y_t, prior, t, contexts, use_cacc)
                vol = self.volume(raw).data
            return normalize_along_depth(vol)
        return model

    # -- persistence ---------------------------------------------------------

    def config_dict(self) -> dict:
        return {"run": self.run.to_dict(), "unet": asdict(self.unet_config),
                "num_classes": self.num_classes}

    def save(self, path) -> None:
        io.save_checkpoint(path, [(n, p.data) for n, p in self.named_parameters()], self.config_dict())

    @classmethod
    def load(cls, path) -> "DepthDiffusionModel":
        tensors, cfg = io.load_checkpoint(path)
        model = cls(RunConfig.from_dict(cfg["run"]), UNetConfig.from_dict(cfg["unet"]), cfg["num_classes"])
        params = dict(model.named_parameters())
        if set(params) != set(tensors):
            missing = sorted(set(params) ^ set(tensors))[:5]
            raise ShapeError(f"checkpoint parameters do not match the model: {missing}")
        for name, p in params.items():
            if p.shape != tensors[name].shape:
                raise ShapeError(f"{name}: checkpoint {tensors[name].shape} vs model {p.shape}")
            p.data = tensors[name].astype(p.dtype)
        return model
