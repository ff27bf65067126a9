"""Two-stage optimization: the static field first, then the dynamic field against
the frozen static one, with surface-consistency and patch multi-view terms."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import Tensor

from .fields import DynamicField, FieldConfig, StaticField
from .geometry import PixelPatch, Pose, Rays, image_rays, project_points, rotation_about_axis
from .losses import (LossReport, LossWeights, loss_depth_consistency, loss_dynamic,
                     loss_entropy, loss_flow_cycle, loss_flow_slow, loss_full, loss_mask,
                     loss_patch, loss_static, loss_surface, total_loss)
from .renderer import (blended_probability, render_composite, render_dynamic_triple,
                       render_patch, render_static, sample_along_rays)
from .geometry import inverse_warp
from .synthscene import Dataset

log = logging.getLogger(__name__)

STAGES = ("static", "dynamic")


@dataclass
class TrainConfig:
    static_iters: int = 20000
    dynamic_iters: int = 40000
    batch_size: int = 1024
    lr: float = 5e-4
    lr_final: float = 5e-5
    num_samples: int = 64
    patch_size: int = 8
    patch_stride: int = 1
    patch_every: int = 4
    patch_mode: str = "composite"  # composite | dynamic
    rot_deg: float = 5.0
    trans_frac: float = 0.1
    scene_radius: float = 1.0
    detach_warp_depth: bool = False
    surface_gate: float = 0.5
    log_every: int = 100
    ckpt_every: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("static_iters", "dynamic_iters", "batch_size", "num_samples", "patch_size",
                     "patch_stride", "patch_every", "log_every", "ckpt_every"):
            if getattr(self, name) < 0 or (getattr(self, name) == 0 and name not in
                                            ("static_iters", "dynamic_iters")):
                raise ValueError(f"{name} must be positive")
        if not (self.lr > 0 and self.lr_final > 0):
            raise ValueError("learning rates must be positive")
        if self.patch_size ** 2 > self.batch_size:
            raise ValueError("patch_size**2 must not exceed batch_size")
        if self.patch_mode not in ("composite", "dynamic"):
            raise ValueError(f"unknown patch_mode {self.patch_mode!r}")
        if self.rot_deg < 0 or self.trans_frac < 0:
            raise ValueError("viewpoint perturbation scales must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64


def step_generator(seed: int, stage: str, iteration: int, stream: int = 0) -> torch.Generator:
    """Independent generator for one (seed, stage, iteration, stream) so order never matters."""
    ss = np.random.SeedSequence([seed, STAGES.index(stage), iteration, stream])
    g = torch.Generator()
    g.manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))
    return g


def learning_rate(cfg: TrainConfig, iteration: int, total: int) -> float:
    """Exponential decay from ``lr`` to ``lr_final`` over the stage."""
    frac = iteration / max(total, 1)
    return cfg.lr * (cfg.lr_final / cfg.lr) ** frac


class TrainData:
    """Per-frame rays, colors and masks flattened for fast batching."""

    def __init__(self, dataset: Dataset, dtype=torch.float32):
        self.dataset = dataset
        self.camera = dataset.camera
        self.near, self.far = dataset.near, dataset.far
        self.dtype = dtype
        origins, dirs = [], []
        for pose in dataset.poses:
            r = image_rays(dataset.camera, pose, dataset.near, dataset.far, dtype)
            origins.append(r.origins)
            dirs.append(r.directions)
        self.origins = torch.stack(origins)
        self.directions = torch.stack(dirs)
        self.colors = torch.as_tensor(dataset.images.reshape(dataset.num_frames, -1, 3), dtype=dtype)
        self.masks = torch.as_tensor(dataset.masks.reshape(dataset.num_frames, -1), dtype=dtype)
        self.times = list(dataset.times)
        self.num_frames = dataset.num_frames
        self.dt = dataset.dt


class RayBatch(NamedTuple):
    rays: Rays
    colors: Tensor
    masks: Tensor
    frames: Tensor
    pixels: Tensor


def sample_ray_batch(data: TrainData, batch_size: int, generator: torch.Generator,
                     frame: int | None = None) -> RayBatch:
    """Uniform rays over (frame, pixel), or over the pixels of one given frame."""
    P = data.colors.shape[1]
    if frame is None:
        frames = torch.randint(data.num_frames, (batch_size,), generator=generator)
    else:
        frames = torch.full((batch_size,), frame, dtype=torch.long)
    pixels = torch.randint(P, (batch_size,), generator=generator)
    rays = Rays(data.origins[frames, pixels], data.directions[frames, pixels], data.near, data.far)
    return RayBatch(rays, data.colors[frames, pixels], data.masks[frames, pixels], frames, pixels)


def sample_novel_view(pose: Pose, rot_deg: float, trans_max: float,
                      generator: torch.Generator) -> Pose:
    """Perturb a pose by a random rotation (<= ``rot_deg`` about a random axis, applied
    about the camera center) and a random translation of length <= ``trans_max``."""
    axis = torch.randn(3, generator=generator, dtype=torch.float64).numpy()
    angle = math.radians(rot_deg) * float(torch.rand(1, generator=generator, dtype=torch.float64))
    tdir = torch.randn(3, generator=generator, dtype=torch.float64).numpy()
    tmag = trans_max * float(torch.rand(1, generator=generator, dtype=torch.float64))
    R = rotation_about_axis(axis, angle) @ pose.rotation if angle > 0 else pose.rotation.copy()
    t = pose.translation + tmag * tdir / np.linalg.norm(tdir)
    # re-orthonormalize to keep the pose valid after floating point drift
    u, _, vt = np.linalg.svd(R)
    return Pose(u @ vt, t)


class FieldPair(NamedTuple):
    static: StaticField
    dynamic: DynamicField


def build_fields(static_cfg: FieldConfig, dynamic_cfg: FieldConfig, seed: int,
                 dtype=torch.float32) -> FieldPair:
    torch.manual_seed(seed)
    static = StaticField(static_cfg).to(dtype)
    torch.manual_seed(seed + 1)
    dynamic = DynamicField(dynamic_cfg).to(dtype)
    return FieldPair(static, dynamic)


def _place_novel_patch(camera, pose_r: Pose, pose_m: Pose, patch: PixelPatch,
                       depth: Tensor) -> PixelPatch:
    """Center the novel-view patch on where the source patch center reprojects."""
    c = patch.size // 2
    u = torch.tensor([float(patch.u0 + c * patch.stride)], dtype=torch.float64)
    v = torch.tensor([float(patch.v0 + c * patch.stride)], dtype=torch.float64)
    from .geometry import pixel_rays
    r = pixel_rays(camera, pose_m, u, v)
    x = r.origins + r.directions * float(depth[c, c])
    ur, vr, z = project_points(camera, pose_r, x)
    if not float(z) > 0 or not math.isfinite(float(ur)) or not math.isfinite(float(vr)):
        return patch
    half = (patch.extent - 1) / 2
    u0 = int(round(float(ur) - half))
    v0 = int(round(float(vr) - half))
    u0 = min(max(u0, 0), camera.width - patch.extent)
    v0 = min(max(v0, 0), camera.height - patch.extent)
    return PixelPatch(u0, v0, patch.size, patch.stride)


class PatchStep(NamedTuple):
    loss: Tensor
    source: Tensor
    warped: Tensor
    valid: Tensor
    novel_pose: Pose


def patch_constraint_step(static: StaticField, dynamic: DynamicField, data: TrainData,
                          frame: int, cfg: TrainConfig, generator: torch.Generator,
                          novel_pose: Pose | None = None,
                          patch: PixelPatch | None = None) -> PatchStep:
    """Render an input-view patch and a novel-view patch, warp, and score.

    The input-view colors act as the target; its depth keeps its gradient
    unless ``cfg.detach_warp_depth``.
    """
    camera = data.camera
    ext = (cfg.patch_size - 1) * cfg.patch_stride + 1
    if patch is None:
        u0 = int(torch.randint(camera.width - ext + 1, (1,), generator=generator))
        v0 = int(torch.randint(camera.height - ext + 1, (1,), generator=generator))
        patch = PixelPatch(u0, v0, cfg.patch_size, cfg.patch_stride)
    pose_m = data.dataset.poses[frame]
    t = data.times[frame]
    static_fn = static if cfg.patch_mode == "composite" else None
    mode = cfg.patch_mode
    src = render_patch(camera, pose_m, patch, t, mode, cfg.num_samples, data.near, data.far,
                       static_fn, dynamic, dtype=data.dtype)
    if novel_pose is None:
        novel_pose = sample_novel_view(pose_m, cfg.rot_deg, cfg.trans_frac * cfg.scene_radius,
                                       generator)
    patch_r = _place_novel_patch(camera, novel_pose, pose_m, patch, src.depth.detach())
    nov = render_patch(camera, novel_pose, patch_r, t, mode, cfg.num_samples, data.near,
                       data.far, static_fn, dynamic, dtype=data.dtype)
    warped, valid = inverse_warp(nov.rgb, src.depth, novel_pose, pose_m, camera, patch,
                                 patch_r, detach_depth=cfg.detach_warp_depth)
    loss = loss_patch(src.rgb.detach(), warped, valid)
    return PatchStep(loss, src.rgb, warped, valid, novel_pose)


def static_loss_terms(static: StaticField, batch: RayBatch, cfg: TrainConfig,
                      generator: torch.Generator) -> dict:
    samples = sample_along_rays(batch.rays, cfg.num_samples, True, generator)
    res = render_static(static, batch.rays, samples)
    return {"static": loss_static(res.color, batch.colors, batch.masks)}


def dynamic_loss_terms(static: StaticField, dynamic: DynamicField, data: TrainData,
                       frame: int, batch: RayBatch, cfg: TrainConfig, weights: LossWeights,
                       generator: torch.Generator, with_patch: bool) -> dict:
    """Every dynamic-stage loss term (unweighted) for a batch drawn from one frame."""
    t, dt = data.times[frame], data.dt
    has_prev, has_next = frame > 0, frame < data.num_frames - 1
    rays = batch.rays
    samples = sample_along_rays(rays, cfg.num_samples, True, generator)
    d = rays.directions[:, None, :].expand_as(samples.positions)
    with torch.no_grad():
        s_out = static(samples.positions, d)
        s_render = render_static(static, rays, samples, out=s_out)
    triple = render_dynamic_triple(dynamic, rays, samples, t, dt, has_prev, has_next)
    center = triple.outputs[0]
    comp = render_composite(None, None, rays, samples, t, static_out=s_out, dynamic_out=center)
    gt, m = batch.colors, batch.masks
    terms = {
        "dynamic": loss_dynamic(triple, gt),
        "full": loss_full(comp.color, gt),
        "mask": loss_mask(blended_probability(comp.weights, center.prob), m),
    }
    if weights.slow > 0:
        terms["slow"] = loss_flow_slow(center.flow_fwd if has_next else None,
                                       center.flow_bwd if has_prev else None)
    if weights.cycle > 0:
        terms["cycle"] = loss_flow_cycle(
            center.flow_fwd if has_next else None,
            triple.outputs[1].flow_bwd if has_next else None,
            center.flow_bwd if has_prev else None,
            triple.outputs[-1].flow_fwd if has_prev else None)
    if weights.entropy > 0:
        terms["entropy"] = loss_entropy(triple.renders[0].weights)
    if weights.depth_cons > 0:
        terms["depth_cons"] = loss_depth_consistency(comp.depth, s_render.depth, m)
    if weights.surface > 0:
        dirs = [k for k in (1, -1) if k in triple.renders]
        terms["surface"] = sum(
            loss_surface(dynamic, rays, samples, t, dt, k, triple, cfg.surface_gate)
            for k in dirs) / len(dirs)
    if weights.patch > 0 and with_patch:
        terms["patch"] = patch_constraint_step(static, dynamic, data, frame, cfg,
                                               generator).loss
    return terms


def _flat_params(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy()
            for k, v in module.state_dict().items()}


class Trainer:
    """Holds the train state: both fields, the optimizer, the stage and iteration.

    Per-iteration randomness comes from :func:`step_generator`, so a run resumed
    from a checkpoint continues bit-identically.
    """

    def __init__(self, data: TrainData, cfg: TrainConfig, static_cfg: FieldConfig,
                 dynamic_cfg: FieldConfig, weights: LossWeights | None = None, seed: int = 0,
                 fields: FieldPair | None = None):
        self.data = data
        self.cfg = cfg
        self.weights = weights or LossWeights()
        self.seed = seed
        self.static_cfg, self.dynamic_cfg = static_cfg, dynamic_cfg
        self.fields = fields or build_fields(static_cfg, dynamic_cfg, seed, cfg.torch_dtype)
        self.stage = "static"
        self.iteration = 0
        self.optimizer = self._make_optimizer()
        self.history: list[LossReport] = []

    @property
    def static(self) -> StaticField:
        return self.fields.static

    @property
    def dynamic(self) -> DynamicField:
        return self.fields.dynamic

    def _stage_length(self) -> int:
        return self.cfg.static_iters if self.stage == "static" else self.cfg.dynamic_iters

    def _make_optimizer(self) -> torch.optim.Adam:
        module = self.static if self.stage == "static" else self.dynamic
        self.static.requires_grad_(self.stage == "static")
        self.dynamic.requires_grad_(self.stage == "dynamic")
        return torch.optim.Adam(module.parameters(), lr=self.cfg.lr)

    def finished(self) -> bool:
        return self.stage == "dynamic" and self.iteration >= self.cfg.dynamic_iters

    def advance_stage(self):
        if self.stage == "static":
            self.stage = "dynamic"
            self.iteration = 0
            self.optimizer = self._make_optimizer()

    def step(self) -> LossReport:
        """Run one optimization step of the current stage."""
        i = self.iteration
        g = step_generator(self.seed, self.stage, i)
        for group in self.optimizer.param_groups:
            group["lr"] = learning_rate(self.cfg, i, self._stage_length())
        if self.stage == "static":
            batch = sample_ray_batch(self.data, self.cfg.batch_size, g)
            terms = static_loss_terms(self.static, batch, self.cfg, g)
        else:
            frame = int(torch.randint(self.data.num_frames, (1,), generator=g))
            batch = sample_ray_batch(self.data, self.cfg.batch_size, g, frame=frame)
            terms = dynamic_loss_terms(self.static, self.dynamic, self.data, frame, batch,
                                       self.cfg, self.weights, g,
                                       with_patch=i % self.cfg.patch_every == 0)
        loss, report = total_loss(terms, self.weights)
        self.optimizer.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
            self.optimizer.step()
        self.iteration += 1
        return report

    def run_stage(self, callback: Callable[["Trainer", LossReport], None] | None = None):
        while self.iteration < self._stage_length():
            report = self.step()
            if callback is not None:
                callback(self, report)

    # checkpoint state ---------------------------------------------------
    def state_arrays(self) -> dict:
        arrays = _flat_params(self.static, "static")
        arrays.update(_flat_params(self.dynamic, "dynamic"))
        opt = self.optimizer.state_dict()
        for idx, st in opt["state"].items():
            for k, v in st.items():
                arrays[f"optim.{idx}.{k}"] = torch.as_tensor(v).detach().cpu().numpy().copy()
        return arrays

    def state_meta(self) -> dict:
        return {"stage": self.stage, "iteration": self.iteration, "seed": self.seed,
                "train": self.cfg.to_dict(), "static_field": self.static_cfg.to_dict(),
                "dynamic_field": self.dynamic_cfg.to_dict(), "weights": self.weights.to_dict()}

    def load_state(self, arrays: dict, meta: dict):
        load_field_params(self.static, arrays, "static")
        load_field_params(self.dynamic, arrays, "dynamic")
        self.stage = meta["stage"]
        self.iteration = int(meta["iteration"])
        self.optimizer = self._make_optimizer()
        sd = self.optimizer.state_dict()
        state = {}
        for key, arr in arrays.items():
            if not key.startswith("optim."):
                continue
            _, idx, name = key.split(".", 2)
            state.setdefault(int(idx), {})[name] = torch.as_tensor(arr).clone()
        sd["state"] = state
        if state:
            self.optimizer.load_state_dict(sd)


def load_field_params(module: torch.nn.Module, arrays: dict, prefix: str):
    sd = module.state_dict()
    new = {k: torch.as_tensor(arrays[f"{prefix}.{k}"]).to(v.dtype) for k, v in sd.items()}
    module.load_state_dict(new)


def train_static(data: TrainData, cfg: TrainConfig, static_cfg: FieldConfig,
                 dynamic_cfg: FieldConfig | None = None, weights: LossWeights | None = None,
                 seed: int = 0, callback=None) -> Trainer:
    """Optimize the static field on non-dynamic pixels; returns the trainer."""
    tr = Trainer(data, cfg, static_cfg, dynamic_cfg or FieldConfig(), weights, seed)
    tr.run_stage(callback)
    return tr


def train_dynamic(trainer: Trainer, callback=None) -> Trainer:
    """Freeze the static field and optimize the dynamic field with all remaining terms."""
    trainer.advance_stage()
    trainer.run_stage(callback)
    return trainer


def train(data: TrainData, cfg: TrainConfig, static_cfg: FieldConfig, dynamic_cfg: FieldConfig,
          weights: LossWeights | None = None, seed: int = 0, callback=None) -> Trainer:
    tr = train_static(data, cfg, static_cfg, dynamic_cfg, weights, seed, callback)
    return train_dynamic(tr, callback)
