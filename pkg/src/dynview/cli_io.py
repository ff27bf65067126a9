"""Run configuration, dataset and checkpoint persistence, PNG emission and the CLI."""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import flow_vis
import numpy as np
import torch
from PIL import Image

from .fields import DynamicField, FieldConfig, StaticField
from .geometry import Camera, Pose, image_rays, project_points
from .losses import LossWeights
from .metrics import EvalReport, evaluate, render_view
from .renderer import blend, blended_probability, quadrature, sample_along_rays
from .synthscene import (Dataset, Frame, SceneConfig, SyntheticScene, TrajectoryConfig,
                         make_dataset)
from .trainer import TrainConfig, TrainData, Trainer, load_field_params

log = logging.getLogger(__name__)

ZIP_DATE = (1980, 1, 1, 0, 0, 0)
CHECKPOINT_NAME = "checkpoint.npz"
FINAL_NAME = "final.npz"
LOG_NAME = "train_log.txt"


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    """Everything a command needs; serialized as JSON."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    static_field: FieldConfig = field(default_factory=FieldConfig)
    dynamic_field: FieldConfig = field(default_factory=FieldConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    oracle_samples: int = 512
    eval_samples: int = 0  # 0 means train.num_samples
    seed: int = 0
    out: str = "out"

    SECTIONS = {"scene": SceneConfig, "trajectory": TrajectoryConfig, "train": TrainConfig,
                "static_field": FieldConfig, "dynamic_field": FieldConfig,
                "weights": LossWeights}

    def __post_init__(self):
        if self.oracle_samples < 2 or self.eval_samples < 0:
            raise ConfigError("oracle_samples must be >= 2 and eval_samples >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected an object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        kwargs = {}
        for key, value in data.items():
            sect = cls.SECTIONS.get(key)
            kwargs[key] = _build(sect, value, key) if sect else value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @property
    def render_samples(self) -> int:
        return self.eval_samples or self.train.num_samples


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_json(Path(path).read_text())


# arrays and images ------------------------------------------------------


def save_array(path, array: np.ndarray):
    """Write a little-endian ``.npy`` file (magic, dtype and shape header, raw data)."""
    a = np.asarray(array)
    a = a.astype(a.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        np.save(fh, np.ascontiguousarray(a), allow_pickle=False)


def load_array(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray):
    """Save a [0, 1] float image or a uint8 image as PNG."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    Image.fromarray(a).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Decode a PNG to float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def depth_to_png(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    """Linear map of ``[near, far]`` to ``[0, 255]`` grayscale."""
    d = (np.asarray(depth, np.float64) - near) / (far - near)
    return to_uint8(np.clip(d, 0.0, 1.0))


def depth_png_name(near: float, far: float) -> str:
    return f"depth_near{near:g}_far{far:g}.png"


def flow_to_png(flow2d: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Color-wheel image of a (H, W, 2) pixel flow, black outside ``mask``."""
    f = np.where(mask[..., None], flow2d, 0.0)
    rgb = flow_vis.flow_to_color(f.astype(np.float64))
    return np.where(mask[..., None], rgb, 0).astype(np.uint8)


# checkpoints ------------------------------------------------------------


def save_checkpoint(path, arrays: dict, meta: dict):
    """Write an npz-compatible zip with fixed timestamps and a JSON metadata entry.

    The file is written to a temporary name and renamed, so an interrupted
    write never replaces the previous checkpoint.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", ZIP_DATE), buf.getvalue())
        text = json.dumps(meta, indent=2, sort_keys=True).encode()
        zf.writestr(zipfile.ZipInfo("__meta__.json", ZIP_DATE), text)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    arrays, meta = {}, None
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == "__meta__.json":
                meta = json.loads(data)
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(data), allow_pickle=False)
    if meta is None:
        raise ValueError(f"{path}: missing checkpoint metadata")
    return arrays, meta


def fields_from_checkpoint(path):
    """Rebuild both fields from a checkpoint; returns (static, dynamic, meta)."""
    arrays, meta = load_checkpoint(path)
    static = StaticField(FieldConfig(**meta["static_field"]))
    dynamic = DynamicField(FieldConfig(**meta["dynamic_field"]))
    dtype = torch.float64 if meta["train"]["dtype"] == "float64" else torch.float32
    static.to(dtype)
    dynamic.to(dtype)
    load_field_params(static, arrays, "static")
    load_field_params(dynamic, arrays, "dynamic")
    return static.eval(), dynamic.eval(), meta


# dataset directory -------------------------------------------------------


def write_dataset(ds: Dataset, out) -> Path:
    """Write frames, masks, held-out views, manifest and ground-truth arrays."""
    out = Path(out)
    for sub in ("images", "masks", "eval", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for n, fr in enumerate(ds.frames):
        img, msk = f"images/{n:03d}.png", f"masks/{n:03d}.png"
        save_png(out / img, fr.image)
        save_png(out / msk, (fr.mask > 0).astype(np.uint8) * 255)
        save_png(out / f"eval/{n:03d}.png", ds.eval_images[n])
        save_png(out / f"eval/mask_{n:03d}.png", (ds.eval_masks[n] > 0).astype(np.uint8) * 255)
        rows.append({"index": n, "time": fr.time, "image": img, "mask": msk,
                     "rotation": fr.pose.rotation.tolist(),
                     "translation": fr.pose.translation.tolist()})
    for name in ("depth", "surface", "flow_fwd", "flow_bwd", "eval_depth"):
        save_array(out / "gt" / f"{name}.npy", getattr(ds, name))
    manifest = {"camera": ds.camera.to_dict(), "near": ds.near, "far": ds.far, "frames": rows,
                "scene": ds.scene.to_dict() if ds.scene else None,
                "trajectory": ds.trajectory.to_dict() if ds.trajectory else None}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_dataset(path) -> Dataset:
    path = Path(path)
    man = json.loads((path / "manifest.json").read_text())
    frames = []
    for row in man["frames"]:
        pose = Pose(np.asarray(row["rotation"]), np.asarray(row["translation"]))
        mask = (load_png(path / row["mask"]) > 0.5).astype(np.uint8)
        frames.append(Frame(load_png(path / row["image"]), pose, row["time"], mask))
    N = len(frames)
    gt = {n: load_array(path / "gt" / f"{n}.npy")
          for n in ("depth", "surface", "flow_fwd", "flow_bwd", "eval_depth")}
    ev = np.stack([load_png(path / f"eval/{n:03d}.png") for n in range(N)])
    em = np.stack([(load_png(path / f"eval/mask_{n:03d}.png") > 0.5).astype(np.uint8)
                   for n in range(N)])
    scene = SceneConfig(**man["scene"]) if man.get("scene") else None
    traj = TrajectoryConfig(**man["trajectory"]) if man.get("trajectory") else None
    return Dataset(Camera.from_dict(man["camera"]), man["near"], man["far"], frames,
                   gt["depth"], gt["surface"], gt["flow_fwd"], gt["flow_bwd"], ev, em,
                   gt["eval_depth"], scene, traj)


# commands ------------------------------------------------------------


def cmd_gen_scene(cfg: RunConfig, out) -> Path:
    """Render the configured synthetic scene into a dataset directory."""
    ds = make_dataset(SyntheticScene(cfg.scene), cfg.trajectory, cfg.oracle_samples)
    return write_dataset(ds, out)


def _trim_log(path: Path, stage: str, iteration: int):
    """Drop log lines written after the checkpoint being resumed from."""
    if not path.exists():
        return
    keep = []
    order = {"static": 0, "dynamic": 1}
    for line in path.read_text().splitlines():
        parts = dict(p.split("=", 1) for p in line.split())
        key = (order[parts["stage"]], int(parts["iter"]))
        if key <= (order[stage], iteration):
            keep.append(line + "\n")
    path.write_text("".join(keep))


def cmd_train(cfg: RunConfig, dataset: Dataset, out, resume: bool = False,
              stop_after: int | None = None) -> Trainer:
    """Run both stages, logging and checkpointing between steps.

    Args:
        resume: continue from ``out/checkpoint.npz`` when it exists.
        stop_after: stop after this many steps in this call (simulated interruption).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    data = TrainData(dataset, cfg.train.torch_dtype)
    tr = Trainer(data, cfg.train, cfg.static_field, cfg.dynamic_field, cfg.weights, cfg.seed)
    log_path, ckpt = out / LOG_NAME, out / CHECKPOINT_NAME
    if resume and ckpt.exists():
        arrays, meta = load_checkpoint(ckpt)
        tr.load_state(arrays, meta)
        _trim_log(log_path, tr.stage, tr.iteration)
    elif log_path.exists():
        log_path.unlink()
    steps = 0
    with open(log_path, "a") as fh:
        while not tr.finished():
            if tr.iteration >= tr._stage_length():
                tr.advance_stage()
                continue
            report = tr.step()
            steps += 1
            if tr.iteration % cfg.train.log_every == 0:
                fh.write(f"stage={tr.stage} " + report.line(tr.iteration) + "\n")
                fh.flush()
            if (tr.iteration % cfg.train.ckpt_every == 0
                    or tr.iteration == tr._stage_length()):
                save_checkpoint(ckpt, tr.state_arrays(), _meta(tr, cfg))
            if stop_after is not None and steps >= stop_after:
                return tr
    save_checkpoint(out / FINAL_NAME, tr.state_arrays(), _meta(tr, cfg))
    return tr


def _meta(tr: Trainer, cfg: RunConfig) -> dict:
    meta = tr.state_meta()
    meta["run"] = cfg.to_dict()
    return meta


def _flow_image(static, dynamic, camera, pose, t, near, far, num_samples, dtype,
                chunk: int = 4096) -> np.ndarray:
    """Surface scene flow projected to pixel displacement, masked by composited p > 0.5."""
    rays = image_rays(camera, pose, near, far, dtype)
    flows, masks = [], []
    with torch.no_grad():
        for i in range(0, len(rays), chunk):
            sub = rays.index(slice(i, i + chunk))
            s = sample_along_rays(sub, num_samples)
            d = sub.directions[:, None, :].expand_as(s.positions)
            so, do = static(s.positions, d), dynamic(s.positions, d, t)
            sigma, _ = blend(so, do)
            _, w = quadrature(sigma, s.deltas)
            depth = (w * s.distances).sum(-1) / w.sum(-1).clamp_min(1e-6)
            x = sub.origins + sub.directions * depth[:, None]
            f = dynamic(x, sub.directions, t).flow_fwd
            u0, v0, _ = project_points(camera, pose, x.double())
            u1, v1, _ = project_points(camera, pose, (x + f).double())
            flows.append(torch.stack([u1 - u0, v1 - v0], -1))
            masks.append(blended_probability(w, do.prob) > 0.5)
    H, W = camera.height, camera.width
    return flow_to_png(torch.cat(flows).reshape(H, W, 2).numpy(),
                       torch.cat(masks).reshape(H, W).numpy())


def cmd_render(checkpoint, pose: Pose, t: float, mode: str, out, camera: Camera | None = None,
               near: float | None = None, far: float | None = None,
               num_samples: int | None = None) -> dict:
    """Render color, depth and flow PNGs for one pose and time; returns the written paths."""
    static, dynamic, meta = fields_from_checkpoint(checkpoint)
    run = RunConfig.from_dict(meta["run"])
    camera = camera or run.trajectory.camera()
    near = run.scene.near if near is None else near
    far = run.scene.far if far is None else far
    K = num_samples or run.render_samples
    dtype = next(static.parameters()).dtype
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rgb, depth, _ = render_view(static, dynamic, camera, pose, t, near, far, K, mode, dtype)
    paths = {"color": out / "color.png", "depth": out / depth_png_name(near, far),
             "flow": out / "flow.png"}
    save_png(paths["color"], rgb)
    save_png(paths["depth"], depth_to_png(depth, near, far))
    save_png(paths["flow"], _flow_image(static, dynamic, camera, pose, t, near, far, K, dtype))
    return paths


def cmd_eval(checkpoint, dataset: Dataset, out, seed: int = 0,
             num_samples: int | None = None) -> EvalReport:
    """Evaluate held-out views; writes a text report, a CSV table and a JSON summary."""
    static, dynamic, meta = fields_from_checkpoint(checkpoint)
    run = RunConfig.from_dict(meta["run"])
    dtype = next(static.parameters()).dtype
    report = evaluate(static, dynamic, dataset, num_samples or run.render_samples, seed,
                      dtype=dtype)
    write_report(report, out)
    return report


def write_report(report: EvalReport, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.txt").write_text(report.to_text())
    (out / "eval_table.csv").write_text(report.to_csv())
    (out / "eval_summary.json").write_text(
        json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")


# argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynview", description="Dynamic view synthesis toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("gen-scene", help="render a synthetic dataset"))
    tp = sub.add_parser("train", help="train both stages")
    common(tp)
    tp.add_argument("--data", required=True, help="dataset directory")
    tp.add_argument("--resume", action="store_true")
    rp = sub.add_parser("render", help="render color, depth and flow PNGs")
    common(rp)
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--data", help="dataset directory providing poses")
    rp.add_argument("--frame", type=int, default=0, help="camera index in the dataset")
    rp.add_argument("--time", type=float, default=0.0, help="normalized timestamp")
    rp.add_argument("--mode", default="composite", choices=["static", "dynamic", "composite"])
    ep = sub.add_parser("eval", help="evaluate held-out views")
    common(ep)
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.out = args.out
    torch.manual_seed(cfg.seed)
    if args.command == "gen-scene":
        cmd_gen_scene(cfg, args.out)
    elif args.command == "train":
        cmd_train(cfg, read_dataset(args.data), args.out, resume=args.resume)
    elif args.command == "render":
        if args.data:
            ds = read_dataset(args.data)
            if not 0 <= args.frame < ds.num_frames:
                raise ConfigError(f"frame {args.frame} out of range")
            pose, cam, near, far = ds.poses[args.frame], ds.camera, ds.near, ds.far
        else:
            poses = cfg.trajectory.poses()
            if not 0 <= args.frame < len(poses):
                raise ConfigError(f"frame {args.frame} out of range")
            pose, cam, near, far = poses[args.frame], None, None, None
        if not 0.0 <= args.time <= 1.0:
            raise ConfigError("time must lie in [0, 1]")
        cmd_render(args.checkpoint, pose, args.time, args.mode, args.out, cam, near, far)
    elif args.command == "eval":
        cmd_eval(args.checkpoint, read_dataset(args.data), args.out, cfg.seed)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, ValueError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"dynview: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
