"""Image, depth and correspondence metrics plus the held-out evaluation protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .geometry import Camera, Pose, image_rays, pixel_rays, project_points
from .renderer import render_rays

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11x11 window at sigma 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PCK_ALPHA = 0.05
PCK_MAX_KEYPOINTS = 200


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at ``PSNR_CAP``.

    With ``mask`` only masked pixels count; an empty mask gives NaN.
    """
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    err = (pred - gt) ** 2
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        if not m.any():
            return float("nan")
        err = err[m]
    mse = float(err.mean())
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return -10.0 * math.log10(mse)


def ssim_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    out = np.zeros(pred.shape[:2])
    for c in range(pred.shape[-1]):
        x, y = pred[..., c], gt[..., c]

        def filt(a):
            return gaussian_filter(a, SSIM_SIGMA, mode="reflect", truncate=SSIM_TRUNCATE)

        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        out += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    return out / pred.shape[-1]


def ssim(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean SSIM over all pixels, or over ``mask`` pixels when given."""
    m = ssim_map(pred, gt)
    if mask is None:
        return float(m.mean())
    sel = np.asarray(mask).astype(bool)
    return float(m[sel].mean()) if sel.any() else float("nan")


def masked_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> dict:
    """PSNR and SSIM restricted to the mask pixels."""
    return {"psnr": psnr(pred, gt, mask), "ssim": ssim(pred, gt, mask)}


def depth_rmse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    d = (np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2
    if mask is not None:
        d = d[np.asarray(mask).astype(bool)]
    return float(np.sqrt(d.mean())) if d.size else float("nan")


def flow_epe(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean Euclidean end-point error between (..., 3) or (..., 2) flows."""
    e = np.linalg.norm(np.asarray(pred, np.float64) - np.asarray(gt, np.float64), axis=-1)
    if mask is not None:
        e = e[np.asarray(mask).astype(bool)]
    return float(e.mean()) if e.size else float("nan")


def transfer_points(camera: Camera, pose_next: Pose, points, flows) -> np.ndarray:
    """Pixel positions of ``points + flows`` in the camera ``pose_next``; (M, 2)."""
    x = torch.as_tensor(np.asarray(points, np.float64) + np.asarray(flows, np.float64))
    u, v, _ = project_points(camera, pose_next, x)
    return np.stack([u.numpy(), v.numpy()], axis=-1)


def pck_from_pixels(pred_px: np.ndarray, gt_px: np.ndarray, threshold: float) -> float:
    """Fraction of correspondences within ``threshold`` pixels (NaN if none)."""
    pred_px, gt_px = np.asarray(pred_px, np.float64), np.asarray(gt_px, np.float64)
    if len(gt_px) == 0:
        return float("nan")
    dist = np.linalg.norm(pred_px - gt_px, axis=-1)
    return float(np.mean(dist <= threshold))


def pck_t(camera: Camera, pose_next: Pose, points, flows, gt_pixels,
          alpha: float = PCK_ALPHA) -> float:
    """Percentage of correct keypoint transfers at threshold ``alpha * max(H, W)``.

    Args:
        camera: shared intrinsics.
        pose_next: camera of the target frame.
        points: (M, 3) surface points at the source time.
        flows: (M, 3) predicted forward scene flow at those points.
        gt_pixels: (M, 2) ground-truth pixel positions in the target frame.
        alpha: threshold as a fraction of the longer image side.
    """
    thr = alpha * max(camera.width, camera.height)
    return pck_from_pixels(transfer_points(camera, pose_next, points, flows), gt_pixels, thr)


def select_keypoints(mask: np.ndarray, rng: np.random.Generator,
                     limit: int = PCK_MAX_KEYPOINTS) -> np.ndarray:
    """Up to ``limit`` distinct mask pixels as flat indices, sorted."""
    idx = np.flatnonzero(np.asarray(mask).reshape(-1))
    if len(idx) > limit:
        idx = np.sort(rng.choice(idx, limit, replace=False))
    return idx


def gt_keypoint_targets(dataset, n: int, idx: np.ndarray) -> np.ndarray:
    """Ground-truth transfer of frame ``n`` keypoints into frame ``n + 1``; (M, 2)."""
    pts = dataset.surface[n].reshape(-1, 3)[idx]
    fl = dataset.flow_fwd[n].reshape(-1, 3)[idx]
    return transfer_points(dataset.camera, dataset.poses[n + 1], pts, fl)


@dataclass
class FrameReport:
    index: int
    psnr: float
    ssim: float
    psnr_dynamic: float
    ssim_dynamic: float
    depth_rmse: float


@dataclass
class EvalReport:
    frames: list = field(default_factory=list)
    pck_t: float = float("nan")
    flow_epe: float = float("nan")

    def summary(self) -> dict:
        def mean(name):
            vals = [getattr(f, name) for f in self.frames]
            vals = [v for v in vals if not math.isnan(v)]
            return float(np.mean(vals)) if vals else float("nan")

        return {"psnr": mean("psnr"), "ssim": mean("ssim"), "psnr_dynamic": mean("psnr_dynamic"),
                "ssim_dynamic": mean("ssim_dynamic"), "depth_rmse": mean("depth_rmse"),
                "pck_t": self.pck_t, "flow_epe": self.flow_epe}

    def to_text(self) -> str:
        lines = []
        for f in self.frames:
            lines += [f"frame {f.index}",
                      f"  psnr {f.psnr:.4f}", f"  ssim {f.ssim:.4f}",
                      f"  psnr_dynamic {f.psnr_dynamic:.4f}", f"  ssim_dynamic {f.ssim_dynamic:.4f}",
                      f"  depth_rmse {f.depth_rmse:.5f}"]
        lines.append("summary")
        lines += [f"  {k} {v:.5f}" for k, v in self.summary().items()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        cols = ["index", "psnr", "ssim", "psnr_dynamic", "ssim_dynamic", "depth_rmse"]
        rows = [",".join(cols)]
        for f in self.frames:
            rows.append(",".join([str(f.index)] + [f"{getattr(f, c):.6f}" for c in cols[1:]]))
        return "\n".join(rows) + "\n"


@torch.no_grad()
def render_view(static, dynamic, camera: Camera, pose: Pose, t: float, near: float, far: float,
                num_samples: int, mode: str = "composite", dtype=torch.float32):
    """Full-image render; returns (rgb (H, W, 3), depth (H, W), RenderResult)."""
    rays = image_rays(camera, pose, near, far, dtype)
    res = render_rays(mode, rays, num_samples, t, static, dynamic)
    H, W = camera.height, camera.width
    return (res.color.reshape(H, W, 3).double().numpy(), res.depth.reshape(H, W).double().numpy(),
            res)


@torch.no_grad()
def predicted_keypoint_transfer(static, dynamic, dataset, n: int, idx: np.ndarray,
                                num_samples: int, dtype=torch.float32) -> np.ndarray:
    """Transfer frame ``n`` keypoints into frame ``n + 1`` with the learned flow.

    The surface point is the composite render's expected depth normalized by
    opacity; the flow is the dynamic field's forward flow queried there.
    """
    cam = dataset.camera
    W = cam.width
    u = torch.as_tensor(idx % W, dtype=torch.float64)
    v = torch.as_tensor(idx // W, dtype=torch.float64)
    rays = pixel_rays(cam, dataset.poses[n], u, v, dataset.near, dataset.far)
    rays = type(rays)(rays.origins.to(dtype), rays.directions.to(dtype), rays.near, rays.far)
    t = dataset.times[n]
    res = render_rays("composite", rays, num_samples, t, static, dynamic)
    depth = res.depth / res.opacity.clamp_min(1e-6)
    x = rays.origins + rays.directions * depth[:, None]
    flow = dynamic(x, rays.directions, t).flow_fwd
    return transfer_points(cam, dataset.poses[n + 1], x.double().numpy(), flow.double().numpy())


def evaluate_pck(static, dynamic, dataset, num_samples: int, seed: int = 0,
                 alpha: float = PCK_ALPHA, dtype=torch.float32) -> float:
    """PCK-T over every adjacent frame pair, pooled over keypoints."""
    rng = np.random.default_rng(seed)
    thr = alpha * max(dataset.camera.width, dataset.camera.height)
    hits, total = 0, 0
    for n in range(dataset.num_frames - 1):
        idx = select_keypoints(dataset.masks[n], rng)
        if len(idx) == 0:
            continue
        gt = gt_keypoint_targets(dataset, n, idx)
        pred = predicted_keypoint_transfer(static, dynamic, dataset, n, idx, num_samples, dtype)
        hits += int(np.sum(np.linalg.norm(pred - gt, axis=-1) <= thr))
        total += len(idx)
    return hits / total if total else float("nan")


def evaluate_gt_pck(dataset, seed: int = 0, alpha: float = PCK_ALPHA) -> float:
    """PCK-T of the ground-truth flow itself; a self-check that must give exactly 1."""
    rng = np.random.default_rng(seed)
    thr = alpha * max(dataset.camera.width, dataset.camera.height)
    hits, total = 0, 0
    for n in range(dataset.num_frames - 1):
        idx = select_keypoints(dataset.masks[n], rng)
        gt = gt_keypoint_targets(dataset, n, idx)
        pts = dataset.surface[n].reshape(-1, 3)[idx]
        fl = dataset.flow_fwd[n].reshape(-1, 3)[idx]
        pred = transfer_points(dataset.camera, dataset.poses[n + 1], pts, fl)
        hits += int(np.sum(np.linalg.norm(pred - gt, axis=-1) <= thr))
        total += len(idx)
    return hits / total if total else float("nan")


@torch.no_grad()
def evaluate_flow_epe(static, dynamic, dataset, num_samples: int, dtype=torch.float32) -> float:
    """Mean 3D forward-flow error over mask pixels of frames 0..N-2."""
    errs = []
    cam = dataset.camera
    for n in range(dataset.num_frames - 1):
        idx = np.flatnonzero(dataset.masks[n].reshape(-1))
        if len(idx) == 0:
            continue
        rays = image_rays(cam, dataset.poses[n], dataset.near, dataset.far, dtype).index(
            torch.as_tensor(idx))
        t = dataset.times[n]
        res = render_rays("composite", rays, num_samples, t, static, dynamic)
        x = rays.origins + rays.directions * (res.depth / res.opacity.clamp_min(1e-6))[:, None]
        f = dynamic(x, rays.directions, t).flow_fwd.double().numpy()
        errs.append(np.linalg.norm(f - dataset.flow_fwd[n].reshape(-1, 3)[idx], axis=-1))
    return float(np.concatenate(errs).mean()) if errs else float("nan")


def evaluate(static, dynamic, dataset, num_samples: int, seed: int = 0,
             frames=None, dtype=torch.float32, with_flow: bool = True) -> EvalReport:
    """Held-out evaluation: the first camera at timestamps ``t_1 .. t_{N-1}``."""
    frames = range(1, dataset.num_frames) if frames is None else frames
    report = EvalReport()
    cam = dataset.camera
    for n in frames:
        rgb, depth, _ = render_view(static, dynamic, cam, dataset.poses[0], dataset.times[n],
                                    dataset.near, dataset.far, num_samples, dtype=dtype)
        gt, m = dataset.eval_images[n], dataset.eval_masks[n]
        report.frames.append(FrameReport(
            n, psnr(rgb, gt), ssim(rgb, gt), psnr(rgb, gt, m), ssim(rgb, gt, m),
            depth_rmse(depth, dataset.eval_depth[n])))
    if with_flow:
        report.pck_t = evaluate_pck(static, dynamic, dataset, num_samples, seed, dtype=dtype)
        report.flow_epe = evaluate_flow_epe(static, dynamic, dataset, num_samples, dtype)
    return report
