"""Pinhole cameras, rigid poses, ray generation, projection and inverse warping.

Conventions:
    * Poses are camera-to-world: ``x_world = R @ x_cam + t``.
    * Camera frame is x right, y down, z forward (optical axis).
    * The ray for pixel ``(u, v)`` passes through the integer coordinate itself
      (no half-pixel offset).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive camera-frame depth."""


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def contains(self, u: float, v: float) -> bool:
        return 0 <= u <= self.width - 1 and 0 <= v <= self.height - 1

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation)

    def tensors(self, like: Tensor | None = None, dtype=None) -> tuple[Tensor, Tensor]:
        dtype = dtype or (like.dtype if like is not None else torch.get_default_dtype())
        return (torch.as_tensor(self.rotation, dtype=dtype),
                torch.as_tensor(self.translation, dtype=dtype))


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` whose optical axis points at ``target``.

    ``up`` is the world direction that should appear as image-up, i.e. the
    negative camera y axis.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(-up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.near < self.far):
            raise ValueError("need 0 <= near < far")

    def at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


class Rays(NamedTuple):
    """A batch of rays sharing the same near/far bounds."""

    origins: Tensor  # (B, 3)
    directions: Tensor  # (B, 3), unit length
    near: float
    far: float

    def __len__(self):
        return self.origins.shape[0]

    def index(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.near, self.far)

    @classmethod
    def from_ray(cls, ray: Ray, dtype=torch.float64) -> "Rays":
        return cls(torch.as_tensor(ray.origin, dtype=dtype)[None],
                   torch.as_tensor(ray.direction, dtype=dtype)[None], ray.near, ray.far)


@dataclass(frozen=True)
class PixelPatch:
    u0: int
    v0: int
    size: int
    stride: int = 1

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise ValueError("patch size and stride must be >= 1")

    @property
    def extent(self) -> int:
        return (self.size - 1) * self.stride + 1

    def fits(self, camera: Camera) -> bool:
        return (self.u0 >= 0 and self.v0 >= 0 and self.u0 + self.extent <= camera.width
                and self.v0 + self.extent <= camera.height)

    def pixel_grid(self, dtype=torch.float64) -> tuple[Tensor, Tensor]:
        """Row-major ``(u, v)`` pixel coordinates, each of shape ``(size, size)``."""
        r = torch.arange(self.size, dtype=dtype) * self.stride
        v, u = torch.meshgrid(r + self.v0, r + self.u0, indexing="ij")
        return u, v


def pixel_directions(camera: Camera, u: Tensor, v: Tensor) -> Tensor:
    """Unnormalized camera-frame directions ``((u-cx)/fx, (v-cy)/fy, 1)``."""
    x = (u - camera.cx) / camera.fx
    y = (v - camera.cy) / camera.fy
    return torch.stack([x, y, torch.ones_like(x)], dim=-1)


def pixel_rays(camera: Camera, pose: Pose, u: Tensor, v: Tensor,
               near: float = 0.0, far: float = 1.0) -> Rays:
    """Batched world-frame rays through pixel coordinates ``u``, ``v`` (any shape, flattened)."""
    u = torch.as_tensor(u).reshape(-1)
    v = torch.as_tensor(v, dtype=u.dtype).reshape(-1)
    if not u.is_floating_point():
        u, v = u.double(), v.double()
    R, t = pose.tensors(u)
    d = pixel_directions(camera, u, v)
    d = d / d.norm(dim=-1, keepdim=True)
    d = d @ R.T
    o = t.expand_as(d)
    return Rays(o, d, near, far)


def image_rays(camera: Camera, pose: Pose, near: float, far: float, dtype=torch.float32) -> Rays:
    """Rays for every pixel of the image in row-major order."""
    v, u = torch.meshgrid(torch.arange(camera.height, dtype=torch.float64),
                          torch.arange(camera.width, dtype=torch.float64), indexing="ij")
    rays = pixel_rays(camera, pose, u, v, near, far)
    return Rays(rays.origins.to(dtype), rays.directions.to(dtype), near, far)


def camera_ray(camera: Camera, pose: Pose, u: float, v: float,
               near: float = 0.0, far: float = 1.0) -> Ray:
    """Single world-frame ray through pixel ``(u, v)``.

    Raises:
        ValueError: if the pixel lies outside the image.
    """
    if not camera.contains(u, v):
        raise ValueError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    rays = pixel_rays(camera, pose, torch.tensor([float(u)], dtype=torch.float64),
                      torch.tensor([float(v)], dtype=torch.float64), near, far)
    return Ray(rays.origins[0].numpy().copy(), rays.directions[0].numpy().copy(), near, far)


def project_points(camera: Camera, pose: Pose, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Project world points ``(..., 3)``; returns ``u, v, z`` without validity checks."""
    R, t = pose.tensors(x)
    xc = (x - t) @ R
    z = xc[..., 2]
    u = camera.fx * xc[..., 0] / z + camera.cx
    v = camera.fy * xc[..., 1] / z + camera.cy
    return u, v, z


def project(camera: Camera, pose: Pose, x) -> tuple[float, float, float]:
    """Project a single world point to ``(u, v, z)``.

    Raises:
        BehindCameraError: if the camera-frame depth is not positive.
    """
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64))
    u, v, z = project_points(camera, pose, xt)
    if not z > 0:
        raise BehindCameraError(f"point has camera depth {float(z):.4g} <= 0")
    return float(u), float(v), float(z)


def bilinear_sample(image: Tensor, x: Tensor, y: Tensor,
                    tol: float = 1e-4) -> tuple[Tensor, Tensor]:
    """Bilinearly sample ``image`` (H, W, C) at continuous pixel coords.

    Coordinates are clamped into the image; the returned boolean mask is
    False wherever clamping moved a coordinate by more than ``tol`` pixels.
    """
    H, W = image.shape[:2]
    inside = (x >= -tol) & (x <= W - 1 + tol) & (y >= -tol) & (y <= H - 1 + tol)
    x = x.clamp(0, W - 1)
    y = y.clamp(0, H - 1)
    x0 = x.detach().floor().clamp(max=W - 2 if W > 1 else 0).long()
    y0 = y.detach().floor().clamp(max=H - 2 if H > 1 else 0).long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    ax = (x - x0.to(x.dtype))[..., None]
    ay = (y - y0.to(y.dtype))[..., None]
    top = image[y0, x0] * (1 - ax) + image[y0, x1] * ax
    bottom = image[y1, x0] * (1 - ax) + image[y1, x1] * ax
    return top * (1 - ay) + bottom * ay, inside


def inverse_warp(rendered_patch: Tensor, depth_patch: Tensor, pose_r: Pose, pose_m: Pose,
                 camera: Camera, patch: PixelPatch, patch_r: PixelPatch | None = None,
                 detach_depth: bool = False) -> tuple[Tensor, Tensor]:
    """Warp a patch rendered at ``pose_r`` into the source view ``pose_m``.

    Each source pixel of ``patch`` is lifted to 3D along its ray by its
    rendered ray-distance depth, projected into ``pose_r`` and the rendered
    patch is bilinearly sampled there. ``patch_r`` gives the pixel placement
    of ``rendered_patch`` in the novel view (defaults to ``patch``).

    Args:
        rendered_patch: (P, P, 3) colors rendered at ``pose_r``.
        depth_patch: (P, P) expected termination distances at ``pose_m``.

    Returns:
        ``(warped, mask)``: the (P, P, 3) warped patch, zero where invalid, and
        a (P, P) float mask that is 1 where the reprojection lands inside
        ``rendered_patch`` in front of the camera.
    """
    patch_r = patch_r or patch
    dtype = rendered_patch.dtype
    u, v = patch.pixel_grid(dtype)
    rays = pixel_rays(camera, pose_m, u, v)
    depth = depth_patch.detach() if detach_depth else depth_patch
    points = rays.origins + rays.directions * depth.reshape(-1, 1)
    ur, vr, z = project_points(camera, pose_r, points)
    # continuous coordinates inside the rendered patch
    px = (ur - patch_r.u0) / patch_r.stride
    py = (vr - patch_r.v0) / patch_r.stride
    front = z > 0
    safe_px = torch.where(front, px, torch.full_like(px, -1.0))
    safe_py = torch.where(front, py, torch.full_like(py, -1.0))
    colors, inside = bilinear_sample(rendered_patch, safe_px, safe_py)
    mask = (inside & front).to(dtype)
    warped = colors * mask[..., None]
    P = patch.size
    return warped.reshape(P, P, -1), mask.reshape(P, P)
