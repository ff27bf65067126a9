"""Analytic dynamic scenes: a textured background slab and a moving primitive.

The scene doubles as the data generator and the ground-truth oracle. Body
boundaries use a quintic smoothstep of half-width ``edge`` so that the
oracle quadrature converges; density is exactly ``sigma_solid`` inside a body
and exactly 0 away from it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import Tensor

from .fields import DynamicOutput, StaticOutput, frame_time
from .geometry import Camera, Pose, image_rays, look_at
from .renderer import integrate, quadrature, sample_along_rays

K_ORACLE = 512


@dataclass
class SceneConfig:
    """Geometry and appearance of a synthetic scene.

    ``mover_center`` holds polynomial coefficients per axis, lowest order
    first: ``c(t) = sum_k coef[k] * t**k``.
    """

    kind: str = "sphere"  # sphere | box
    mover_center: list = field(default_factory=lambda: [[-0.32, 0.2, -0.5],
                                                        [0.64, -0.55, 0.0],
                                                        [0.0, 0.15, 0.0]])
    mover_size: float = 0.18  # sphere radius or box half-extent
    growth: float = 0.0  # relative radius growth per unit time (non-rigid when > 0)
    mover_texture: str = "checker"  # checker | solid
    mover_colors: list = field(default_factory=lambda: [[0.9, 0.3, 0.15], [0.2, 0.45, 0.9]])
    mover_period: float = 0.9  # checker cells per unit of normalized radius
    plane_point: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    plane_normal: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    plane_thickness: float = 0.1
    plane_period: float = 0.5
    sigma_solid: float = 200.0
    edge: float = 0.01
    near: float = 1.2
    far: float = 3.6

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown mover kind {self.kind!r}")
        if self.mover_texture not in ("checker", "solid"):
            raise ValueError(f"unknown mover texture {self.mover_texture!r}")
        if not 0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")
        chord = min(2 * self.mover_size, self.plane_thickness)
        if self.sigma_solid * chord < 5:
            raise ValueError("scene bodies are not effectively opaque (sigma * chord < 5)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrajectoryConfig:
    num_frames: int = 12
    width: int = 64
    height: int = 64
    focal: float = 80.0
    kind: str = "linear"  # linear | orbit
    extent: float = 0.3  # rig length (linear) or arc angle in radians (orbit)
    distance: float = 2.0  # camera distance from the look-at target
    target: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def __post_init__(self):
        if self.num_frames < 3:
            raise ValueError("need at least 3 frames")
        if self.kind not in ("linear", "orbit"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def camera(self) -> Camera:
        return Camera(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2,
                      self.width, self.height)

    def poses(self) -> list[Pose]:
        target = np.asarray(self.target, dtype=np.float64)
        out = []
        for n in range(self.num_frames):
            a = frame_time(n, self.num_frames) - 0.5
            if self.kind == "linear":
                eye = target + np.array([a * self.extent, 0.0, -self.distance])
            else:
                ang = a * self.extent
                eye = target + self.distance * np.array([math.sin(ang), 0.0, -math.cos(ang)])
            out.append(look_at(eye, target))
        return out

    def times(self) -> list[float]:
        return [frame_time(n, self.num_frames) for n in range(self.num_frames)]


def _smoothstep(sd: Tensor, edge: float) -> Tensor:
    """Occupancy from signed distance: 1 for sd <= -edge, 0 for sd >= edge, quintic in between."""
    s = ((edge - sd) / (2 * edge)).clamp(0.0, 1.0)
    return s * s * s * (s * (s * 6 - 15) + 10)


class SyntheticScene:
    def __init__(self, cfg: SceneConfig | None = None):
        self.cfg = cfg or SceneConfig()
        c = self.cfg
        self.coef = np.asarray(c.mover_center, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(c.plane_normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.plane_point = np.asarray(c.plane_point, dtype=np.float64)
        helper = np.array([0.0, 1.0, 0.0]) if abs(self.normal[1]) < 0.9 else np.array([1.0, 0, 0])
        self.tangent_a = np.cross(helper, self.normal)
        self.tangent_a /= np.linalg.norm(self.tangent_a)
        self.tangent_b = np.cross(self.normal, self.tangent_a)

    # trajectory -------------------------------------------------------
    def center(self, t: float) -> np.ndarray:
        return sum(self.coef[k] * t ** k for k in range(len(self.coef)))

    def radius(self, t: float) -> float:
        return self.cfg.mover_size * (1.0 + self.cfg.growth * t)

    # signed distances -------------------------------------------------
    def _mover_sd(self, x: Tensor, t: float) -> Tensor:
        q = x - torch.as_tensor(self.center(t), dtype=x.dtype)
        r = self.radius(t)
        if self.cfg.kind == "sphere":
            return q.norm(dim=-1) - r
        return (q.abs() - r).amax(dim=-1)

    def _plane_sd(self, x: Tensor) -> Tensor:
        n = torch.as_tensor(self.normal, dtype=x.dtype)
        h = (x - torch.as_tensor(self.plane_point, dtype=x.dtype)) @ n
        half = self.cfg.plane_thickness / 2
        return (h - half).abs() - half

    # textures ---------------------------------------------------------
    def _plane_color(self, x: Tensor) -> Tensor:
        p0 = torch.as_tensor(self.plane_point, dtype=x.dtype)
        a = (x - p0) @ torch.as_tensor(self.tangent_a, dtype=x.dtype)
        b = (x - p0) @ torch.as_tensor(self.tangent_b, dtype=x.dtype)
        w = 2 * math.pi / self.cfg.plane_period
        check = 0.5 + 0.5 * torch.tanh(2.0 * torch.sin(w * a) * torch.sin(w * b))
        base = torch.stack([0.45 + 0.25 * torch.tanh(a), 0.55 + 0.2 * torch.tanh(b),
                            0.35 + 0.15 * torch.tanh(a - b)], dim=-1)
        return base * (0.55 + 0.45 * check[..., None])

    def _mover_color(self, x: Tensor, t: float) -> Tensor:
        c0, c1 = (torch.as_tensor(c, dtype=x.dtype) for c in self.cfg.mover_colors)
        if self.cfg.mover_texture == "solid":
            return c0.expand(x.shape[:-1] + (3,))
        # material coordinates: normalized offset from the center
        q = (x - torch.as_tensor(self.center(t), dtype=x.dtype)) / self.radius(t)
        w = math.pi * 2 * self.cfg.mover_period
        check = 0.5 + 0.5 * torch.tanh(2.0 * torch.sin(w * q[..., 0]) * torch.sin(w * q[..., 1])
                                       * torch.cos(w * q[..., 2] * 0.5))
        grad = (0.5 + 0.5 * q[..., 1].clamp(-1, 1))[..., None]
        return check[..., None] * c0 + (1 - check[..., None]) * c1 * (0.7 + 0.3 * grad)

    # fields -----------------------------------------------------------
    def occupancies(self, x: Tensor, t: float) -> tuple[Tensor, Tensor]:
        return (_smoothstep(self._mover_sd(x, t), self.cfg.edge),
                _smoothstep(self._plane_sd(x), self.cfg.edge))

    def fields(self, x: Tensor, t: float, dynamic_only: bool = False) -> tuple[Tensor, Tensor]:
        """Density and color at world points ``x`` (..., 3) and time ``t``."""
        occ_m, occ_b = self.occupancies(x, t)
        if dynamic_only:
            occ_b = torch.zeros_like(occ_b)
        total = occ_m + occ_b
        sigma = self.cfg.sigma_solid * total.clamp(max=1.0)
        cm = self._mover_color(x, t)
        cb = self._plane_color(x)
        wsum = total.clamp_min(1e-12)[..., None]
        rgb = (occ_m[..., None] * cm + occ_b[..., None] * cb) / wsum
        return sigma, rgb

    def inside_mover(self, x: Tensor, t: float) -> Tensor:
        """Points carrying any mover density, including the soft boundary shell."""
        return self._mover_sd(x, t) < self.cfg.edge

    def flow(self, x: Tensor, t: float, t_to: float) -> Tensor:
        """Ground-truth displacement of material at ``x`` from time ``t`` to ``t_to``."""
        c_t = torch.as_tensor(self.center(t), dtype=x.dtype)
        c_n = torch.as_tensor(self.center(t_to), dtype=x.dtype)
        scale = self.radius(t_to) / self.radius(t)
        f = (c_n - c_t) + (scale - 1.0) * (x - c_t)
        return torch.where(self.inside_mover(x, t)[..., None], f, torch.zeros_like(f))

    # analytic intersections --------------------------------------------
    def mover_hit(self, o: Tensor, d: Tensor, t: float) -> Tensor:
        """Distance to the first mover intersection, ``inf`` when missed."""
        c = torch.as_tensor(self.center(t), dtype=o.dtype)
        r = self.radius(t)
        oc = o - c
        if self.cfg.kind == "sphere":
            b = (oc * d).sum(-1)
            disc = b * b - ((oc * oc).sum(-1) - r * r)
            root = -b - torch.sqrt(disc.clamp_min(0))
            hit = (disc >= 0) & (root > 0)
            return torch.where(hit, root, torch.full_like(root, math.inf))
        inv = 1.0 / torch.where(d.abs() < 1e-12, torch.full_like(d, 1e-12), d)
        t0 = (-r - oc) * inv
        t1 = (r - oc) * inv
        tmin = torch.minimum(t0, t1).amax(-1)
        tmax = torch.maximum(t0, t1).amin(-1)
        hit = (tmax >= tmin) & (tmin > 0)
        return torch.where(hit, tmin, torch.full_like(tmin, math.inf))

    def plane_hit(self, o: Tensor, d: Tensor) -> Tensor:
        n = torch.as_tensor(self.normal, dtype=o.dtype)
        p0 = torch.as_tensor(self.plane_point, dtype=o.dtype)
        denom = d @ n
        s = ((p0 - o) @ n) / torch.where(denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom)
        return torch.where(s > 0, s, torch.full_like(s, math.inf))


def scene_fields(scene: SyntheticScene, x, t: float) -> tuple[Tensor, Tensor]:
    return scene.fields(torch.as_tensor(x, dtype=torch.float64), t)


def scene_flow_gt(scene: SyntheticScene, x, t: float, direction: int, dt: float) -> Tensor:
    """Ground-truth scene flow to the next (``direction=+1``) or previous frame."""
    return scene.flow(torch.as_tensor(x, dtype=torch.float64), t, t + direction * dt)


class OracleDynamicField:
    """The scene's dynamic part exposed through the dynamic-field interface.

    ``flow_mode`` selects the injected flow: ``"rigid"`` applies the mover's
    center displacement to every point, ``"material"`` uses the per-point
    ground truth (zero outside the mover). The blending probability is 1
    inside the mover and 0 elsewhere.
    """

    def __init__(self, scene: SyntheticScene, dt: float, flow_mode: str = "rigid",
                 include_background: bool = False):
        if flow_mode not in ("rigid", "material"):
            raise ValueError(f"unknown flow mode {flow_mode!r}")
        self.scene = scene
        self.dt = dt
        self.flow_mode = flow_mode
        self.include_background = include_background

    def _flow(self, x: Tensor, t: Tensor | float, step: int) -> Tensor:
        t = float(t)
        if self.flow_mode == "rigid":
            v = self.scene.center(t + step * self.dt) - self.scene.center(t)
            return torch.as_tensor(v, dtype=x.dtype).expand_as(x).clone()
        return self.scene.flow(x, t, t + step * self.dt)

    def __call__(self, x: Tensor, d: Tensor, t) -> DynamicOutput:
        t = float(t)
        sigma, rgb = self.scene.fields(x, t, dynamic_only=not self.include_background)
        prob = self.scene.inside_mover(x, t).to(x.dtype)
        return DynamicOutput(rgb, sigma, self._flow(x, t, 1), self._flow(x, t, -1), prob)


class OracleStaticField:
    """The scene's static background as a static field."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene

    def __call__(self, x: Tensor, d: Tensor):
        occ = _smoothstep(self.scene._plane_sd(x), self.scene.cfg.edge)
        return StaticOutput(self.scene._plane_color(x), self.scene.cfg.sigma_solid * occ)


@dataclass
class OracleView:
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) expected termination distance
    mask: np.ndarray  # (H, W) uint8, 1 where the mover is the nearest hit
    surface: np.ndarray  # (H, W, 3) analytic nearest-hit points


def oracle_render(scene: SyntheticScene, camera: Camera, pose: Pose, t: float,
                  num_samples: int = K_ORACLE, chunk: int = 2048) -> OracleView:
    """Quadrature render of the analytic scene with deterministic midpoint samples."""
    rays = image_rays(camera, pose, scene.cfg.near, scene.cfg.far, dtype=torch.float64)
    colors, depths = [], []
    for i in range(0, len(rays), chunk):
        sub = rays.index(slice(i, i + chunk))
        samples = sample_along_rays(sub, num_samples)
        sigma, rgb = scene.fields(samples.positions, t)
        _, w = quadrature(sigma, samples.deltas)
        res = integrate(w, samples, rgb)
        colors.append(res.color)
        depths.append(res.depth)
    H, W = camera.height, camera.width
    s_m = scene.mover_hit(rays.origins, rays.directions, t)
    s_p = scene.plane_hit(rays.origins, rays.directions)
    mask = s_m < s_p
    s_hit = torch.minimum(s_m, s_p)
    surface = rays.origins + rays.directions * torch.where(
        torch.isfinite(s_hit), s_hit, torch.zeros_like(s_hit))[:, None]
    return OracleView(torch.cat(colors).reshape(H, W, 3).numpy(),
                      torch.cat(depths).reshape(H, W).numpy(),
                      mask.reshape(H, W).numpy().astype(np.uint8),
                      surface.reshape(H, W, 3).numpy())


@dataclass
class Frame:
    image: np.ndarray
    pose: Pose
    time: float
    mask: np.ndarray


@dataclass
class Dataset:
    """Training frames plus ground truth used only for evaluation.

    ``flow_fwd[n]`` / ``flow_bwd[n]`` hold the ground-truth scene flow of the
    nearest visible surface point of each pixel; the missing direction at the
    first / last frame is all zeros. ``eval_*`` arrays are the held-out views
    rendered from the first camera at every timestamp.
    """

    camera: Camera
    near: float
    far: float
    frames: list
    depth: np.ndarray
    surface: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    eval_images: np.ndarray
    eval_masks: np.ndarray
    eval_depth: np.ndarray
    scene: SceneConfig | None = None
    trajectory: TrajectoryConfig | None = None

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def dt(self) -> float:
        return 1.0 / (self.num_frames - 1)

    @property
    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])

    @property
    def masks(self) -> np.ndarray:
        return np.stack([f.mask for f in self.frames])

    @property
    def poses(self) -> list:
        return [f.pose for f in self.frames]

    @property
    def times(self) -> list:
        return [f.time for f in self.frames]


def make_dataset(scene: SyntheticScene, trajectory: TrajectoryConfig,
                 num_samples: int = K_ORACLE) -> Dataset:
    """Render every training frame (camera ``n`` at time ``t_n``) plus held-out views."""
    camera = trajectory.camera()
    poses = trajectory.poses()
    times = trajectory.times()
    N = trajectory.num_frames
    dt = 1.0 / (N - 1)
    frames, depth, surface, ffwd, fbwd = [], [], [], [], []
    for n in range(N):
        view = oracle_render(scene, camera, poses[n], times[n], num_samples)
        frames.append(Frame(view.image, poses[n], times[n], view.mask))
        depth.append(view.depth)
        surface.append(view.surface)
        x = torch.as_tensor(view.surface)
        zero = np.zeros_like(view.surface)
        ffwd.append(scene.flow(x, times[n], times[n] + dt).numpy() if n < N - 1 else zero)
        fbwd.append(scene.flow(x, times[n], times[n] - dt).numpy() if n > 0 else zero)
    ev = [oracle_render(scene, camera, poses[0], times[n], num_samples) for n in range(N)]
    return Dataset(camera, scene.cfg.near, scene.cfg.far, frames, np.stack(depth),
                   np.stack(surface), np.stack(ffwd), np.stack(fbwd),
                   np.stack([v.image for v in ev]), np.stack([v.mask for v in ev]),
                   np.stack([v.depth for v in ev]), scene.cfg, trajectory)


def textureless_scene() -> SceneConfig:
    return SceneConfig(mover_texture="solid")


def scaling_scene() -> SceneConfig:
    return SceneConfig(growth=1.0, mover_size=0.12)
