"""Ray sampling, volume-rendering quadrature and the static / dynamic / composite renderers."""

from __future__ import annotations

from typing import Callable, NamedTuple

import torch
from torch import Tensor

from .fields import DynamicOutput, StaticOutput
from .geometry import Camera, PixelPatch, Pose, Ray, Rays, pixel_rays

SENTINEL_FACTOR = 10.0
BLEND_EPS = 1e-9

StaticFn = Callable[[Tensor, Tensor], StaticOutput]
DynamicFn = Callable[[Tensor, Tensor, object], DynamicOutput]


class RaySamples(NamedTuple):
    positions: Tensor  # (B, K, 3)
    distances: Tensor  # (B, K)
    deltas: Tensor  # (B, K)


class RenderResult(NamedTuple):
    color: Tensor  # (B, 3)
    depth: Tensor  # (B,)
    weights: Tensor  # (B, K)
    opacity: Tensor  # (B,)
    surface: Tensor  # (B, 3)


def sample_along_rays(rays: Rays, num_samples: int, stratified: bool = False,
                      generator: torch.Generator | None = None,
                      sentinel_factor: float = SENTINEL_FACTOR) -> RaySamples:
    """Place ``num_samples`` distances in equal bins over ``[near, far]``.

    Bin midpoints when ``stratified`` is false, one uniform jitter per bin
    otherwise. The final delta is ``sentinel_factor * (far - near)``.
    """
    if num_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    o, d = rays.origins, rays.directions
    B, dtype = o.shape[0], o.dtype
    span = rays.far - rays.near
    edges = rays.near + span * torch.arange(num_samples, dtype=dtype) / num_samples
    width = span / num_samples
    if stratified:
        jitter = torch.rand((B, num_samples), generator=generator, dtype=torch.float64)
        s = edges + width * jitter.to(dtype)
    else:
        s = (edges + 0.5 * width).expand(B, num_samples)
    deltas = torch.cat([s[:, 1:] - s[:, :-1],
                        torch.full((B, 1), sentinel_factor * span, dtype=dtype)], dim=1)
    x = o[:, None, :] + s[..., None] * d[:, None, :]
    return RaySamples(x, s, deltas)


def sample_ray(ray: Ray, num_samples: int, stratified: bool = False,
               generator: torch.Generator | None = None) -> RaySamples:
    """Single-ray version of :func:`sample_along_rays`; leading batch dim of 1 is kept."""
    return sample_along_rays(Rays.from_ray(ray), num_samples, stratified, generator)


def quadrature(sigma: Tensor, deltas: Tensor) -> tuple[Tensor, Tensor]:
    """Alpha-compositing transmittances and weights along the last axis.

    ``T_i = exp(-sum_{j<i} sigma_j delta_j)``, ``w_i = T_i (1 - exp(-sigma_i delta_i))``.

    Raises:
        ValueError: on negative density.
    """
    if bool((sigma < 0).any()):
        raise ValueError("density must be non-negative")
    tau = sigma * deltas
    excl = torch.cat([torch.zeros_like(tau[..., :1]), torch.cumsum(tau, dim=-1)[..., :-1]], dim=-1)
    T = torch.exp(-excl)
    alpha = -torch.expm1(-tau)
    return T, T * alpha


def surface_point(weights: Tensor, positions: Tensor) -> Tensor:
    """Unnormalized weighted average ``sum_i w_i x_i``."""
    return (weights[..., None] * positions).sum(dim=-2)


def integrate(weights: Tensor, samples: RaySamples, rgb: Tensor) -> RenderResult:
    color = (weights[..., None] * rgb).sum(dim=-2)
    depth = (weights * samples.distances).sum(dim=-1)
    return RenderResult(color, depth, weights, weights.sum(dim=-1),
                        surface_point(weights, samples.positions))


def _dirs(rays: Rays, samples: RaySamples) -> Tensor:
    return rays.directions[:, None, :].expand_as(samples.positions)


def render_static(field: StaticFn, rays: Rays, samples: RaySamples,
                  out: StaticOutput | None = None) -> RenderResult:
    out = out if out is not None else field(samples.positions, _dirs(rays, samples))
    _, w = quadrature(out.sigma, samples.deltas)
    return integrate(w, samples, out.rgb)


render_ray_static = render_static


class DynamicTriple(NamedTuple):
    """Renders of one ray batch at ``t - dt``, ``t`` and ``t + dt``.

    ``renders`` and ``outputs`` are keyed by frame offset (-1, 0, +1); a
    boundary frame has no entry for its missing neighbor. ``outputs[+1]`` is
    the field evaluated at the forward-warped points and time ``t + dt`` (it
    carries the round-trip flows), likewise ``outputs[-1]``.
    """

    renders: dict
    outputs: dict
    warped_positions: dict


def render_dynamic_triple(field: DynamicFn, rays: Rays, samples: RaySamples, t: float,
                          dt: float, has_prev: bool | None = None,
                          has_next: bool | None = None,
                          center: DynamicOutput | None = None) -> DynamicTriple:
    """Render the dynamic field at ``t`` and, through its scene flow, at ``t +- dt``.

    Neighbor renders re-query the field at the flow-displaced sample points and
    composite over the same deltas as the center ray.
    """
    eps = 1e-9
    if has_prev is None:
        has_prev = t - dt >= -eps
    if has_next is None:
        has_next = t + dt <= 1 + eps
    d = _dirs(rays, samples)
    c = center if center is not None else field(samples.positions, d, t)
    _, w = quadrature(c.sigma, samples.deltas)
    renders = {0: integrate(w, samples, c.rgb)}
    outputs = {0: c}
    warped = {0: samples.positions}
    for offset, flow, present in ((1, c.flow_fwd, has_next), (-1, c.flow_bwd, has_prev)):
        if not present:
            continue
        xw = samples.positions + flow
        o = field(xw, d, t + offset * dt)
        _, wn = quadrature(o.sigma, samples.deltas)
        renders[offset] = integrate(wn, RaySamples(xw, samples.distances, samples.deltas), o.rgb)
        outputs[offset] = o
        warped[offset] = xw
    return DynamicTriple(renders, outputs, warped)


render_ray_dynamic_triple = render_dynamic_triple


def blend(static: StaticOutput, dynamic: DynamicOutput,
          eps: float = BLEND_EPS) -> tuple[Tensor, Tensor]:
    """Per-sample mixture density ``(1-p) s_s + p s_d`` and density-weighted color."""
    p = dynamic.prob
    ws = (1 - p) * static.sigma
    wd = p * dynamic.sigma
    sigma = ws + wd
    rgb = (ws[..., None] * static.rgb + wd[..., None] * dynamic.rgb) / sigma.clamp_min(eps)[..., None]
    return sigma, rgb


def render_composite(static_field: StaticFn | None, dynamic_field: DynamicFn | None,
                     rays: Rays, samples: RaySamples, t: float,
                     static_out: StaticOutput | None = None,
                     dynamic_out: DynamicOutput | None = None) -> RenderResult:
    """Render the blended static + dynamic scene at time ``t``."""
    d = _dirs(rays, samples)
    if static_out is None:
        static_out = static_field(samples.positions, d)
    if dynamic_out is None:
        dynamic_out = dynamic_field(samples.positions, d, t)
    sigma, rgb = blend(static_out, dynamic_out)
    _, w = quadrature(sigma, samples.deltas)
    return integrate(w, samples, rgb)


render_ray_composite = render_composite


def blended_probability(weights: Tensor, prob: Tensor, eps: float = 1e-9) -> Tensor:
    """Alpha-composited blending probability ``sum w p / (sum w + eps)``."""
    return (weights * prob).sum(-1) / (weights.sum(-1) + eps)


class PatchRender(NamedTuple):
    rgb: Tensor  # (P, P, 3)
    depth: Tensor  # (P, P)
    opacity: Tensor  # (P, P)
    result: RenderResult


def render_rays(mode: str, rays: Rays, num_samples: int, t: float = 0.0,
                static_field: StaticFn | None = None,
                dynamic_field: DynamicFn | None = None,
                stratified: bool = False, generator: torch.Generator | None = None,
                chunk: int = 4096) -> RenderResult:
    """Render a ray batch in ``static``, ``dynamic`` or ``composite`` mode, chunked."""
    if mode not in ("static", "dynamic", "composite"):
        raise ValueError(f"unknown render mode {mode!r}")
    pieces = []
    for i in range(0, len(rays), chunk):
        sub = rays.index(slice(i, i + chunk))
        samples = sample_along_rays(sub, num_samples, stratified, generator)
        if mode == "static":
            pieces.append(render_static(static_field, sub, samples))
        elif mode == "dynamic":
            out = dynamic_field(samples.positions, _dirs(sub, samples), t)
            _, w = quadrature(out.sigma, samples.deltas)
            pieces.append(integrate(w, samples, out.rgb))
        else:
            pieces.append(render_composite(static_field, dynamic_field, sub, samples, t))
    return RenderResult(*(torch.cat(parts, dim=0) for parts in zip(*pieces)))


def render_patch(camera: Camera, pose: Pose, patch: PixelPatch, t: float, mode: str,
                 num_samples: int, near: float, far: float,
                 static_field: StaticFn | None = None,
                 dynamic_field: DynamicFn | None = None,
                 stratified: bool = False, generator: torch.Generator | None = None,
                 dtype=torch.float32) -> PatchRender:
    """Render a ``P x P`` pixel patch; returns color, depth and opacity patches."""
    u, v = patch.pixel_grid(torch.float64)
    rays = pixel_rays(camera, pose, u, v, near, far)
    rays = Rays(rays.origins.to(dtype), rays.directions.to(dtype), near, far)
    res = render_rays(mode, rays, num_samples, t, static_field, dynamic_field,
                      stratified, generator)
    P = patch.size
    return PatchRender(res.color.reshape(P, P, 3), res.depth.reshape(P, P),
                       res.opacity.reshape(P, P), res)
