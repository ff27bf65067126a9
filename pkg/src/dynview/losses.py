"""Training objectives: photometric terms, flow and weight regularizers, mask
supervision, surface consistency and the patch-based multi-view term."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping, NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor

from .geometry import Rays
from .renderer import DynamicFn, DynamicTriple, RaySamples, quadrature, surface_point

ENTROPY_EPS = 1e-9
ENTROPY_MIN_MASS = 0.1
SURFACE_OPACITY_GATE = 0.5


@dataclass
class LossWeights:
    static: float = 1.0
    dynamic: float = 1.0
    full: float = 1.0
    slow: float = 0.01
    cycle: float = 0.01
    entropy: float = 0.001
    mask: float = 0.1
    surface: float = 0.1
    patch: float = 0.1
    depth_cons: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def _sq_err(pred: Tensor, gt: Tensor) -> Tensor:
    return ((pred - gt) ** 2).sum(-1).mean()


def loss_static(pred: Tensor, gt: Tensor, mask: Tensor) -> Tensor:
    """Squared color error restricted to static pixels (``mask == 0``), mean over rays."""
    keep = (1.0 - mask.to(pred.dtype))[..., None]
    return (((pred - gt) * keep) ** 2).sum(-1).mean()


def loss_dynamic(colors: Mapping[int, Tensor] | DynamicTriple, gt: Tensor) -> Tensor:
    """Sum over the available neighbor times of the squared error against frame ``t``."""
    if isinstance(colors, DynamicTriple):
        colors = {k: r.color for k, r in colors.renders.items()}
    return sum(_sq_err(c, gt) for _, c in sorted(colors.items()))


def loss_full(pred: Tensor, gt: Tensor) -> Tensor:
    return _sq_err(pred, gt)


def loss_flow_slow(flow_fwd: Tensor | None, flow_bwd: Tensor | None) -> Tensor:
    """Mean over samples of ``|f_f|_1 + |f_b|_1``; a missing direction contributes nothing."""
    terms = [f.abs().sum(-1) for f in (flow_fwd, flow_bwd) if f is not None]
    if not terms:
        return torch.zeros(())
    return sum(terms).mean()


def loss_flow_cycle(flow_fwd: Tensor | None, flow_fwd_back: Tensor | None,
                    flow_bwd: Tensor | None, flow_bwd_fwd: Tensor | None) -> Tensor:
    """Mean over samples of ``|f_f + f_fb|_2 + |f_b + f_bf|_2``."""
    terms = []
    if flow_fwd is not None:
        terms.append(torch.linalg.vector_norm(flow_fwd + flow_fwd_back, dim=-1))
    if flow_bwd is not None:
        terms.append(torch.linalg.vector_norm(flow_bwd + flow_bwd_fwd, dim=-1))
    if not terms:
        return torch.zeros(())
    return sum(terms).mean()


def loss_entropy(weights: Tensor, eps: float = ENTROPY_EPS,
                 min_mass: float = ENTROPY_MIN_MASS) -> Tensor:
    """Mean per-ray entropy of the normalized rendering weights.

    Rays whose total weight is below ``min_mass`` contribute zero.
    """
    mass = weights.sum(-1, keepdim=True)
    w = weights / (mass + eps)
    ent = -(w * torch.log(w + eps)).sum(-1)
    ent = torch.where(mass[..., 0] >= min_mass, ent, torch.zeros_like(ent))
    return ent.mean()


def loss_mask(prob: Tensor, mask: Tensor) -> Tensor:
    """Binary cross-entropy between the composited blending probability and the dynamic mask."""
    return F.binary_cross_entropy(prob.clamp(0.0, 1.0), mask.to(prob.dtype))


def loss_depth_consistency(depth: Tensor, static_depth: Tensor, mask: Tensor) -> Tensor:
    """Mean absolute depth gap to the frozen static field on static pixels."""
    keep = 1.0 - mask.to(depth.dtype)
    return ((depth - static_depth.detach()).abs() * keep).mean()


class SurfaceTerms(NamedTuple):
    surface: Tensor  # (B, 3) expected surface point at t
    surface_next: Tensor  # (B, 3) expected surface point of the warped ray at t +- dt
    surface_flow: Tensor  # (B, 3) scene flow queried at the surface point
    opacity: Tensor  # (B,) accumulated dynamic opacity at t
    gate: Tensor  # (B,) bool, rays the constraint applies to


def surface_terms(field: DynamicFn, rays: Rays, samples: RaySamples, t: float, dt: float,
                  direction: int = 1, triple: DynamicTriple | None = None,
                  gate: float = SURFACE_OPACITY_GATE) -> SurfaceTerms:
    """Expected surface points at ``t`` and, through the flow, at the neighbor time.

    ``direction`` is +1 (forward) or -1 (backward). When ``triple`` is given its
    center and warped-neighbor field evaluations are reused.
    """
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    d = rays.directions[:, None, :].expand_as(samples.positions)
    if triple is not None and direction in triple.outputs:
        center = triple.outputs[0]
        nxt = triple.outputs[direction]
        warped = triple.warped_positions[direction]
        w_t = triple.renders[0].weights
        w_n = triple.renders[direction].weights
    else:
        center = field(samples.positions, d, t)
        flow = center.flow_fwd if direction == 1 else center.flow_bwd
        warped = samples.positions + flow
        nxt = field(warped, d, t + direction * dt)
        _, w_t = quadrature(center.sigma, samples.deltas)
        _, w_n = quadrature(nxt.sigma, samples.deltas)
    x_hat = surface_point(w_t, samples.positions)
    x_next = surface_point(w_n, warped)
    at_surface = field(x_hat, rays.directions, t)
    f_hat = at_surface.flow_fwd if direction == 1 else at_surface.flow_bwd
    opacity = w_t.sum(-1)
    return SurfaceTerms(x_hat, x_next, f_hat, opacity, (opacity >= gate).detach())


def surface_residual(terms: SurfaceTerms) -> Tensor:
    """Per-ray ``|x_hat + f(x_hat) - x_hat_next|_1``, zero on gated-out rays."""
    r = (terms.surface + terms.surface_flow - terms.surface_next).abs().sum(-1)
    return torch.where(terms.gate, r, torch.zeros_like(r))


def loss_surface(field: DynamicFn, rays: Rays, samples: RaySamples, t: float, dt: float,
                 direction: int = 1, triple: DynamicTriple | None = None,
                 gate: float = SURFACE_OPACITY_GATE) -> Tensor:
    """Surface consistency loss averaged over the opacity-gated rays (0 if none pass)."""
    terms = surface_terms(field, rays, samples, t, dt, direction, triple, gate)
    r = surface_residual(terms)
    n = terms.gate.sum()
    if int(n) == 0:
        return r.sum() * 0.0
    return r.sum() / n


def loss_patch(rendered: Tensor, warped: Tensor, valid: Tensor) -> Tensor:
    """Masked L1 between the input-view patch and the inverse-warped novel patch.

    Normalized per valid color element; zero when no pixel is valid.
    """
    m = valid.to(rendered.dtype)[..., None]
    count = m.sum() * rendered.shape[-1]
    diff = (m * (rendered - warped)).abs().sum()
    if float(count) == 0.0:
        return diff * 0.0
    return diff / count


@dataclass
class LossReport:
    terms: dict
    total: float

    def line(self, iteration: int) -> str:
        parts = [f"iter={iteration}"] + [f"{k}={v:.8g}" for k, v in self.terms.items()]
        return " ".join(parts + [f"total={self.total:.8g}"])


def total_loss(terms: Mapping[str, Tensor], weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted sum of named loss terms; the report keeps each unweighted value."""
    w = weights.to_dict()
    unknown = set(terms) - set(w)
    if unknown:
        raise KeyError(f"no weight for loss terms {sorted(unknown)}")
    total = None
    for name, value in terms.items():
        part = w[name] * value
        total = part if total is None else total + part
    if total is None:
        total = torch.zeros(())
    report = LossReport({k: float(v.detach()) for k, v in terms.items()}, float(total.detach()))
    return total, report
