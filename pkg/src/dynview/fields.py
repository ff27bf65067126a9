"""Positional encoding and the static / dynamic radiance field MLPs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass
class FieldConfig:
    """Architecture of a radiance field MLP.

    ``skip`` is the zero-based index of the trunk layer that receives the
    encoded input concatenated to its features (4 means the fifth layer).
    """

    depth: int = 8
    width: int = 128
    skip: int = 4
    L_pos: int = 10
    L_dir: int = 4
    L_time: int = 6
    max_flow: float = 0.1

    def __post_init__(self):
        if min(self.L_pos, self.L_dir, self.L_time) < 0:
            raise ValueError("frequency counts must be >= 0")
        if self.depth < 1 or self.width < 2:
            raise ValueError("depth must be >= 1 and width >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def encoded_dim(k: int, L: int) -> int:
    return k * (2 * L + 1)


def positional_encode(x: Tensor, L: int) -> Tensor:
    """``(x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x))``.

    Args:
        x: (..., k) input coordinates.
        L: number of frequency bands.

    Returns:
        (..., k * (2L + 1)) encoding.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    parts = [x]
    for i in range(L):
        arg = (2.0 ** i) * math.pi * x
        parts += [torch.sin(arg), torch.cos(arg)]
    return torch.cat(parts, dim=-1)


class StaticOutput(NamedTuple):
    rgb: Tensor  # (..., 3) in [0, 1]
    sigma: Tensor  # (...,) >= 0


class DynamicOutput(NamedTuple):
    rgb: Tensor
    sigma: Tensor
    flow_fwd: Tensor  # (..., 3), displacement to the next frame
    flow_bwd: Tensor  # (..., 3), displacement to the previous frame
    prob: Tensor  # (...,) blending probability in [0, 1]


def _check_finite(module: nn.Module):
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite parameter {name}")


class _Trunk(nn.Module):
    def __init__(self, in_dim: int, cfg: FieldConfig):
        super().__init__()
        self.skip = cfg.skip
        layers = []
        for i in range(cfg.depth):
            fan_in = in_dim if i == 0 else cfg.width
            if i == cfg.skip and i > 0:
                fan_in += in_dim
            layers.append(nn.Linear(fan_in, cfg.width))
        self.layers = nn.ModuleList(layers)

    def forward(self, h_in: Tensor) -> Tensor:
        h = h_in
        for i, layer in enumerate(self.layers):
            if i == self.skip and i > 0:
                h = torch.cat([h_in, h], dim=-1)
            h = F.relu(layer(h))
        return h


class _ColorHead(nn.Module):
    def __init__(self, width: int, dir_dim: int):
        super().__init__()
        self.feature = nn.Linear(width, width)
        self.hidden = nn.Linear(width + dir_dim, width // 2)
        self.out = nn.Linear(width // 2, 3)

    def forward(self, h: Tensor, d_enc: Tensor) -> Tensor:
        z = torch.cat([self.feature(h), d_enc], dim=-1)
        return torch.sigmoid(self.out(F.relu(self.hidden(z))))


class StaticField(nn.Module):
    """Time-independent radiance field ``(x, d) -> (rgb, sigma)``."""

    def __init__(self, cfg: FieldConfig | None = None):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        in_dim = encoded_dim(3, self.cfg.L_pos)
        self.trunk = _Trunk(in_dim, self.cfg)
        self.sigma_head = nn.Linear(self.cfg.width, 1)
        self.color = _ColorHead(self.cfg.width, encoded_dim(3, self.cfg.L_dir))

    def forward(self, x: Tensor, d: Tensor) -> StaticOutput:
        h = self.trunk(positional_encode(x, self.cfg.L_pos))
        sigma = F.softplus(self.sigma_head(h))[..., 0]
        d = d.expand_as(x)
        rgb = self.color(h, positional_encode(d, self.cfg.L_dir))
        return StaticOutput(rgb, sigma)


class DynamicField(nn.Module):
    """Time-conditioned field ``(x, d, t) -> (rgb, sigma, f_fwd, f_bwd, p)``.

    Flows are expressed per adjacent-frame step and scaled by
    ``cfg.max_flow``; the flow head starts at exactly zero.
    """

    def __init__(self, cfg: FieldConfig | None = None):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        in_dim = encoded_dim(3, self.cfg.L_pos) + encoded_dim(1, self.cfg.L_time)
        self.trunk = _Trunk(in_dim, self.cfg)
        self.sigma_head = nn.Linear(self.cfg.width, 1)
        self.prob_head = nn.Linear(self.cfg.width, 1)
        self.flow_head = nn.Linear(self.cfg.width, 6)
        self.color = _ColorHead(self.cfg.width, encoded_dim(3, self.cfg.L_dir))
        nn.init.zeros_(self.flow_head.weight)
        nn.init.zeros_(self.flow_head.bias)

    def forward(self, x: Tensor, d: Tensor, t) -> DynamicOutput:
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.dim() < x.dim():
            t = t.reshape(t.shape + (1,) * (x.dim() - 1 - t.dim()))
            t = t.expand(x.shape[:-1]).unsqueeze(-1)
        enc = torch.cat([positional_encode(x, self.cfg.L_pos),
                         positional_encode(t, self.cfg.L_time)], dim=-1)
        h = self.trunk(enc)
        sigma = F.softplus(self.sigma_head(h))[..., 0]
        prob = torch.sigmoid(self.prob_head(h))[..., 0]
        flow = self.flow_head(h) * self.cfg.max_flow
        d = d.expand_as(x)
        rgb = self.color(h, positional_encode(d, self.cfg.L_dir))
        return DynamicOutput(rgb, sigma, flow[..., :3], flow[..., 3:], prob)


def query_static(field: StaticField, x: Tensor, d: Tensor) -> StaticOutput:
    """Evaluate the static field, refusing non-finite parameters."""
    _check_finite(field)
    return field(x, d)


def query_dynamic(field: DynamicField, x: Tensor, d: Tensor, t) -> DynamicOutput:
    if isinstance(field, nn.Module):
        _check_finite(field)
    return field(x, d, t)


def query_dynamic_warped(field: DynamicField, x: Tensor, flow: Tensor, d: Tensor,
                         t_neighbor) -> DynamicOutput:
    """Query the dynamic field at the flow-displaced point ``x + flow`` and neighbor time."""
    return query_dynamic(field, x + flow, d, t_neighbor)


def frame_time(n: int, num_frames: int) -> float:
    """Normalized timestamp of frame ``n``; the first and last frames map to 0 and 1."""
    if num_frames < 2:
        return 0.0
    return n / (num_frames - 1)
