"""Differentiable volume rendering over a density/color field.

Midpoint quadrature over uniform bins between near and far:
    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)          (exclusive)
    w_i     = T_i * alpha_i
Pixels composite onto a solid white background; depth is the expected
distance along the ray normalized by accumulated opacity, with 0 marking
background.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .field import FieldParams, density_gradient_normal, query_density_color
from .scene import Camera, generate_rays


@dataclass
class RayMarchConfig:
    n_samples: int = 512
    near: float | None = None  # default: camera distance - margin
    far: float | None = None   # default: camera distance + margin
    depth_margin: float = 1.5
    white_background: bool = True
    perturb: bool = False
    chunk: int = 65536
    render_normals: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.near is not None and self.far is not None and not self.near < self.far:
            raise ValueError("near must be < far")


def _field_query(field, pts: torch.Tensor):
    if isinstance(field, FieldParams):
        return query_density_color(field, pts)
    if callable(field):
        return field(pts)
    raise TypeError(f"cannot query field of type {type(field).__name__}")


def _field_normals(field, pts: torch.Tensor, create_graph: bool) -> torch.Tensor:
    if isinstance(field, FieldParams):
        return density_gradient_normal(field, pts, create_graph=create_graph)
    pts = pts.detach().requires_grad_(True)
    with torch.enable_grad():
        sigma, _ = _field_query(field, pts)
        grad = torch.autograd.grad(sigma.sum(), pts, create_graph=create_graph)[0]
    n = -grad
    return n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def render_rays(field, origins: torch.Tensor, directions: torch.Tensor,
                near: float, far: float, config: RayMarchConfig,
                generator: torch.Generator | None = None,
                ) -> dict[str, torch.Tensor]:
    """Render a flat batch of rays; returns per-ray rgb/alpha/depth (+normal)."""
    if not near < far:
        raise ValueError("near must be < far")
    n_rays = origins.shape[0]
    device, dtype = origins.device, origins.dtype
    n = config.n_samples
    edges = torch.linspace(near, far, n + 1, device=device, dtype=dtype)
    delta = (far - near) / n

    out: dict[str, list[torch.Tensor]] = {"rgb": [], "alpha": [], "depth": []}
    if config.render_normals:
        out["normal"] = []
    for start in range(0, n_rays, config.chunk):
        o = origins[start:start + config.chunk]
        d = directions[start:start + config.chunk]
        r = o.shape[0]
        t_mid = (edges[:-1] + 0.5 * delta).expand(r, n)
        if config.perturb:
            jitter = torch.rand(r, n, device=device, dtype=dtype,
                                generator=generator) - 0.5
            t_mid = t_mid + jitter * delta
        pts = o[:, None, :] + t_mid[..., None] * d[:, None, :]
        flat = pts.reshape(-1, 3)
        sigma, rgb = _field_query(field, flat)
        sigma = sigma.reshape(r, n)
        rgb = rgb.reshape(r, n, 3)

        alpha = 1.0 - torch.exp(-sigma * delta)
        trans = torch.cumprod(torch.cat([
            torch.ones(r, 1, device=device, dtype=dtype), 1.0 - alpha + 1e-10,
        ], dim=1), dim=1)[:, :-1]
        weights = trans * alpha
        acc = weights.sum(dim=1)
        color = (weights[..., None] * rgb).sum(dim=1)
        if config.white_background:
            color = color + (1.0 - acc[..., None])
        depth = (weights * t_mid).sum(dim=1) / acc.clamp_min(1e-10)
        depth = torch.where(acc > 1e-4, depth, torch.zeros_like(depth))

        out["rgb"].append(color)
        out["alpha"].append(acc)
        out["depth"].append(depth)
        if config.render_normals:
            normals = _field_normals(
                field, flat, create_graph=torch.is_grad_enabled())
            normals = normals.reshape(r, n, 3)
            out["normal"].append((weights[..., None] * normals).sum(dim=1))
    return {k: torch.cat(v, dim=0) for k, v in out.items()}


def render(field, camera: Camera, config: RayMarchConfig,
           generator: torch.Generator | None = None,
           ) -> dict[str, torch.Tensor]:
    """Render a full image from a camera; tensors come back (H, W, ...)."""
    near = config.near if config.near is not None else camera.distance - config.depth_margin
    far = config.far if config.far is not None else camera.distance + config.depth_margin
    origins, directions = generate_rays(camera)
    h, w = origins.shape[:2]
    flat = render_rays(field, origins.reshape(-1, 3), directions.reshape(-1, 3),
                       near, far, config, generator=generator)
    shaped = {}
    for key, value in flat.items():
        shaped[key] = value.reshape(h, w, *value.shape[1:])
    return shaped
