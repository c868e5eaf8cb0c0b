"""Supervised losses and their stage-level weighted combinations.

Pixel losses use per-pixel means so the default weights stay resolution
independent. The patch-consistency loss is an unnormalized sum, matching
its defining formula; its stage weight absorbs the scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch

from .mesh import TriMesh, laplacian_magnitude, normal_consistency


class EmptyPatch(ValueError):
    """Patch holds zero pixels."""


class MissingLossComponent(KeyError):
    """A stage combination is missing one of its required terms."""


class MissingBackNormal(ValueError):
    """Geometry supervision requires both reference and back normal maps."""


class VPCNoVisibleWarning(UserWarning):
    """A consistency patch contained no visible pixels; it contributes 0."""


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def mask_loss(mask: torch.Tensor, rendered: torch.Tensor) -> torch.Tensor:
    """Mean L1 between silhouettes."""
    _check_same_shape(mask, rendered)
    return (mask - rendered).abs().mean()


def masked_rgb_loss(image: torch.Tensor, rendered: torch.Tensor,
                    mask: torch.Tensor) -> torch.Tensor:
    """Mean L1 between mask-multiplied images; the mask hits both sides."""
    _check_same_shape(image, rendered)
    if mask.shape != image.shape[:2]:
        raise ValueError("mask must match the image resolution")
    m = mask[..., None]
    return (image * m - rendered * m).abs().mean()


def normal_loss(normal: torch.Tensor, rendered: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
    """Mean L1 between mask-multiplied normal maps."""
    return masked_rgb_loss(normal, rendered, mask)


def _mean_sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same_shape(a, b)
    return (a - b).pow(2).sum(dim=-1).mean()


def geometry_loss(normal_ref: torch.Tensor, target_ref: torch.Tensor,
                  normal_back: torch.Tensor | None,
                  target_back: torch.Tensor | None,
                  mesh: TriMesh, weights: "LossWeights",
                  step: int = 0) -> torch.Tensor:
    """Two-view normal supervision plus weighted mesh smoothness.

    The normal terms are per-pixel mean squared differences; the Laplacian
    and normal-consistency terms take their stage weights here, so zeroing
    those weights leaves exactly the two normal terms.
    """
    if normal_back is None or target_back is None:
        raise MissingBackNormal("back view normal maps are required")
    w = weights.weights_for("geometry", step)
    loss = _mean_sq(normal_ref, target_ref) + _mean_sq(normal_back, target_back)
    if w["laplacian"] != 0.0:
        loss = loss + w["laplacian"] * laplacian_magnitude(mesh)
    if w["smooth"] != 0.0:
        loss = loss + w["smooth"] * normal_consistency(mesh)
    return loss


@dataclass
class PatchSample:
    """Square image patch with its visibility bits.

    rgb_patch: (size, size, 3); vis_patch: (size, size) boolean-like.
    """

    origin: tuple[int, int]
    size: int
    rgb_patch: torch.Tensor
    vis_patch: torch.Tensor

    def __post_init__(self):
        if self.size <= 0:
            raise EmptyPatch("patch size must be positive")
        if tuple(self.rgb_patch.shape) != (self.size, self.size, 3):
            raise ValueError("rgb_patch must be (size, size, 3)")
        if tuple(self.vis_patch.shape) != (self.size, self.size):
            raise ValueError("vis_patch must be (size, size)")


def extract_patch(image: torch.Tensor, visibility: torch.Tensor,
                  origin: tuple[int, int], size: int) -> PatchSample:
    """Cut a patch; the window must lie fully inside the image."""
    h, w = image.shape[:2]
    r, c = origin
    if r < 0 or c < 0 or r + size > h or c + size > w:
        raise ValueError(f"patch {origin}+{size} outside {h}x{w} image")
    return PatchSample(origin=(r, c), size=size,
                       rgb_patch=image[r:r + size, c:c + size],
                       vis_patch=visibility[r:r + size, c:c + size])


def sample_patches(image: torch.Tensor, visibility: torch.Tensor,
                   silhouette: torch.Tensor, n_patches: int = 4,
                   size: int = 64,
                   generator: torch.Generator | None = None,
                   ) -> list[PatchSample]:
    """Patches drawn uniformly inside the silhouette's bounding box."""
    h, w = image.shape[:2]
    size = min(size, h, w)
    fg = silhouette > 0.5
    if fg.any():
        rows = torch.nonzero(fg.any(dim=1)).reshape(-1)
        cols = torch.nonzero(fg.any(dim=0)).reshape(-1)
        r0, r1 = int(rows[0]), int(rows[-1])
        c0, c1 = int(cols[0]), int(cols[-1])
    else:
        r0, r1, c0, c1 = 0, h - 1, 0, w - 1
    r_lo = max(0, min(r0, h - size))
    r_hi = max(r_lo, min(r1 - size + 1, h - size))
    c_lo = max(0, min(c0, w - size))
    c_hi = max(c_lo, min(c1 - size + 1, w - size))
    out = []
    for _ in range(n_patches):
        r = int(torch.randint(r_lo, r_hi + 1, (1,), generator=generator))
        c = int(torch.randint(c_lo, c_hi + 1, (1,), generator=generator))
        out.append(extract_patch(image, visibility, (r, c), size))
    return out


def vpc_loss(patch: PatchSample, chunk: int = 2048) -> torch.Tensor:
    """Pull each invisible pixel toward its nearest visible color.

    Sum over invisible pixels of the squared distance to the closest
    visible RGB in the same patch. The nearest neighbor is fixed per
    evaluation (detached), so the gradient w.r.t. an invisible pixel p is
    exactly 2 (p - q*).
    """
    rgb = patch.rgb_patch.reshape(-1, 3)
    vis = patch.vis_patch.reshape(-1).bool()
    if rgb.shape[0] == 0:
        raise EmptyPatch("patch holds no pixels")
    invisible = rgb[~vis]
    visible = rgb[vis]
    zero = rgb.sum() * 0.0
    if invisible.shape[0] == 0:
        return zero
    if visible.shape[0] == 0:
        warnings.warn("patch has no visible pixels; contributing 0",
                      VPCNoVisibleWarning)
        return zero
    anchors = visible.detach()
    total = zero
    for start in range(0, invisible.shape[0], chunk):
        block = invisible[start:start + chunk]
        d2 = (block.detach()[:, None, :] - anchors[None]).pow(2).sum(-1)
        nearest = anchors[d2.argmin(dim=1)]
        total = total + (block - nearest).pow(2).sum()
    return total


_COARSE = {"sds": 1.0, "rgb": 1000.0, "normal": 1000.0, "mask": 1000.0}
_GEOMETRY = {"normal": 10000.0, "mask": 50000.0,
             "laplacian": 1000.0, "smooth": 1000.0}
_GEOMETRY_LATE = {"laplacian": 100.0, "smooth": 100.0}
_TEXTURE = {"sds_view": 0.002, "sds_text": 0.5, "rgb": 10000.0, "vpc": 10.0}
_TEXTURE_REFINE = {"sds_view": 0.0, "sds_text": 0.0,
                   "rgb": 10000.0, "vpc": 100.0}


@dataclass
class LossWeights:
    """Per-stage weights with piecewise-constant step schedules."""

    coarse: dict[str, float] = field(default_factory=lambda: dict(_COARSE))
    geometry: dict[str, float] = field(default_factory=lambda: dict(_GEOMETRY))
    geometry_late: dict[str, float] = field(
        default_factory=lambda: dict(_GEOMETRY_LATE))
    geometry_late_step: int = 2000
    texture: dict[str, float] = field(default_factory=lambda: dict(_TEXTURE))
    texture_refine: dict[str, float] = field(
        default_factory=lambda: dict(_TEXTURE_REFINE))
    texture_refine_step: int = 4000

    def __post_init__(self):
        for table in (self.coarse, self.geometry, self.geometry_late,
                      self.texture, self.texture_refine):
            for name, value in table.items():
                if value < 0:
                    raise ValueError(f"negative loss weight {name}={value}")

    def weights_for(self, stage: str, step: int) -> dict[str, float]:
        if stage == "coarse":
            return dict(self.coarse)
        if stage == "geometry":
            w = dict(self.geometry)
            if step >= self.geometry_late_step:
                w.update(self.geometry_late)
            return w
        if stage == "texture":
            if step >= self.texture_refine_step:
                return dict(self.texture_refine)
            return dict(self.texture)
        raise ValueError(f"unknown stage {stage!r}")


def stage_loss(stage: str, components: dict, weights: LossWeights,
               step: int = 0):
    """Weighted sum of a stage's loss components at a given step."""
    w = weights.weights_for(stage, step)
    missing = sorted(set(w) - set(components))
    if missing:
        raise MissingLossComponent(f"stage {stage!r} missing {missing}")
    unknown = sorted(set(components) - set(w))
    if unknown:
        raise ValueError(f"stage {stage!r} got unknown components {unknown}")
    total = 0.0
    for name, weight in w.items():
        total = total + weight * components[name]
    return total
