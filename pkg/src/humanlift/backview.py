"""Texture-consistent back-view synthesis.

The reference image is pulled up the diffusion ladder with deterministic
DDIM inversion, then two depth-conditioned DDIM branches run down from
that shared start latent in lock step: a front branch reconstructing the
reference and a back branch whose self-attention consumes the front
branch's key/value features while keeping its own queries. The decoded
back-branch image is what the fine stage trains against.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .guidance import (
    AttentionTap,
    CapabilityError,
    Condition,
    DenoiserBackend,
    InjectionShapeError,
    NoiseSchedule,
    TextCondition,
)
from .scene import save_depth

__all__ = [
    "AttentionTap",
    "BackViewResult",
    "CapabilityError",
    "DegenerateDepthWarning",
    "InjectionPolicy",
    "InjectionShapeError",
    "LatentState",
    "augment_back_prompt",
    "ddim_invert",
    "ddim_sample",
    "normalize_depth_for_conditioning",
    "save_backview_bundle",
    "synthesize_back_view",
]


class DegenerateDepthWarning(UserWarning):
    """Depth map carries no usable relief (constant or empty foreground)."""


@dataclass
class LatentState:
    """A latent array pinned to one position on the diffusion ladder."""

    x: torch.Tensor
    t_index: int
    branch: str = "front"

    def __post_init__(self):
        if self.t_index < 0:
            raise ValueError("t_index must be non-negative")
        if self.branch not in ("front", "back"):
            raise ValueError(f"branch must be 'front' or 'back', got {self.branch!r}")


@dataclass(frozen=True)
class InjectionPolicy:
    """Which attention layers receive front K/V, and during which steps.

    `layers` is a set of layer ids (None means every layer the backend
    exposes). `step_window` is a fraction interval of the sampling run;
    step j of S is active when lo <= j/S < hi, so [0, 0] never fires and
    the default [0, 1] covers every step.
    """

    layers: frozenset | None = None
    step_window: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        lo, hi = self.step_window
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"step_window must sit inside [0, 1], got {self.step_window}")

    @staticmethod
    def disabled() -> "InjectionPolicy":
        return InjectionPolicy(layers=frozenset())

    def covers_layer(self, layer) -> bool:
        return self.layers is None or layer in self.layers

    def active(self, step: int, total_steps: int) -> bool:
        lo, hi = self.step_window
        frac = step / total_steps
        return lo <= frac < hi


def augment_back_prompt(prompt: str) -> str:
    """Append the back-view phrase unless the prompt already carries it."""
    if "back view" in prompt:
        return prompt
    return f"{prompt}, back view"


def normalize_depth_for_conditioning(depth, mask,
                                     out_size: int | None = None) -> torch.Tensor:
    """Map foreground depth to [-1, 1]; background sits at +1 (far).

    A constant (or empty) foreground yields a flat zero channel with a
    DegenerateDepthWarning. With `out_size` the channel is area-averaged
    down to a square grid, preserving block means for integer factors.
    """
    d = torch.as_tensor(np.asarray(depth), dtype=torch.float32)
    m = torch.as_tensor(np.asarray(mask), dtype=torch.float32) > 0.5
    if d.ndim != 2 or m.shape != d.shape:
        raise ValueError("depth and mask must be matching 2D arrays")
    fg = d[m]
    if fg.numel() == 0 or (fg.max() - fg.min()) < 1e-12:
        warnings.warn("depth map has no relief; conditioning on a flat channel",
                      DegenerateDepthWarning)
        out = torch.zeros_like(d)
    else:
        lo, hi = fg.min(), fg.max()
        out = torch.where(m, 2.0 * (d - lo) / (hi - lo) - 1.0,
                          torch.ones_like(d))
    if out_size is not None and out.shape != (out_size, out_size):
        out = F.adaptive_avg_pool2d(out[None, None], out_size)[0, 0]
    return out


def _ladder(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    if not 1 <= steps < schedule.num_steps:
        raise ValueError(f"steps must lie in [1, {schedule.num_steps - 1}]")
    idx = np.round(np.linspace(0, schedule.num_steps - 1, steps + 1)).astype(int)
    if (np.diff(idx) <= 0).any():
        raise ValueError("too many steps for this schedule")
    return idx


def _ddim_step(x: torch.Tensor, eps: torch.Tensor, ab_from: float,
               ab_to: float) -> torch.Tensor:
    # shared update for both directions: predict x0 at the source level,
    # then re-noise it to the target level with the same eps_hat
    x0 = (x - math.sqrt(1.0 - ab_from) * eps) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0 + math.sqrt(1.0 - ab_to) * eps


def _predict_cfg(backend: DenoiserBackend, x: torch.Tensor,
                 condition: Condition, t: int, cfg: float,
                 tap: AttentionTap | None = None) -> torch.Tensor:
    # taps ride the conditional pass only
    eps_cond = backend.predict_noise(x, condition, t, tap=tap)
    if cfg == 1.0:
        return eps_cond
    eps_uncond = backend.predict_noise(x, None, t)
    return eps_uncond + cfg * (eps_cond - eps_uncond)


def ddim_invert(backend: DenoiserBackend, schedule: NoiseSchedule,
                image: torch.Tensor, depth: torch.Tensor, prompt: str,
                steps: int = 50) -> LatentState:
    """Walk the reference image up to the start latent, deterministically.

    `depth` is the conditioning channel (see
    normalize_depth_for_conditioning). Guidance weight is 1 throughout,
    so only the conditional head is evaluated.
    """
    if not backend.supports_depth:
        raise CapabilityError(f"{backend.kind} backend lacks depth conditioning")
    ladder = _ladder(schedule, steps)
    cond = TextCondition(prompt, depth=depth)
    x = image.clone()
    for a, b in zip(ladder[:-1], ladder[1:]):
        eps = backend.predict_noise(x, cond, int(a))
        x = _ddim_step(x, eps, float(schedule.alpha_bar[a]),
                       float(schedule.alpha_bar[b]))
    return LatentState(x=x, t_index=int(ladder[-1]), branch="front")


def ddim_sample(backend: DenoiserBackend, schedule: NoiseSchedule,
                latent: LatentState, prompt: str, depth: torch.Tensor,
                steps: int = 50, cfg: float = 1.0) -> torch.Tensor:
    """Single-branch deterministic DDIM sampling from a start latent."""
    if not backend.supports_depth:
        raise CapabilityError(f"{backend.kind} backend lacks depth conditioning")
    ladder = _ladder(schedule, steps)
    if latent.t_index != int(ladder[-1]):
        raise ValueError(
            f"latent t_index {latent.t_index} is not the top of a {steps}-step ladder")
    cond = TextCondition(prompt, depth=depth)
    x = latent.x.clone()
    for j in range(steps):
        a = int(ladder[steps - j])
        b = int(ladder[steps - j - 1])
        eps = _predict_cfg(backend, x, cond, a, cfg)
        x = _ddim_step(x, eps, float(schedule.alpha_bar[a]),
                       float(schedule.alpha_bar[b]))
    return x


@dataclass
class BackViewResult:
    image: np.ndarray            # (H, W, 3) float32, [0, 1]
    front_image: np.ndarray      # front branch's own reconstruction
    prompt: str
    back_prompt: str
    steps: int
    cfg: float
    policy: InjectionPolicy = field(default_factory=InjectionPolicy)


def _to_image(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().clamp(0.0, 1.0)
    if arr.ndim == 3:
        arr = arr.permute(1, 2, 0)
    return arr.cpu().numpy().astype(np.float32)


def synthesize_back_view(backend: DenoiserBackend, schedule: NoiseSchedule,
                         start: LatentState, depth_front: torch.Tensor,
                         depth_back: torch.Tensor, prompt: str,
                         policy: InjectionPolicy | None = None,
                         steps: int = 50, cfg: float = 7.5,
                         back_prompt: str | None = None,
                         mask_back: np.ndarray | None = None,
                         out_size: tuple[int, int] | None = None,
                         ) -> BackViewResult:
    """Run the synchronized dual-branch sampler and decode the back view.

    Both branches start at `start.x`. Every step, the front branch's K/V
    features are captured and, where the policy admits, replace the back
    branch's own K/V (queries stay with the back branch). The decoded
    back image is optionally resized to `out_size` (w, h) and composited
    over white with `mask_back`.
    """
    if not backend.supports_depth:
        raise CapabilityError(f"{backend.kind} backend lacks depth conditioning")
    policy = policy if policy is not None else InjectionPolicy()
    ladder = _ladder(schedule, steps)
    if start.t_index != int(ladder[-1]):
        raise ValueError(
            f"latent t_index {start.t_index} is not the top of a {steps}-step ladder")

    bp = back_prompt if back_prompt is not None else augment_back_prompt(prompt)
    cond_front = TextCondition(prompt, depth=depth_front)
    cond_back = TextCondition(bp, depth=depth_back)

    x_front = start.x.clone()
    x_back = start.x.clone()
    for j in range(steps):
        a = int(ladder[steps - j])
        b = int(ladder[steps - j - 1])
        ab_a = float(schedule.alpha_bar[a])
        ab_b = float(schedule.alpha_bar[b])

        capture = AttentionTap("capture")
        eps_front = _predict_cfg(backend, x_front, cond_front, a, cfg,
                                 tap=capture)
        admit_step = policy.active(j, steps)
        inject = AttentionTap(
            "inject", source=capture,
            admit=lambda layer, t, ok=admit_step: ok and policy.covers_layer(layer))
        eps_back = _predict_cfg(backend, x_back, cond_back, a, cfg, tap=inject)

        x_front = _ddim_step(x_front, eps_front, ab_a, ab_b)
        x_back = _ddim_step(x_back, eps_back, ab_a, ab_b)

    back = _to_image(x_back)
    front = _to_image(x_front)
    if out_size is not None:
        w, h = out_size
        t = torch.from_numpy(back).permute(2, 0, 1)[None]
        back = F.interpolate(t, size=(h, w), mode="bilinear",
                             align_corners=False)[0].permute(1, 2, 0).numpy()
    if mask_back is not None:
        m = np.asarray(mask_back, dtype=np.float32)
        if m.shape != back.shape[:2]:
            raise ValueError("mask_back resolution must match the output image")
        back = back * m[..., None] + (1.0 - m[..., None])
    return BackViewResult(image=back.astype(np.float32), front_image=front,
                          prompt=prompt, back_prompt=bp, steps=steps,
                          cfg=cfg, policy=policy)


def _save_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)):
        raise IOError(f"failed to write {path}")


def save_backview_bundle(dirpath, result: BackViewResult,
                         depth_back: np.ndarray | None = None) -> Path:
    """Persist the synthesized view plus a JSON sidecar for the fine stage."""
    out = Path(dirpath)
    out.mkdir(parents=True, exist_ok=True)
    _save_png(out / "back.png", result.image)
    _save_png(out / "front_recon.png", result.front_image)
    if depth_back is not None:
        save_depth(out / "depth_back.ctxd", np.asarray(depth_back, dtype=np.float32))
    meta = {
        "prompt": result.prompt,
        "back_prompt": result.back_prompt,
        "steps": result.steps,
        "cfg": result.cfg,
        "policy": {
            "layers": (None if result.policy.layers is None
                       else sorted(result.policy.layers)),
            "step_window": list(result.policy.step_window),
        },
    }
    (out / "backview.json").write_text(json.dumps(meta, indent=2))
    return out
