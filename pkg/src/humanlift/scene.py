"""Cameras, ray generation, image buffers, and reference-image preprocessing.

Conventions used across the whole package:
  - image origin top-left, row-major; pixel (row, col) has continuous
    center (col + 0.5, row + 0.5)
  - world frame is right-handed, +y up, subject centered at the origin
  - camera frame: +x right, +y up, looking along -z; ``rotation`` maps
    world to camera, ``x_cam = R @ x_world + t``
  - background is solid white everywhere
"""

from __future__ import annotations

import json
import math
import struct
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from PIL import Image

WHITE = 1.0
NORMAL_BACKGROUND = (0.0, 0.0, 0.0)
DEPTH_BACKGROUND = 0.0

DEPTH_MAGIC = b"CTXD"


class EmptyMaskError(ValueError):
    """Raised when an input alpha channel contains no foreground."""


class CroppedSubjectWarning(UserWarning):
    """Foreground touches all four borders; subject is probably cut off."""


@dataclass
class Camera:
    """Pinhole camera looking at the world origin.

    rotation: (3, 3) world-to-camera matrix, orthonormal.
    translation: (3,) so that x_cam = rotation @ x_world + translation.
    fov_deg: vertical field of view.
    resolution: (width, height) in pixels.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fov_deg: float
    distance: float
    resolution: tuple[int, int]

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation is not orthonormal (err={err:.2e})")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if self.distance <= 0.0:
            raise ValueError("camera distance must be positive")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise ValueError(f"resolution components must be >= 1, got {self.resolution}")

    @property
    def width(self) -> int:
        return int(self.resolution[0])

    @property
    def height(self) -> int:
        return int(self.resolution[1])

    @property
    def focal_px(self) -> float:
        """Focal length in pixels (vertical fov referenced to image height)."""
        return 0.5 * self.height / math.tan(math.radians(self.fov_deg) * 0.5)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def with_resolution(self, resolution: tuple[int, int]) -> "Camera":
        return Camera(self.rotation.copy(), self.translation.copy(),
                      self.fov_deg, self.distance, resolution)

    @staticmethod
    def from_orbit(elevation_deg: float, azimuth_deg: float, distance: float,
                   fov_deg: float, resolution: tuple[int, int]) -> "Camera":
        """Camera on a sphere around the origin, looking inward.

        Azimuth 0 / elevation 0 places the camera on +z (the reference
        view); azimuth rotates around +y, elevation tilts upward.
        """
        el = math.radians(elevation_deg)
        az = math.radians(azimuth_deg)
        pos = distance * np.array([
            math.cos(el) * math.sin(az),
            math.sin(el),
            math.cos(el) * math.cos(az),
        ])
        z_cam = pos / np.linalg.norm(pos)  # camera looks along -z_cam
        up = np.array([0.0, 1.0, 0.0])
        if abs(np.dot(up, z_cam)) > 1.0 - 1e-8:
            up = np.array([0.0, 0.0, 1.0])  # straight up/down pole
        x_cam = np.cross(up, z_cam)
        x_cam = x_cam / np.linalg.norm(x_cam)
        y_cam = np.cross(z_cam, x_cam)
        rotation = np.stack([x_cam, y_cam, z_cam], axis=0)
        translation = -rotation @ pos
        return Camera(rotation, translation, fov_deg, distance, resolution)


def back_camera(camera: Camera) -> Camera:
    """The matching back view: same distance/fov, azimuth rotated 180 deg."""
    # Rotate the camera center around +y; reuse the orbit construction so
    # elevation is preserved exactly.
    c = camera.center
    el = math.degrees(math.asin(np.clip(c[1] / camera.distance, -1.0, 1.0)))
    az = math.degrees(math.atan2(c[0], c[2]))
    return Camera.from_orbit(el, az + 180.0, camera.distance, camera.fov_deg,
                             camera.resolution)


def relative_pose(cam_from: Camera, cam_to: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Relative rigid transform mapping cam_from's frame into cam_to's.

    Used as the (R, T) conditioning of view-conditioned guidance.
    """
    r_rel = cam_to.rotation @ cam_from.rotation.T
    t_rel = cam_to.translation - r_rel @ cam_from.translation
    return r_rel, t_rel


@dataclass
class ViewSampler:
    """Uniform camera sampler over elevation/azimuth ranges.

    Step 0 is the reference view (elevation and azimuth exactly 0); every
    other step draws a view uniformly inside the configured ranges. The
    draw for a given (seed, step) pair is deterministic, which keeps
    resumed runs bit-identical.
    """

    elevation_range_deg: tuple[float, float] = (-30.0, 60.0)
    azimuth_range_deg: tuple[float, float] = (-180.0, 180.0)
    distance: float = 3.8
    fov_deg: float = 20.0
    seed: int = 0
    resolution: tuple[int, int] = (128, 128)

    def __post_init__(self):
        if self.elevation_range_deg[0] > self.elevation_range_deg[1]:
            raise ValueError("elevation range is inverted")
        if self.azimuth_range_deg[0] > self.azimuth_range_deg[1]:
            raise ValueError("azimuth range is inverted")


def reference_camera(sampler: ViewSampler) -> Camera:
    return Camera.from_orbit(0.0, 0.0, sampler.distance, sampler.fov_deg,
                             sampler.resolution)


def sample_training_view(sampler: ViewSampler, step: int) -> Camera:
    """Camera for a training step; step 0 is the exact reference view."""
    if step == 0:
        return reference_camera(sampler)
    rng = np.random.default_rng((sampler.seed, step))
    lo, hi = sampler.elevation_range_deg
    elevation = float(rng.uniform(lo, hi))
    lo, hi = sampler.azimuth_range_deg
    azimuth = float(rng.uniform(lo, hi))
    return Camera.from_orbit(elevation, azimuth, sampler.distance,
                             sampler.fov_deg, sampler.resolution)


def generate_rays(camera: Camera, dtype: torch.dtype = torch.float32,
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """One ray per pixel through the pixel center.

    Returns (origins, directions), both (H, W, 3); directions are unit
    length, origins equal the camera center.
    """
    w, h = camera.width, camera.height
    f = camera.focal_px
    rows = torch.arange(h, dtype=torch.float64) + 0.5
    cols = torch.arange(w, dtype=torch.float64) + 0.5
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    dirs = torch.stack([
        (cc - 0.5 * w) / f,
        -(rr - 0.5 * h) / f,
        -torch.ones_like(rr),
    ], dim=-1)
    rot = torch.from_numpy(camera.rotation)
    dirs = dirs @ rot  # == (R^T @ d^T)^T, camera-to-world
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = torch.from_numpy(camera.center).expand(h, w, 3)
    return origins.to(dtype).contiguous(), dirs.to(dtype).contiguous()


@dataclass
class ImageBundle:
    """RGB + alpha and optional normal/depth buffers sharing one H x W grid.

    rgb in [0, 1]; alpha continuous in [0, 1]; normals unit length on the
    foreground and NORMAL_BACKGROUND elsewhere; depth is camera-space
    distance with 0 marking background.
    """

    rgb: np.ndarray
    alpha: np.ndarray
    normal: np.ndarray | None = None
    depth: np.ndarray | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.alpha = np.asarray(self.alpha, dtype=np.float32)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be HxWx3, got {self.rgb.shape}")
        hw = self.rgb.shape[:2]
        if self.alpha.shape != hw:
            raise ValueError("alpha does not match rgb resolution")
        if self.normal is not None:
            self.normal = np.asarray(self.normal, dtype=np.float32)
            if self.normal.shape != (*hw, 3):
                raise ValueError("normal does not match rgb resolution")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float32)
            if self.depth.shape != hw:
                raise ValueError("depth does not match rgb resolution")

    @property
    def resolution(self) -> tuple[int, int]:
        h, w = self.rgb.shape[:2]
        return (w, h)


def read_rgba(path: str | Path) -> np.ndarray:
    """Read an 8- or 16-bit RGBA PNG into float (H, W, 4) in [0, 1]."""
    img = Image.open(path)
    if img.mode == "I;16":
        arr = np.asarray(img, dtype=np.float64) / 65535.0
        arr = np.repeat(arr[..., None], 3, axis=-1)
        arr = np.concatenate([arr, np.ones_like(arr[..., :1])], axis=-1)
        return arr.astype(np.float32)
    arr = np.asarray(img.convert("RGBA"), dtype=np.float64)
    return (arr / 255.0).astype(np.float32)


def preprocess_reference(raw_rgba: np.ndarray, target_res: int = 648,
                         height_frac: float = 0.70) -> ImageBundle:
    """Normalize a segmented RGBA photo to the canonical framing.

    The foreground (alpha > 0) is rescaled so its bounding box height is
    round(height_frac * target_res), centered on a target_res x target_res
    canvas, and the background is made solid white. Applying the function
    to its own output is a pixel-exact no-op.
    """
    raw = np.asarray(raw_rgba)
    if raw.ndim != 3 or raw.shape[2] != 4:
        raise ValueError(f"expected HxWx4 RGBA input, got {raw.shape}")
    if raw.dtype == np.uint8:
        raw = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        raw = raw.astype(np.float32) / 65535.0
    else:
        raw = raw.astype(np.float32)
    if target_res < 64:
        raise ValueError("target_res must be >= 64")
    if not 0.0 < height_frac <= 1.0:
        raise ValueError("height_frac must be in (0, 1]")

    alpha = raw[..., 3]
    fg_rows = np.flatnonzero(alpha.max(axis=1) > 0.0)
    fg_cols = np.flatnonzero(alpha.max(axis=0) > 0.0)
    if fg_rows.size == 0:
        raise EmptyMaskError("input alpha has no foreground pixels")
    r0, r1 = int(fg_rows[0]), int(fg_rows[-1])
    c0, c1 = int(fg_cols[0]), int(fg_cols[-1])
    in_h, in_w = alpha.shape
    if r0 == 0 and c0 == 0 and r1 == in_h - 1 and c1 == in_w - 1:
        warnings.warn("foreground touches all four image borders",
                      CroppedSubjectWarning)

    bbox_h = r1 - r0 + 1
    bbox_w = c1 - c0 + 1
    target_h = int(round(height_frac * target_res))
    row_off = int(round(0.5 * (target_res - target_h)))

    # Already normalized (height and centering within a pixel on a square
    # canvas): return the input untouched so the op is idempotent.
    if in_h == in_w == target_res and abs(bbox_h - target_h) <= 1:
        cur_row_off = int(round(0.5 * (target_res - bbox_h)))
        cur_col_off = int(round(0.5 * (target_res - bbox_w)))
        if abs(r0 - cur_row_off) <= 1 and abs(c0 - cur_col_off) <= 1:
            rgb = raw[..., :3].copy()
            rgb[alpha <= 0.0] = WHITE
            return ImageBundle(rgb=rgb, alpha=alpha.copy())

    crop = raw[r0:r1 + 1, c0:c1 + 1]
    scale = target_h / bbox_h
    new_w = max(1, int(round(bbox_w * scale)))
    if (target_h, new_w) != (bbox_h, bbox_w):
        # Premultiplied resize keeps colors from bleeding in from masked
        # pixels inside the bounding box.
        pm = crop[..., :3] * crop[..., 3:4]
        pm = cv2.resize(pm, (new_w, target_h), interpolation=cv2.INTER_LINEAR)
        a = cv2.resize(crop[..., 3], (new_w, target_h),
                       interpolation=cv2.INTER_LINEAR)
        rgb_crop = np.where(a[..., None] > 1e-6, pm / np.maximum(a[..., None], 1e-6), WHITE)
        crop = np.concatenate([rgb_crop, a[..., None]], axis=-1)

    canvas_rgb = np.full((target_res, target_res, 3), WHITE, dtype=np.float32)
    canvas_alpha = np.zeros((target_res, target_res), dtype=np.float32)
    col_off = int(round(0.5 * (target_res - new_w)))
    # Clip against the canvas for extreme aspect ratios.
    src_c0 = max(0, -col_off)
    dst_c0 = max(0, col_off)
    cols = min(new_w - src_c0, target_res - dst_c0)
    src_r0 = max(0, -row_off)
    dst_r0 = max(0, row_off)
    rows = min(target_h - src_r0, target_res - dst_r0)
    patch = crop[src_r0:src_r0 + rows, src_c0:src_c0 + cols]
    canvas_alpha[dst_r0:dst_r0 + rows, dst_c0:dst_c0 + cols] = patch[..., 3]
    canvas_rgb[dst_r0:dst_r0 + rows, dst_c0:dst_c0 + cols] = patch[..., :3]
    canvas_rgb[canvas_alpha <= 0.0] = WHITE
    return ImageBundle(rgb=canvas_rgb, alpha=canvas_alpha)


# ---------------------------------------------------------------------------
# ImageBundle serialization: a directory of PNGs plus a raw depth blob.
# Depth format: magic "CTXD", u32 height, u32 width, height*width little-
# endian f32 values.
# ---------------------------------------------------------------------------

def _to_u8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_depth(path: str | Path, depth: np.ndarray) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(depth.tobytes())


def load_depth(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DEPTH_MAGIC:
            raise ValueError(f"bad depth file magic {magic!r}")
        h, w = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * h * w), dtype="<f4")
    return data.reshape(h, w).astype(np.float32)


def save_bundle(directory: str | Path, bundle: ImageBundle) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(bundle.rgb)).save(directory / "rgb.png")
    Image.fromarray(_to_u8(bundle.alpha)).save(directory / "alpha.png")
    if bundle.normal is not None:
        Image.fromarray(_to_u8(0.5 * (bundle.normal + 1.0))).save(
            directory / "normal.png")
    if bundle.depth is not None:
        save_depth(directory / "depth.ctxd", bundle.depth)


def load_bundle(directory: str | Path) -> ImageBundle:
    directory = Path(directory)
    rgb = np.asarray(Image.open(directory / "rgb.png"), dtype=np.float32) / 255.0
    alpha = np.asarray(Image.open(directory / "alpha.png"), dtype=np.float32) / 255.0
    normal = None
    if (directory / "normal.png").exists():
        n = np.asarray(Image.open(directory / "normal.png"), dtype=np.float32)
        normal = n / 255.0 * 2.0 - 1.0
        fg = alpha > 0.0
        norms = np.linalg.norm(normal, axis=-1, keepdims=True)
        normal = np.where(fg[..., None] & (norms > 1e-6), normal / np.maximum(norms, 1e-6),
                          np.asarray(NORMAL_BACKGROUND, dtype=np.float32))
    depth = None
    if (directory / "depth.ctxd").exists():
        depth = load_depth(directory / "depth.ctxd")
    return ImageBundle(rgb=rgb[..., :3], alpha=alpha, normal=normal, depth=depth)


def write_manifest(directory: str | Path, payload: dict) -> None:
    """Drop a manifest.json next to a stage's outputs (atomic write)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = dict(payload)
    payload.setdefault("written_at", time.strftime("%Y-%m-%dT%H:%M:%S"))
    tmp = directory / ".manifest.tmp"
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    tmp.replace(directory / "manifest.json")
