"""Stage orchestration: coarse field, back-view synthesis, fine geometry,
texture mapping and refinement, plus configuration and artifact export.

Every stage reads and writes a fixed run-directory layout:

    workdir/
      preprocess/   reference bundle (rgb, alpha, normal) + reference.png
      coarse/       field checkpoint, loss log
      backview/     synthesized back image bundle + sidecar
      fine_geo/     mesh.obj, mesh_vis.ply, checkpoint
      texture/      texture field, final renders, turntable/
      eval/         metric reports

Determinism contract: with the mock backend and a fixed seed every stage
is reproducible bit for bit, and resuming from a checkpoint matches the
uninterrupted run exactly. Per-step randomness is derived statelessly
from (seed, stage, step), never from a long-lived RNG.
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import tempfile
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np
import torch
import yaml
from scipy import ndimage

from . import __version__
from .backview import (
    InjectionPolicy,
    ddim_invert,
    normalize_depth_for_conditioning,
    save_backview_bundle,
    synthesize_back_view,
)
from .field import FieldParams, HashGridConfig, load_field, query_texture, save_field
from .guidance import (
    DenoiserBackend,
    MockDenoiser,
    MockSpec,
    NoiseSchedule,
    RemoteBackend,
    sds_grad_text,
    sds_grad_view,
    sds_surrogate_loss,
)
from .losses import (
    LossWeights,
    mask_loss,
    masked_rgb_loss,
    normal_loss,
    sample_patches,
    stage_loss,
    vpc_loss,
)
from .mesh import (
    TetGrid,
    TriMesh,
    compute_vertex_visibility,
    init_sdf_from_density,
    interpolate_attribute,
    laplacian_magnitude,
    load_obj,
    marching_tets,
    normal_consistency,
    pixel_positions,
    rasterize,
    save_obj,
    save_ply,
)
from .scene import (
    Camera,
    ImageBundle,
    ViewSampler,
    back_camera,
    load_bundle,
    preprocess_reference,
    read_rgba,
    reference_camera,
    relative_pose,
    sample_training_view,
    save_bundle,
    write_manifest,
)
from .volume import RayMarchConfig, render

log = logging.getLogger("humanlift")


class ConfigError(ValueError):
    """Malformed run configuration (unknown keys, bad values)."""


class ConfigMismatchError(RuntimeError):
    """Checkpoint was produced under a different configuration."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss."""


class EmptySurfaceError(RuntimeError):
    """The density field contains no extractable surface."""


class NormalEstimatorWarning(UserWarning):
    """External normal estimator failed; using the geometric fallback."""


_TUPLE_FIELDS = {
    "coarse_elevation", "fine_elevation", "azimuth",
    "view_t_range", "text_t_range", "injection_window",
}


@dataclass
class RunConfig:
    """Everything a run needs; defaults are the full-scale recipe."""

    input_image: str = ""
    workdir: str = "runs/subject"
    prompt: str = "a photo of a person"
    seed: int = 0
    backend: str = "mock"              # mock | local | remote
    endpoint: str = ""                 # remote noise service

    # camera model
    distance: float = 3.8
    fov_deg: float = 20.0
    coarse_elevation: tuple = (-30.0, 60.0)
    fine_elevation: tuple = (-45.0, 45.0)
    azimuth: tuple = (-180.0, 180.0)

    # resolutions
    preprocess_resolution: int = 648
    preprocess_height_frac: float = 0.70
    coarse_resolution: int = 128
    fine_resolution: int = 648

    # stage budgets
    coarse_steps: int = 3000
    coarse_lr: float = 5e-3
    geometry_steps: int = 3000
    geometry_lr: float = 1e-2
    geometry_late_step: int = 2000
    texture_steps: int = 4000
    texture_lr: float = 1e-3
    refine_steps: int = 2000

    # guidance
    sds_batch_coarse: int = 4
    sds_batch_fine: int = 1
    view_cfg: float = 5.0
    text_cfg: float = 50.0
    view_t_range: tuple = (0.2, 0.6)
    text_t_range: tuple = (0.02, 0.5)

    # back-view synthesis
    ddim_steps: int = 50
    sampling_cfg: float = 7.5
    injection_window: tuple = (0.0, 1.0)

    # volume rendering / field
    n_samples_per_ray: int = 512
    bound: float = 1.0
    density_blob_scale: float = 5.0
    density_blob_std: float = 0.5
    grid_levels: int = 16
    grid_log2_size: int = 19
    grid_base_res: int = 16
    grid_max_res: int = 4096
    mlp_hidden: int = 64

    # fine geometry
    tet_resolution: int = 256
    density_tau: float = 1.0

    # visibility-aware patch consistency
    vpc_patches: int = 4
    vpc_patch_size: int = 64

    # plumbing
    checkpoint_every: int = 500
    log_every: int = 50
    normal_estimator_cmd: str = ""
    loss_weights: dict = field(default_factory=dict)
    turntable_views: int = 36

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            value = getattr(self, name)
            setattr(self, name, tuple(float(v) for v in value))
        if self.backend not in ("mock", "local", "remote"):
            raise ConfigError(f"backend must be mock|local|remote, got {self.backend!r}")
        for name in ("coarse_steps", "geometry_steps", "texture_steps",
                     "coarse_resolution", "fine_resolution",
                     "n_samples_per_ray", "tet_resolution", "ddim_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.refine_steps < 0:
            raise ConfigError("refine_steps must be >= 0")

    def to_dict(self) -> dict:
        raw = asdict(self)
        for name in _TUPLE_FIELDS:
            raw[name] = list(raw[name])
        return raw

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return RunConfig(**raw)

    @staticmethod
    def load(path, overrides: dict | None = None) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping")
        raw.update(overrides or {})
        return RunConfig.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(
            yaml.safe_dump(self.to_dict(), sort_keys=True,
                           default_flow_style=False))

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def loss_tables(self) -> LossWeights:
        names = ("coarse", "geometry", "geometry_late", "texture",
                 "texture_refine")
        unknown = sorted(set(self.loss_weights) - set(names))
        if unknown:
            raise ConfigError(f"unknown loss weight tables: {unknown}")
        defaults = LossWeights()
        kwargs = {}
        for name, overrides in self.loss_weights.items():
            table = dict(getattr(defaults, name))
            table.update(overrides)
            kwargs[name] = table
        return LossWeights(geometry_late_step=self.geometry_late_step,
                           texture_refine_step=self.texture_steps, **kwargs)

    @staticmethod
    def desk_profile(**overrides) -> "RunConfig":
        """Small CPU-friendly preset used by CI and smoke runs.

        Normal supervision is disabled in the coarse stage: computing
        density-gradient normals with a second-order graph is the single
        most expensive render mode, and the preset targets minutes, not
        fidelity.
        """
        base = dict(
            coarse_resolution=64, fine_resolution=64,
            preprocess_resolution=128,
            coarse_steps=100, geometry_steps=200, geometry_late_step=133,
            texture_steps=300, refine_steps=100, texture_lr=5e-3,
            n_samples_per_ray=32, tet_resolution=40,
            ddim_steps=10, sds_batch_coarse=2,
            grid_levels=8, grid_log2_size=15, grid_max_res=128,
            mlp_hidden=32, vpc_patch_size=16, vpc_patches=4,
            checkpoint_every=50, log_every=20, turntable_views=12,
            loss_weights={"coarse": {"normal": 0.0}},
        )
        base.update(overrides)
        return RunConfig.from_dict(base)

    def stage_dir(self, stage: str) -> Path:
        return Path(self.workdir) / stage


@dataclass
class StageCheckpoint:
    stage: str
    step: int
    config_hash: str
    payload: dict

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {"stage": self.stage, "step": self.step,
                "config_hash": self.config_hash, "payload": self.payload}
        with tempfile.NamedTemporaryFile(dir=path.parent, delete=False) as tmp:
            torch.save(blob, tmp.name)
            tmp_path = Path(tmp.name)
        tmp_path.replace(path)
        return path

    @staticmethod
    def load(path) -> "StageCheckpoint":
        blob = torch.load(path, weights_only=False)
        return StageCheckpoint(stage=blob["stage"], step=blob["step"],
                               config_hash=blob["config_hash"],
                               payload=blob["payload"])

    def verify(self, cfg: RunConfig) -> None:
        if self.config_hash != cfg.config_hash:
            raise ConfigMismatchError(
                f"checkpoint {self.stage}@{self.step} was written under config "
                f"{self.config_hash}, current is {cfg.config_hash}")


def step_generator(seed: int, stage: str, step: int) -> torch.Generator:
    """Stateless per-step RNG; resuming cannot shift any stream."""
    digest = hashlib.sha256(f"{seed}|{stage}|{step}".encode()).digest()
    gen = torch.Generator()
    gen.manual_seed(int.from_bytes(digest[:8], "little") % (2 ** 63))
    return gen


_REMOTE_MODELS = {"view": "zero123", "text": "sd", "depth": "sd_depth"}


def make_backend(cfg: RunConfig, role: str) -> DenoiserBackend:
    """Backend instance for a guidance role: view | text | depth."""
    if role not in _REMOTE_MODELS:
        raise ValueError(f"unknown backend role {role!r}")
    if cfg.backend == "mock":
        # the depth-conditioned branch carries the attention block so K/V
        # injection has something to grab; SDS roles stay linear and cheap
        return MockDenoiser(MockSpec(seed=cfg.seed, attention=(role == "depth")))
    if cfg.backend == "remote":
        if not cfg.endpoint:
            raise ConfigError("remote backend needs an endpoint")
        return RemoteBackend(
            cfg.endpoint, model=_REMOTE_MODELS[role],
            supports_text=role in ("text", "depth"),
            supports_view=role == "view", supports_depth=role == "depth")
    raise ConfigError(
        "local backend instances must be passed programmatically; "
        "the CLI supports mock and remote")


def code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True,
            text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"pkg-{__version__}"


class LossLogger:
    """Long-format CSV: one (step, name, value) row per component."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", buffering=1)
        self._fh.write("step,name,value\n")

    def log(self, step: int, values: dict[str, float]) -> None:
        for name, value in values.items():
            self._fh.write(f"{step},{name},{float(value):.8g}\n")

    def close(self) -> None:
        self._fh.close()


def _assert_finite(value: torch.Tensor, stage: str, step: int,
                   checkpoint: Path | None) -> None:
    if not torch.isfinite(value).all():
        hint = f"; last good checkpoint: {checkpoint}" if checkpoint else ""
        raise DivergenceError(f"{stage} loss is not finite at step {step}{hint}")


def _stage_manifest(cfg: RunConfig, stage: str, started: float,
                    inputs: list[str], extra: dict | None = None) -> None:
    payload = {
        "stage": stage,
        "config_hash": cfg.config_hash,
        "code_version": code_version(),
        "inputs": inputs,
        "wall_time_s": round(time.time() - started, 3),
    }
    payload.update(extra or {})
    write_manifest(cfg.stage_dir(stage), payload)


def _write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.ndim == 3 and u8.shape[2] == 3:
        u8 = cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), u8):
        raise IOError(f"failed to write {path}")


def _resize_bundle(bundle: ImageBundle, size: int) -> ImageBundle:
    if bundle.rgb.shape[0] == size and bundle.rgb.shape[1] == size:
        return bundle
    interp = cv2.INTER_AREA if size < bundle.rgb.shape[0] else cv2.INTER_LINEAR
    rgb = cv2.resize(bundle.rgb, (size, size), interpolation=interp)
    alpha = cv2.resize(bundle.alpha, (size, size), interpolation=interp)
    normal = None
    if bundle.normal is not None:
        normal = cv2.resize(bundle.normal, (size, size), interpolation=interp)
        norms = np.linalg.norm(normal, axis=-1, keepdims=True)
        fg = alpha > 0.0
        normal = np.where(fg[..., None] & (norms > 1e-6),
                          normal / np.maximum(norms, 1e-6),
                          np.zeros(3, dtype=np.float32))
    depth = None
    if bundle.depth is not None:
        depth = cv2.resize(bundle.depth, (size, size), interpolation=interp)
    return ImageBundle(rgb=rgb, alpha=alpha, normal=normal, depth=depth)


def _flat_front_normal(alpha: np.ndarray) -> np.ndarray:
    """Fallback front normal: camera-facing +z inside the silhouette."""
    normal = np.zeros((*alpha.shape, 3), dtype=np.float32)
    normal[alpha > 0.5] = [0.0, 0.0, 1.0]
    return normal


def run_normal_estimator(cmd: str, rgba: np.ndarray) -> np.ndarray | None:
    """External hook: {input} RGBA PNG in, {output} normal PNG out.

    Returns the decoded [-1, 1] normal map, or None (with a warning) when
    the command fails.
    """
    with tempfile.TemporaryDirectory() as tmp:
        inp = Path(tmp) / "input.png"
        outp = Path(tmp) / "normal.png"
        u8 = np.round(np.clip(rgba, 0, 1) * 255).astype(np.uint8)
        cv2.imwrite(str(inp), cv2.cvtColor(u8, cv2.COLOR_RGBA2BGRA))
        try:
            proc = subprocess.run(cmd.format(input=inp, output=outp),
                                  shell=True, capture_output=True, timeout=600)
        except (OSError, subprocess.SubprocessError) as err:
            warnings.warn(f"normal estimator failed ({err}); using fallback",
                          NormalEstimatorWarning)
            return None
        if proc.returncode != 0 or not outp.exists():
            warnings.warn(
                f"normal estimator exited {proc.returncode}; using fallback",
                NormalEstimatorWarning)
            return None
        png = cv2.cvtColor(cv2.imread(str(outp)), cv2.COLOR_BGR2RGB)
        return (png.astype(np.float32) / 255.0) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# Stage: preprocess
# ---------------------------------------------------------------------------

def run_preprocess(cfg: RunConfig) -> Path:
    """Normalize the input photo and estimate the front normal map."""
    started = time.time()
    if not cfg.input_image:
        raise ConfigError("input_image is not set")
    raw = read_rgba(cfg.input_image)
    bundle = preprocess_reference(raw, cfg.preprocess_resolution,
                                  cfg.preprocess_height_frac)

    normal = None
    if cfg.normal_estimator_cmd:
        rgba = np.concatenate([bundle.rgb, bundle.alpha[..., None]], axis=-1)
        normal = run_normal_estimator(cfg.normal_estimator_cmd, rgba)
    if normal is None:
        normal = _flat_front_normal(bundle.alpha)
    bundle = ImageBundle(rgb=bundle.rgb, alpha=bundle.alpha, normal=normal)

    out = cfg.stage_dir("preprocess")
    save_bundle(out, bundle)
    _write_png(out / "reference.png",
               bundle.rgb * bundle.alpha[..., None]
               + (1.0 - bundle.alpha[..., None]))
    _stage_manifest(cfg, "preprocess", started, [cfg.input_image])
    log.info("preprocess: wrote %s", out)
    return out


def _load_preprocess(cfg: RunConfig, size: int) -> ImageBundle:
    pre = cfg.stage_dir("preprocess")
    if not (pre / "rgb.png").exists():
        raise FileNotFoundError(
            f"{pre} is missing; run the preprocess stage first")
    return _resize_bundle(load_bundle(pre), size)


# ---------------------------------------------------------------------------
# Stage: coarse field
# ---------------------------------------------------------------------------

def _field_config(cfg: RunConfig, seed: int | None = None) -> HashGridConfig:
    return HashGridConfig(
        n_levels=cfg.grid_levels, log2_hashmap_size=cfg.grid_log2_size,
        base_resolution=cfg.grid_base_res, max_resolution=cfg.grid_max_res,
        mlp_hidden=cfg.mlp_hidden, bound=cfg.bound,
        density_blob_scale=cfg.density_blob_scale,
        density_blob_std=cfg.density_blob_std,
        seed=cfg.seed if seed is None else seed)


def _coarse_sampler(cfg: RunConfig) -> ViewSampler:
    return ViewSampler(elevation_range_deg=cfg.coarse_elevation,
                       azimuth_range_deg=cfg.azimuth,
                       distance=cfg.distance, fov_deg=cfg.fov_deg,
                       seed=cfg.seed,
                       resolution=(cfg.coarse_resolution, cfg.coarse_resolution))


def run_coarse(cfg: RunConfig, resume: bool = False,
               _abort_after: int | None = None) -> Path:
    """Optimize the coarse radiance field against the reference + SDS."""
    started = time.time()
    out = cfg.stage_dir("coarse")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.pt"

    res = cfg.coarse_resolution
    bundle = _load_preprocess(cfg, res)
    ref_rgb = torch.from_numpy(bundle.rgb)
    ref_alpha = torch.from_numpy(bundle.alpha)
    ref_normal = torch.from_numpy(bundle.normal) if bundle.normal is not None \
        else None

    field_model = FieldParams(_field_config(cfg))
    optimizer = torch.optim.Adam(field_model.parameters(), lr=cfg.coarse_lr,
                                 betas=(0.9, 0.99))
    start_step = 0
    if resume:
        if not ckpt_path.exists():
            raise FileNotFoundError(f"no checkpoint to resume at {ckpt_path}")
        ckpt = StageCheckpoint.load(ckpt_path)
        ckpt.verify(cfg)
        field_model.load_state_dict(ckpt.payload["field"])
        optimizer.load_state_dict(ckpt.payload["optimizer"])
        start_step = ckpt.step
        log.info("coarse: resumed at step %d", start_step)

    sampler = _coarse_sampler(cfg)
    ref_cam = reference_camera(sampler)
    weights = cfg.loss_tables()
    schedule = NoiseSchedule.linear_beta()
    backend = make_backend(cfg, "view")
    ref_chw = ref_rgb.permute(2, 0, 1).contiguous()

    march = RayMarchConfig(n_samples=cfg.n_samples_per_ray,
                           render_normals=weights.coarse.get("normal", 0) > 0
                           and ref_normal is not None)
    plain = RayMarchConfig(n_samples=cfg.n_samples_per_ray)

    logger = LossLogger(out / "losses.csv")
    last_ckpt: Path | None = ckpt_path if start_step > 0 else None

    def save_ckpt(step: int) -> Path:
        return StageCheckpoint(
            "coarse", step, cfg.config_hash,
            {"field": field_model.state_dict(),
             "optimizer": optimizer.state_dict()}).save(ckpt_path)

    try:
        for step in range(start_step, cfg.coarse_steps):
            gen = step_generator(cfg.seed, "coarse", step)
            ref_out = render(field_model, ref_cam, march)
            components = {
                "rgb": masked_rgb_loss(ref_rgb, ref_out["rgb"], ref_alpha),
                "mask": mask_loss(ref_alpha, ref_out["alpha"]),
            }
            if march.render_normals:
                components["normal"] = normal_loss(
                    ref_normal, ref_out["normal"], ref_alpha)
            else:
                components["normal"] = torch.zeros(())

            if weights.coarse.get("sds", 0) > 0:
                sds_total = torch.zeros(())
                for b in range(cfg.sds_batch_coarse):
                    cam = sample_training_view(
                        sampler, step * cfg.sds_batch_coarse + b + 1)
                    view = render(field_model, cam, plain)
                    img = view["rgb"].permute(2, 0, 1)
                    rot, tr = relative_pose(ref_cam, cam)
                    grad = sds_grad_view(
                        backend, schedule, img, ref_chw, rot, tr,
                        cfg=cfg.view_cfg, generator=gen,
                        t_range=cfg.view_t_range)
                    sds_total = sds_total + sds_surrogate_loss(img, grad)
                components["sds"] = sds_total / cfg.sds_batch_coarse
            else:
                components["sds"] = torch.zeros(())

            total = stage_loss("coarse", components, weights, step)
            _assert_finite(total, "coarse", step, last_ckpt)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            logger.log(step, {**{k: float(v.detach())
                                 for k, v in components.items()},
                              "total": float(total.detach())})
            if step % cfg.log_every == 0:
                log.info("coarse %d/%d loss %.4f", step, cfg.coarse_steps,
                         float(total.detach()))
            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.coarse_steps:
                last_ckpt = save_ckpt(done)
            if _abort_after is not None and done >= _abort_after:
                log.info("coarse: stopping early at step %d (test hook)", done)
                return ckpt_path
    finally:
        logger.close()

    save_field(out / "field.ctxf", field_model)
    _stage_manifest(cfg, "coarse", started,
                    [str(cfg.stage_dir("preprocess"))],
                    {"steps": cfg.coarse_steps})
    return ckpt_path


def _load_coarse_field(cfg: RunConfig) -> FieldParams:
    path = cfg.stage_dir("coarse") / "field.ctxf"
    if path.exists():
        return load_field(path)
    ckpt_path = cfg.stage_dir("coarse") / "checkpoint.pt"
    if not ckpt_path.exists():
        raise FileNotFoundError("coarse stage has not produced a field yet")
    ckpt = StageCheckpoint.load(ckpt_path)
    ckpt.verify(cfg)
    field_model = FieldParams(_field_config(cfg))
    field_model.load_state_dict(ckpt.payload["field"])
    return field_model


# ---------------------------------------------------------------------------
# Stage: back view
# ---------------------------------------------------------------------------

def run_backview(cfg: RunConfig) -> Path:
    """Synthesize the texture-consistent back view from the coarse field."""
    started = time.time()
    out = cfg.stage_dir("backview")
    out.mkdir(parents=True, exist_ok=True)
    res = cfg.coarse_resolution

    field_model = _load_coarse_field(cfg)
    bundle = _load_preprocess(cfg, res)
    sampler = _coarse_sampler(cfg)
    ref_cam = reference_camera(sampler)
    bk_cam = back_camera(ref_cam)

    with torch.no_grad():
        front = render(field_model, ref_cam,
                       RayMarchConfig(n_samples=cfg.n_samples_per_ray))
        back = render(field_model, bk_cam,
                      RayMarchConfig(n_samples=cfg.n_samples_per_ray,
                                     render_normals=True))

    latent_size = res // 8 if res % 8 == 0 else res
    channel_front = normalize_depth_for_conditioning(
        front["depth"].numpy(), front["alpha"].numpy(), out_size=latent_size)
    channel_back = normalize_depth_for_conditioning(
        back["depth"].numpy(), back["alpha"].numpy(), out_size=latent_size)

    schedule = NoiseSchedule.linear_beta()
    backend = make_backend(cfg, "depth")
    ref_chw = torch.from_numpy(
        bundle.rgb * bundle.alpha[..., None]
        + (1.0 - bundle.alpha[..., None])).permute(2, 0, 1).contiguous()

    start = ddim_invert(backend, schedule, ref_chw, channel_front,
                        cfg.prompt, steps=cfg.ddim_steps)
    alpha_b = back["alpha"].numpy().astype(np.float32)
    result = synthesize_back_view(
        backend, schedule, start, channel_front, channel_back, cfg.prompt,
        policy=InjectionPolicy(step_window=cfg.injection_window),
        steps=cfg.ddim_steps, cfg=cfg.sampling_cfg, mask_back=alpha_b,
        out_size=(res, res))

    normal_b = None
    if cfg.normal_estimator_cmd:
        rgba = np.concatenate([result.image, alpha_b[..., None]], axis=-1)
        normal_b = run_normal_estimator(cfg.normal_estimator_cmd, rgba)
    if normal_b is None:
        # geometric fallback: coarse-field normals seen from the back camera
        normal_b = back["normal"].numpy().astype(np.float32).copy()
        normal_b[alpha_b <= 0.5] = 0.0

    depth_b = back["depth"].numpy().astype(np.float32)
    save_backview_bundle(out, result, depth_back=depth_b)
    save_bundle(out, ImageBundle(rgb=result.image, alpha=alpha_b,
                                 normal=normal_b, depth=depth_b))
    _stage_manifest(cfg, "backview", started,
                    [str(cfg.stage_dir("coarse"))],
                    {"back_prompt": result.back_prompt})
    return out


# ---------------------------------------------------------------------------
# Stage: fine geometry
# ---------------------------------------------------------------------------

def rendered_normal_image(mesh: TriMesh, fragment) -> torch.Tensor:
    """Interpolated world-space vertex normals, renormalized, zero off-mesh."""
    interp = interpolate_attribute(fragment, mesh, mesh.vertex_normals())
    norms = interp.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    out = interp / norms
    return out * fragment.covered[..., None]


def optimize_geometry(cfg: RunConfig, grid: TetGrid, sdf_init: torch.Tensor,
                      targets: dict, logger: LossLogger | None = None,
                      ) -> tuple[TriMesh, torch.Tensor, torch.Tensor, list]:
    """Fit sdf + deform to front/back normal and mask targets.

    targets: {"front": (normal, alpha, camera), "back": (normal, alpha, camera)}
    Returns the final mesh, sdf, deform, and the per-step total losses.
    """
    sdf = torch.nn.Parameter(sdf_init.clone())
    deform = torch.nn.Parameter(torch.zeros(grid.vertices.shape[0], 3))
    optimizer = torch.optim.Adam([sdf, deform], lr=cfg.geometry_lr,
                                 betas=(0.9, 0.99))
    weights = cfg.loss_tables()
    history = []
    mesh = marching_tets(grid, sdf, deform)
    if mesh.n_faces == 0:
        raise EmptySurfaceError("initial density has no surface at the threshold")

    fit_weights = weights.weights_for("geometry", 0)
    need_raster = fit_weights.get("normal", 0) > 0 or fit_weights.get("mask", 0) > 0
    for step in range(cfg.geometry_steps):
        mesh = marching_tets(grid, sdf, deform)
        if mesh.n_faces == 0:
            raise EmptySurfaceError(f"surface vanished at step {step}")
        normal_term = torch.zeros(())
        mask_term = torch.zeros(())
        if need_raster:
            for name in ("front", "back"):
                target_normal, target_alpha, camera = targets[name]
                frag = rasterize(mesh, camera)
                normal_term = normal_term + normal_loss(
                    target_normal, rendered_normal_image(mesh, frag),
                    target_alpha)
                mask_term = mask_term + mask_loss(target_alpha, frag.alpha)
        components = {
            "normal": normal_term,
            "mask": mask_term,
            "laplacian": laplacian_magnitude(mesh),
            "smooth": normal_consistency(mesh),
        }
        total = stage_loss("geometry", components, weights, step)
        _assert_finite(total, "geometry", step, None)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        history.append(float(total.detach()))
        if logger is not None:
            logger.log(step, {**{k: float(v.detach())
                                 for k, v in components.items()},
                              "total": float(total.detach())})
        if step % cfg.log_every == 0:
            log.info("geometry %d/%d loss %.4f", step, cfg.geometry_steps,
                     float(total.detach()))

    final = marching_tets(grid, sdf.detach(), deform.detach())
    return final, sdf.detach(), deform.detach(), history


def _clean_init_occupancy(grid: TetGrid, sdf: torch.Tensor) -> torch.Tensor:
    """Drop init junk: clamp to the centered ball, keep one body.

    The coarse field is only supervised inside the viewing cone; grid
    corners and free-floating blobs are extrapolation noise. The subject
    is a single connected body inside the unit ball by construction.
    """
    ball = 0.98 * grid.bound - grid.vertices.norm(dim=-1)
    sdf = torch.minimum(sdf, ball)
    n = grid.resolution + 1
    occ = (sdf > 0).reshape(n, n, n).numpy()
    labels, count = ndimage.label(occ)
    if count > 1:
        sizes = ndimage.sum_labels(occ, labels, index=range(1, count + 1))
        junk = torch.from_numpy((labels != 1 + int(np.argmax(sizes))) & occ)
        sdf = torch.where(junk.reshape(-1), -sdf.abs(), sdf)
    return sdf


def run_fine_geometry(cfg: RunConfig) -> Path:
    """DMTet-style geometry sculpting from the coarse density."""
    started = time.time()
    out = cfg.stage_dir("fine_geo")
    out.mkdir(parents=True, exist_ok=True)
    res = cfg.fine_resolution

    field_model = _load_coarse_field(cfg)
    grid = TetGrid.cube_grid(cfg.tet_resolution, cfg.bound)
    sdf_init = init_sdf_from_density(field_model, grid, tau=cfg.density_tau)
    sdf_init = _clean_init_occupancy(grid, sdf_init)

    pre = _load_preprocess(cfg, res)
    bv_dir = cfg.stage_dir("backview")
    if not (bv_dir / "rgb.png").exists():
        raise FileNotFoundError("backview stage outputs missing")
    bv = _resize_bundle(load_bundle(bv_dir), res)
    if pre.normal is None or bv.normal is None:
        raise FileNotFoundError("normal maps missing from stage inputs")

    sampler = _coarse_sampler(cfg)
    ref_cam = reference_camera(sampler).with_resolution((res, res))
    bk_cam = back_camera(ref_cam)
    targets = {
        "front": (torch.from_numpy(pre.normal), torch.from_numpy(pre.alpha),
                  ref_cam),
        "back": (torch.from_numpy(bv.normal), torch.from_numpy(bv.alpha),
                 bk_cam),
    }

    logger = LossLogger(out / "losses.csv")
    try:
        mesh, sdf, deform, _ = optimize_geometry(cfg, grid, sdf_init, targets,
                                                 logger)
    finally:
        logger.close()

    save_obj(out / "mesh.obj", mesh)
    visibility = compute_vertex_visibility(mesh, [ref_cam, bk_cam])
    save_ply(out / "mesh_vis.ply", mesh, visibility.to(torch.float32))
    StageCheckpoint("fine_geo", cfg.geometry_steps, cfg.config_hash,
                    {"sdf": sdf, "deform": deform,
                     "tet_resolution": cfg.tet_resolution,
                     "bound": cfg.bound}).save(out / "checkpoint.pt")
    _stage_manifest(cfg, "fine_geo", started,
                    [str(cfg.stage_dir("coarse")), str(bv_dir)],
                    {"n_vertices": mesh.n_vertices, "n_faces": mesh.n_faces,
                     "watertight": bool(mesh.is_watertight())})
    return out


# ---------------------------------------------------------------------------
# Stage: texture
# ---------------------------------------------------------------------------

def shade_view(mesh: TriMesh, fragment, tex_field: FieldParams) -> torch.Tensor:
    """Texture-field colors at rasterized surface points, white elsewhere."""
    h, w = fragment.face_id.shape
    img = torch.ones(h, w, 3)
    covered = fragment.covered
    if covered.any():
        pos = pixel_positions(fragment, mesh)[covered]
        img = img.index_put((covered,), query_texture(tex_field, pos))
    alpha = fragment.alpha.detach()[..., None]
    return img * alpha + (1.0 - alpha)


def _fine_sampler(cfg: RunConfig) -> ViewSampler:
    return ViewSampler(elevation_range_deg=cfg.fine_elevation,
                       azimuth_range_deg=cfg.azimuth,
                       distance=cfg.distance, fov_deg=cfg.fov_deg,
                       seed=cfg.seed + 1,
                       resolution=(cfg.fine_resolution, cfg.fine_resolution))


def run_texture(cfg: RunConfig) -> Path:
    """Texture-field optimization with SDS + VPC, then refinement."""
    started = time.time()
    out = cfg.stage_dir("texture")
    out.mkdir(parents=True, exist_ok=True)
    res = cfg.fine_resolution

    mesh_path = cfg.stage_dir("fine_geo") / "mesh.obj"
    if not mesh_path.exists():
        raise FileNotFoundError("fine_geo stage outputs missing")
    mesh = load_obj(mesh_path)

    pre = _load_preprocess(cfg, res)
    bv = _resize_bundle(load_bundle(cfg.stage_dir("backview")), res)

    sampler = _fine_sampler(cfg)
    ref_cam = reference_camera(sampler)
    bk_cam = back_camera(ref_cam)
    visibility = compute_vertex_visibility(mesh, [ref_cam, bk_cam])

    tex_field = FieldParams(_field_config(cfg, seed=cfg.seed + 7))
    optimizer = torch.optim.Adam(tex_field.parameters(), lr=cfg.texture_lr,
                                 betas=(0.9, 0.99))

    weights = cfg.loss_tables()
    schedule = NoiseSchedule.linear_beta()
    backend_view = make_backend(cfg, "view")
    backend_text = make_backend(cfg, "text")

    frag_ref = rasterize(mesh, ref_cam)
    frag_back = rasterize(mesh, bk_cam)
    ref_rgb = torch.from_numpy(pre.rgb)
    ref_alpha = torch.from_numpy(pre.alpha)
    back_rgb = torch.from_numpy(bv.rgb)
    back_alpha = torch.from_numpy(bv.alpha)
    ref_chw = (ref_rgb * ref_alpha[..., None]
               + (1 - ref_alpha[..., None])).permute(2, 0, 1).contiguous()

    total_steps = cfg.texture_steps + cfg.refine_steps
    logger = LossLogger(out / "losses.csv")
    try:
        for step in range(total_steps):
            gen = step_generator(cfg.seed, "texture", step)
            w = weights.weights_for("texture", step)

            img_ref = shade_view(mesh, frag_ref, tex_field)
            img_back = shade_view(mesh, frag_back, tex_field)
            rgb_term = masked_rgb_loss(ref_rgb, img_ref, ref_alpha) \
                + masked_rgb_loss(back_rgb, img_back, back_alpha)

            need_view = w.get("sds_view", 0) > 0
            need_text = w.get("sds_text", 0) > 0
            need_vpc = w.get("vpc", 0) > 0
            sds_view_term = torch.zeros(())
            sds_text_term = torch.zeros(())
            vpc_term = torch.zeros(())
            if need_view or need_text or need_vpc:
                cam = sample_training_view(sampler, step + 1)
                frag = rasterize(mesh, cam)
                img = shade_view(mesh, frag, tex_field)
                img_chw = img.permute(2, 0, 1)
                if need_view:
                    for _ in range(cfg.sds_batch_fine):
                        rot, tr = relative_pose(ref_cam, cam)
                        grad = sds_grad_view(backend_view, schedule, img_chw,
                                             ref_chw, rot, tr,
                                             cfg=cfg.view_cfg, generator=gen,
                                             t_range=cfg.view_t_range)
                        sds_view_term = sds_view_term + \
                            sds_surrogate_loss(img_chw, grad)
                    sds_view_term = sds_view_term / cfg.sds_batch_fine
                if need_text:
                    grad = sds_grad_text(backend_text, schedule, img_chw,
                                         cfg.prompt, cfg=cfg.text_cfg,
                                         generator=gen,
                                         t_range=cfg.text_t_range)
                    sds_text_term = sds_surrogate_loss(img_chw, grad)
                if need_vpc:
                    vis_interp = interpolate_attribute(
                        frag, mesh, visibility.to(torch.float32))
                    vis_map = (vis_interp[..., 0] > 0.5) & frag.covered
                    silhouette = (frag.alpha > 0.5).to(torch.float32)
                    patches = sample_patches(
                        img, vis_map, silhouette, n_patches=cfg.vpc_patches,
                        size=cfg.vpc_patch_size, generator=gen)
                    for patch in patches:
                        vpc_term = vpc_term + vpc_loss(patch)
                    vpc_term = vpc_term / max(len(patches), 1)

            components = {"sds_view": sds_view_term,
                          "sds_text": sds_text_term,
                          "rgb": rgb_term, "vpc": vpc_term}
            total = stage_loss("texture", components, weights, step)
            _assert_finite(total, "texture", step, None)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            logger.log(step, {**{k: float(v.detach())
                                 for k, v in components.items()},
                              "total": float(total.detach())})
            if step % cfg.log_every == 0:
                log.info("texture %d/%d loss %.4f", step, total_steps,
                         float(total.detach()))
    finally:
        logger.close()

    save_field(out / "texture.ctxf", tex_field)
    with torch.no_grad():
        _write_png(out / "front.png",
                   shade_view(mesh, frag_ref, tex_field).numpy())
        _write_png(out / "back.png",
                   shade_view(mesh, frag_back, tex_field).numpy())
    export_turntable(cfg, mesh, tex_field, out / "turntable")
    StageCheckpoint("texture", total_steps, cfg.config_hash,
                    {"field": tex_field.state_dict()}).save(out / "checkpoint.pt")
    _stage_manifest(cfg, "texture", started,
                    [str(mesh_path), str(cfg.stage_dir("backview"))],
                    {"steps": total_steps})
    return out


def export_turntable(cfg: RunConfig, mesh: TriMesh, tex_field: FieldParams,
                     out_dir) -> Path:
    """Equally spaced orbit renders at elevation 0 plus a camera sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = cfg.turntable_views
    step_deg = 360.0 / n
    res = cfg.fine_resolution
    cams = []
    with torch.no_grad():
        for i in range(n):
            azimuth = i * step_deg
            cam = Camera.from_orbit(0.0, azimuth, cfg.distance, cfg.fov_deg,
                                    (res, res))
            frag = rasterize(mesh, cam)
            _write_png(out_dir / f"view_{i:02d}.png",
                       shade_view(mesh, frag, tex_field).numpy())
            cams.append({"index": i, "azimuth_deg": azimuth,
                         "elevation_deg": 0.0})
    (out_dir / "cameras.json").write_text(json.dumps(
        {"distance": cfg.distance, "fov_deg": cfg.fov_deg, "views": cams},
        indent=2))
    return out_dir


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------

def run_full(cfg: RunConfig) -> dict[str, Path]:
    """All stages in order; returns the per-stage output directories."""
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(cfg.workdir) / "config.yaml")
    outputs = {"preprocess": run_preprocess(cfg)}
    run_coarse(cfg)
    outputs["coarse"] = cfg.stage_dir("coarse")
    outputs["backview"] = run_backview(cfg)
    outputs["fine_geo"] = run_fine_geometry(cfg)
    outputs["texture"] = run_texture(cfg)
    return outputs
