"""Score-distillation guidance with pluggable denoiser backends.

The SDS operations sample a timestep and a noise draw, ask a backend for
its noise prediction (classifier-free guidance composed from the
conditional and unconditional heads), and hand back the raw gradient
w(t) * (eps_hat - eps). The gradient reaches the renderered image through
the usual surrogate 0.5 * ||x - sg(x - g)||^2, never through the backend.

Backends: a deterministic mock (diagonal-linear per-condition operator,
optionally with a tiny self-attention block so feature injection can be
exercised), an in-process adapter around any callable model, and a remote
HTTP service client.
"""

from __future__ import annotations

import abc
import base64
import hashlib
import math
import time
from dataclasses import dataclass

import numpy as np
import requests
import torch


class CapabilityError(RuntimeError):
    """Backend does not support the requested conditioning."""


class BackendUnavailable(RuntimeError):
    """Remote backend kept failing after all retries."""


class InjectionShapeError(RuntimeError):
    """Captured K/V tensors do not fit the attention block they feed."""


@dataclass
class NoiseSchedule:
    """Cumulative signal levels alpha_bar for a discrete diffusion process."""

    num_steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.alpha_bar.shape != (self.num_steps,):
            raise ValueError("alpha_bar length must equal num_steps")
        if self.alpha_bar[0] < 0.99:
            raise ValueError("alpha_bar[0] must be >= 0.99")
        if not (self.alpha_bar > 0).all() or not (self.alpha_bar <= 1).all():
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @staticmethod
    def linear_beta(num_steps: int = 1000, beta_start: float = 8.5e-4,
                    beta_end: float = 1.2e-2) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
        return NoiseSchedule(num_steps, np.cumprod(1.0 - betas))

    def add_noise(self, x0: torch.Tensor, t: int,
                  noise: torch.Tensor) -> torch.Tensor:
        ab = float(self.alpha_bar[t])
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


@dataclass
class TextCondition:
    prompt: str
    depth: torch.Tensor | None = None  # optional depth conditioning map


@dataclass
class ViewCondition:
    reference: torch.Tensor  # (3, H, W) or (H, W, 3) reference image
    rotation: np.ndarray     # (3, 3) relative pose
    translation: np.ndarray  # (3,)


Condition = TextCondition | ViewCondition | None


@dataclass
class GuidanceRequest:
    """One guidance evaluation: what to denoise and under which condition."""

    latent_or_image: torch.Tensor
    condition: Condition
    t_range: tuple[float, float] = (0.02, 0.98)
    cfg_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.t_range
        if not (0.0 < lo < hi < 1.0):
            raise ValueError(f"t_range must satisfy 0 < lo < hi < 1, got {self.t_range}")


class AttentionTap:
    """Capture or override the K/V streams of a backend's attention block.

    In capture mode every (layer, t) key/value pair is stored. In inject
    mode, stored tensors (typically captured from another branch) replace
    the block's own K/V when the policy admits the (layer, t) pair.
    """

    def __init__(self, mode: str = "capture",
                 source: "AttentionTap | None" = None,
                 admit=None):
        if mode not in ("capture", "inject"):
            raise ValueError("mode must be 'capture' or 'inject'")
        self.mode = mode
        self.source = source
        self.admit = admit or (lambda layer, t: True)
        self.store: dict[tuple[int, int], tuple[torch.Tensor, torch.Tensor]] = {}

    def visit(self, layer: int, t: int, k: torch.Tensor, v: torch.Tensor,
              ) -> tuple[torch.Tensor, torch.Tensor]:
        if self.mode == "capture":
            self.store[(layer, t)] = (k.detach().clone(), v.detach().clone())
            return k, v
        if self.source is not None and self.admit(layer, t):
            stored = self.source.store.get((layer, t))
            if stored is not None:
                ks, vs = stored
                if ks.shape != k.shape or vs.shape != v.shape:
                    raise InjectionShapeError(
                        f"stored K/V {tuple(ks.shape)}/{tuple(vs.shape)} vs "
                        f"local {tuple(k.shape)}/{tuple(v.shape)}")
                return stored
        return k, v


class DenoiserBackend(abc.ABC):
    """A noise predictor eps_hat(x_t; condition, t)."""

    kind: str = "abstract"
    latent_shape: tuple[int, ...] = ()
    input_size: int | None = None  # square spatial size the backend expects
    supports_text: bool = False
    supports_view_condition: bool = False
    supports_depth: bool = False

    @abc.abstractmethod
    def predict_noise(self, x_t: torch.Tensor, condition: Condition, t: int,
                      noise: torch.Tensor | None = None,
                      tap: AttentionTap | None = None) -> torch.Tensor:
        """Predict the noise content of x_t.

        `noise` is oracle plumbing: the true draw that produced x_t, used
        by the perfect mock; real backends ignore it. `tap` exposes the
        attention internals where the backend has any.
        """


def _condition_bytes(condition: Condition) -> bytes:
    if condition is None:
        return b"uncond:"
    if isinstance(condition, TextCondition):
        out = b"text:" + condition.prompt.encode("utf-8")
        if condition.depth is not None:
            d = np.asarray(condition.depth.detach().cpu().numpy(),
                           dtype=np.float32)
            out += b"|depth:" + str(d.shape).encode() + d.tobytes()
        return out
    if isinstance(condition, ViewCondition):
        ref = np.asarray(condition.reference.detach().cpu().numpy(),
                         dtype=np.float32)
        pose = np.concatenate([
            np.asarray(condition.rotation, dtype=np.float64).reshape(-1),
            np.asarray(condition.translation, dtype=np.float64).reshape(-1),
        ]).round(8)
        return (b"view:" + str(ref.shape).encode() + ref.tobytes()
                + b"|pose:" + pose.tobytes())
    raise TypeError(f"unknown condition type {type(condition).__name__}")


@dataclass
class MockSpec:
    """Recipe for the deterministic mock backend.

    eps_hat = gain * U_c (x) x_t + bias * B_c, with U_c, B_c fixed
    pseudo-random fields keyed by (seed, condition). gain = bias = 0 gives
    the exact zero predictor; perfect=True echoes the true noise instead.
    """

    seed: int = 0
    gain: float = 0.6
    bias: float = 0.4
    perfect: bool = False
    attention: bool = False
    attn_scale: float = 0.1
    supports_text: bool = True
    supports_view: bool = True
    supports_depth: bool = True


class MockDenoiser(DenoiserBackend):
    kind = "mock"

    def __init__(self, spec: MockSpec | None = None):
        self.spec = spec or MockSpec()
        self.supports_text = self.spec.supports_text
        self.supports_view_condition = self.spec.supports_view
        self.supports_depth = self.spec.supports_depth
        self._pattern_cache: dict[tuple, torch.Tensor] = {}
        self._attn_cache: dict[tuple, torch.Tensor] = {}

    def _pattern(self, tag: bytes, cond: Condition,
                 shape: tuple[int, ...]) -> torch.Tensor:
        key = (tag, _condition_bytes(cond), shape)
        hit = self._pattern_cache.get(key)
        if hit is None:
            digest = hashlib.sha256(
                str(self.spec.seed).encode() + b"|" + tag + b"|" + key[1]
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            hit = torch.from_numpy(
                rng.standard_normal(shape).astype(np.float32))
            self._pattern_cache[key] = hit
        return hit

    def _attn_weight(self, name: str, dim: int) -> torch.Tensor:
        key = (name, dim)
        hit = self._attn_cache.get(key)
        if hit is None:
            digest = hashlib.sha256(
                f"{self.spec.seed}|attn|{name}|{dim}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            hit = torch.from_numpy(
                rng.standard_normal((dim, dim)).astype(np.float32)) / dim ** 0.5
            self._attn_cache[key] = hit
        return hit

    def _attention(self, h: torch.Tensor, t: int,
                   tap: AttentionTap | None) -> torch.Tensor:
        # Single-head self-attention over spatial tokens; weights depend on
        # the seed only, so parallel branches share them.
        c = h.shape[0]
        tokens = h.reshape(c, -1).T  # (HW, C)
        wq = self._attn_weight("q", c).to(h.dtype)
        wk = self._attn_weight("k", c).to(h.dtype)
        wv = self._attn_weight("v", c).to(h.dtype)
        q = tokens @ wq
        k = tokens @ wk
        v = tokens @ wv
        if tap is not None:
            k, v = tap.visit(0, t, k, v)
        attn = torch.softmax(q @ k.T / c ** 0.5, dim=-1) @ v
        return attn.T.reshape(h.shape)

    def predict_noise(self, x_t: torch.Tensor, condition: Condition, t: int,
                      noise: torch.Tensor | None = None,
                      tap: AttentionTap | None = None) -> torch.Tensor:
        if isinstance(condition, TextCondition) and condition.depth is not None \
                and not self.supports_depth:
            raise CapabilityError("mock configured without depth support")
        if self.spec.perfect:
            if noise is None:
                raise ValueError("perfect mock needs the true noise draw")
            return noise
        u = self._pattern(b"U", condition, tuple(x_t.shape)).to(x_t.dtype)
        b = self._pattern(b"B", condition, tuple(x_t.shape)).to(x_t.dtype)
        out = self.spec.gain * u * x_t + self.spec.bias * b
        if self.spec.attention and x_t.ndim == 3:
            out = out + self.spec.attn_scale * self._attention(out, t, tap)
        return out


class LocalModelBackend(DenoiserBackend):
    """Adapter over an in-process model callable(x_t, condition, t) -> eps.

    Calls run under no_grad; SDS gradients never touch model parameters.
    """

    kind = "local_model"

    def __init__(self, model, latent_shape: tuple[int, ...] = (),
                 input_size: int | None = None, supports_text: bool = True,
                 supports_view: bool = False, supports_depth: bool = False):
        self.model = model
        self.latent_shape = latent_shape
        self.input_size = input_size
        self.supports_text = supports_text
        self.supports_view_condition = supports_view
        self.supports_depth = supports_depth

    def predict_noise(self, x_t, condition, t, noise=None, tap=None):
        with torch.no_grad():
            return self.model(x_t, condition, t)


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()
                            ).decode("ascii")


def _from_b64(blob: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(blob)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _condition_json(condition: Condition) -> dict:
    if condition is None:
        return {"type": "uncond"}
    if isinstance(condition, TextCondition):
        out = {"type": "text", "prompt": condition.prompt}
        if condition.depth is not None:
            d = condition.depth.detach().cpu().numpy().astype("<f4")
            out["depth_shape"] = list(d.shape)
            out["depth_b64"] = _b64(d)
        return out
    if isinstance(condition, ViewCondition):
        ref = condition.reference.detach().cpu().numpy().astype("<f4")
        return {
            "type": "view",
            "reference_shape": list(ref.shape),
            "reference_b64": _b64(ref),
            "rotation": np.asarray(condition.rotation, dtype=float).reshape(3, 3).tolist(),
            "translation": np.asarray(condition.translation, dtype=float).reshape(3).tolist(),
        }
    raise TypeError(f"unknown condition type {type(condition).__name__}")


class RemoteBackend(DenoiserBackend):
    """HTTP client for a noise-prediction service.

    POST {endpoint}/predict_noise with a JSON body; three attempts with
    exponential backoff before giving up. Classifier-free guidance is
    composed client side, so each call carries cfg = 1.0.
    """

    kind = "remote"

    def __init__(self, endpoint: str, model: str = "sd",
                 latent_shape: tuple[int, ...] = (4, 64, 64),
                 input_size: int | None = None, timeout: float = 30.0,
                 retries: int = 3, backoff: float = 0.5,
                 supports_text: bool = True, supports_view: bool = False,
                 supports_depth: bool = False):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.latent_shape = latent_shape
        self.input_size = input_size
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.supports_text = supports_text
        self.supports_view_condition = supports_view
        self.supports_depth = supports_depth

    def predict_noise(self, x_t, condition, t, noise=None, tap=None):
        arr = x_t.detach().cpu().numpy().astype("<f4")
        body = {
            "model": self.model,
            "t": int(t),
            "cfg": 1.0,
            "shape": list(arr.shape),
            "input_b64": _b64(arr),
            "condition": _condition_json(condition),
        }
        last_error: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.endpoint + "/predict_noise",
                                     json=body, timeout=self.timeout)
                resp.raise_for_status()
                payload = resp.json()
                eps = _from_b64(payload["eps_b64"], tuple(arr.shape))
                return torch.from_numpy(eps).to(x_t.dtype)
            except (requests.RequestException, KeyError, ValueError) as err:
                last_error = err
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise BackendUnavailable(
            f"{self.endpoint} failed after {self.retries} attempts: {last_error}")


# ---------------------------------------------------------------------------
# SDS
# ---------------------------------------------------------------------------

def uniform_weight(t: int) -> float:
    return 1.0


def sigma_sq_weight(schedule: NoiseSchedule):
    def w(t: int) -> float:
        return float(1.0 - schedule.alpha_bar[t])
    return w


def sample_timestep(schedule: NoiseSchedule, t_range: tuple[float, float],
                    generator: torch.Generator | None = None) -> int:
    lo, hi = t_range
    if not (0.0 < lo < hi < 1.0):
        raise ValueError(f"t_range must satisfy 0 < lo < hi < 1, got {t_range}")
    u = lo + (hi - lo) * torch.rand((), generator=generator,
                                    dtype=torch.float64).item()
    return min(int(u * schedule.num_steps), schedule.num_steps - 1)


def _sds_grad(backend: DenoiserBackend, schedule: NoiseSchedule,
              x: torch.Tensor, condition: Condition, cfg: float,
              weight_fn, generator: torch.Generator | None,
              t_range: tuple[float, float]) -> torch.Tensor:
    weight_fn = weight_fn or uniform_weight
    t = sample_timestep(schedule, t_range, generator)
    with torch.no_grad():
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        x_t = schedule.add_noise(x.detach(), t, eps)
        eps_uncond = backend.predict_noise(x_t, None, t, noise=eps)
        if cfg == 0.0:
            eps_hat = eps_uncond
        else:
            eps_cond = backend.predict_noise(x_t, condition, t, noise=eps)
            eps_hat = eps_uncond + cfg * (eps_cond - eps_uncond)
        return weight_fn(t) * (eps_hat - eps)


def sds_grad_text(backend: DenoiserBackend, schedule: NoiseSchedule,
                  x: torch.Tensor, prompt: str, cfg: float = 50.0,
                  weight_fn=None, generator: torch.Generator | None = None,
                  t_range: tuple[float, float] = (0.02, 0.5),
                  depth: torch.Tensor | None = None) -> torch.Tensor:
    """Text-conditioned SDS gradient w.r.t. the rendered array x."""
    if not backend.supports_text:
        raise CapabilityError(f"{backend.kind} backend lacks text conditioning")
    if depth is not None and not backend.supports_depth:
        raise CapabilityError(f"{backend.kind} backend lacks depth conditioning")
    condition = TextCondition(prompt=prompt, depth=depth)
    return _sds_grad(backend, schedule, x, condition, cfg, weight_fn,
                     generator, t_range)


def sds_grad_view(backend: DenoiserBackend, schedule: NoiseSchedule,
                  x: torch.Tensor, reference: torch.Tensor,
                  rotation: np.ndarray, translation: np.ndarray,
                  cfg: float = 5.0, weight_fn=None,
                  generator: torch.Generator | None = None,
                  t_range: tuple[float, float] = (0.2, 0.6)) -> torch.Tensor:
    """View-conditioned SDS gradient w.r.t. the rendered array x."""
    if not backend.supports_view_condition:
        raise CapabilityError(f"{backend.kind} backend lacks view conditioning")
    condition = ViewCondition(reference=reference, rotation=rotation,
                              translation=translation)
    return _sds_grad(backend, schedule, x, condition, cfg, weight_fn,
                     generator, t_range)


def sds_surrogate_loss(x: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Scalar whose gradient w.r.t. x is exactly `grad`."""
    target = (x - grad).detach()
    return 0.5 * ((x - target) ** 2).sum()


def fit_backend_input(backend: DenoiserBackend,
                      image_chw: torch.Tensor) -> torch.Tensor:
    """Bilinearly resize (C, H, W) to the backend's declared square size."""
    size = backend.input_size
    if size is None or image_chw.shape[-2:] == (size, size):
        return image_chw
    return torch.nn.functional.interpolate(
        image_chw[None], size=(size, size), mode="bilinear",
        align_corners=False)[0]
