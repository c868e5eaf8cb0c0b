"""Multiresolution hash-grid field with a tiny MLP head.

One field instance serves both roles in the pipeline: density + color for
the coarse volumetric stage, and color only when used as a texture field
over a fixed mesh. Densities come from a softplus, colors from a sigmoid,
so sigma >= 0 and rgb in [0, 1] by construction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

# Spatial hash primes; the first is 1 so the x coordinate passes through.
PRIMES = (1, 2654435761, 805459861)

FIELD_MAGIC = b"CTXF"
FIELD_VERSION = 1

_CORNER_OFFSETS = torch.tensor(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
    dtype=torch.int64,
)


@dataclass
class HashGridConfig:
    n_levels: int = 16
    n_features_per_level: int = 2
    log2_hashmap_size: int = 19
    base_resolution: int = 16
    max_resolution: int = 4096
    mlp_hidden: int = 64
    mlp_layers: int = 2  # hidden layers
    bound: float = 1.0  # field lives in [-bound, bound]^3
    density_blob_scale: float = 0.0
    density_blob_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")
        if self.bound <= 0:
            raise ValueError("bound must be positive")

    @property
    def growth_factor(self) -> float:
        if self.n_levels == 1:
            return 1.0
        return math.exp((math.log(self.max_resolution)
                         - math.log(self.base_resolution))
                        / (self.n_levels - 1))

    @property
    def level_resolutions(self) -> list[int]:
        b = self.growth_factor
        return [int(round(self.base_resolution * b ** l))
                for l in range(self.n_levels)]

    @property
    def table_size(self) -> int:
        return 1 << self.log2_hashmap_size


def _hash_corners(corners: torch.Tensor, log2_size: int) -> torch.Tensor:
    """XOR-of-primes spatial hash of integer corner coords (..., 3)."""
    c = corners.long()
    h = c[..., 0] * PRIMES[0] ^ c[..., 1] * PRIMES[1] ^ c[..., 2] * PRIMES[2]
    return h & ((1 << log2_size) - 1)


class FieldParams(nn.Module):
    """Hash tables plus MLP head; construction is deterministic in the seed."""

    def __init__(self, config: HashGridConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        tables = torch.empty(config.n_levels, config.table_size,
                             config.n_features_per_level)
        tables.uniform_(-1e-4, 1e-4, generator=gen)
        self.tables = nn.Parameter(tables)

        in_dim = config.n_levels * config.n_features_per_level
        dims = [in_dim] + [config.mlp_hidden] * config.mlp_layers + [4]
        layers: list[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(nn.ReLU(inplace=True))
        self.mlp = nn.Sequential(*layers)
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.data.uniform_(-bound, bound, generator=gen)
                m.bias.data.uniform_(-bound, bound, generator=gen)

        res = torch.tensor(config.level_resolutions, dtype=torch.float32)
        self.register_buffer("level_res", res, persistent=False)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Hash-grid features for points x (N, 3), trilinearly interpolated."""
        cfg = self.config
        u = (x / cfg.bound + 1.0) * 0.5
        u = u.clamp(0.0, 1.0)
        pos = u[:, None, :] * self.level_res[None, :, None]  # (N, L, 3)
        c0 = torch.floor(pos)
        frac = pos - c0
        # per-axis hashes and weights, combined by broadcast; avoids
        # materializing the (N, L, 8, 3) corner tensor
        base = c0.long()
        mask = (1 << cfg.log2_hashmap_size) - 1
        hx0 = base[:, :, 0] * PRIMES[0]
        hy0 = base[:, :, 1] * PRIMES[1]
        hz0 = base[:, :, 2] * PRIMES[2]
        hx = torch.stack((hx0, hx0 + PRIMES[0]), dim=-1)  # (N, L, 2)
        hy = torch.stack((hy0, hy0 + PRIMES[1]), dim=-1)
        hz = torch.stack((hz0, hz0 + PRIMES[2]), dim=-1)
        idx = ((hx[:, :, :, None, None] ^ hy[:, :, None, :, None]
                ^ hz[:, :, None, None, :]) & mask).reshape(
            x.shape[0], cfg.n_levels, 8)
        lidx = torch.arange(cfg.n_levels, device=x.device)[None, :, None]
        feats = self.tables[lidx, idx]  # (N, L, 8, F)
        fx, fy, fz = frac[:, :, 0], frac[:, :, 1], frac[:, :, 2]
        wx = torch.stack((1.0 - fx, fx), dim=-1)  # (N, L, 2)
        wy = torch.stack((1.0 - fy, fy), dim=-1)
        wz = torch.stack((1.0 - fz, fz), dim=-1)
        w = (wx[:, :, :, None, None] * wy[:, :, None, :, None]
             * wz[:, :, None, None, :]).reshape(x.shape[0], cfg.n_levels, 8)
        out = (feats * w[..., None]).sum(dim=2)
        return out.reshape(x.shape[0], -1)

    def raw_output(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.encode(x))

    def density_bias(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-activation gaussian blob so an untrained field is a solid ball."""
        cfg = self.config
        if cfg.density_blob_scale == 0.0:
            return torch.zeros(x.shape[0], device=x.device, dtype=x.dtype)
        r2 = (x * x).sum(dim=-1)
        return cfg.density_blob_scale * torch.exp(
            -r2 / (2.0 * cfg.density_blob_std ** 2))


def query_density_color(field: FieldParams, x: torch.Tensor,
                        ) -> tuple[torch.Tensor, torch.Tensor]:
    """Density (N,) and color (N, 3) at world points x (N, 3)."""
    raw = field.raw_output(x)
    sigma = torch.nn.functional.softplus(raw[:, 0] + field.density_bias(x))
    rgb = torch.sigmoid(raw[:, 1:4])
    return sigma, rgb


def query_texture(field: FieldParams, x: torch.Tensor) -> torch.Tensor:
    """Color only; used when the field textures a fixed mesh surface."""
    return torch.sigmoid(field.raw_output(x)[:, 1:4])


def density_gradient_normal(field: FieldParams, x: torch.Tensor,
                            create_graph: bool = False) -> torch.Tensor:
    """Unit surface normal as the negative normalized density gradient."""
    needs_grad = x.requires_grad
    x = x if needs_grad else x.detach().requires_grad_(True)
    with torch.enable_grad():
        sigma, _ = query_density_color(field, x)
        grad = torch.autograd.grad(sigma.sum(), x, create_graph=create_graph)[0]
    n = -grad
    return n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)


# ---------------------------------------------------------------------------
# Checkpoint format: magic "CTXF", u32 version, u32 json config length, the
# config as JSON, u64 parameter count, then the parameters as little-endian
# f32 in state_dict order.
# ---------------------------------------------------------------------------

def _config_json(config: HashGridConfig) -> bytes:
    return json.dumps(asdict(config), sort_keys=True).encode("utf-8")


def save_field(path: str | Path, field: FieldParams) -> None:
    cfg_blob = _config_json(field.config)
    flat = torch.cat([p.detach().cpu().float().reshape(-1)
                      for p in field.state_dict().values()])
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack("<II", FIELD_VERSION, len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<Q", flat.numel()))
        f.write(flat.numpy().astype("<f4").tobytes())


def load_field(path: str | Path) -> FieldParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FIELD_MAGIC:
            raise ValueError(f"bad field checkpoint magic {magic!r}")
        version, cfg_len = struct.unpack("<II", f.read(8))
        if version != FIELD_VERSION:
            raise ValueError(f"unsupported field checkpoint version {version}")
        config = HashGridConfig(**json.loads(f.read(cfg_len)))
        (count,) = struct.unpack("<Q", f.read(8))
        data = f.read(4 * count)
        if len(data) != 4 * count:
            raise ValueError("field checkpoint is truncated")
    flat = torch.frombuffer(bytearray(data), dtype=torch.float32)
    field = FieldParams(config)
    expected = sum(v.numel() for v in field.state_dict().values())
    if count != expected:
        raise ValueError(
            f"parameter count mismatch: file has {count}, config needs {expected}")
    state = {}
    off = 0
    for key, value in field.state_dict().items():
        n = value.numel()
        state[key] = flat[off:off + n].reshape(value.shape).clone()
        off += n
    field.load_state_dict(state)
    return field
