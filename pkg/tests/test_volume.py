import math

import pytest
import torch

from humanlift.field import FieldParams, HashGridConfig
from humanlift.scene import Camera
from humanlift.volume import RayMarchConfig, render, render_rays


def slab_field(sigma=4.0, z0=0.5, z1=1.0, color=(0.8, 0.3, 0.1)):
    """Constant density between two z planes, empty elsewhere."""
    def fn(pts):
        inside = (pts[:, 2] >= z0) & (pts[:, 2] < z1)
        s = torch.where(inside, torch.as_tensor(sigma, dtype=pts.dtype), 0.0)
        c = torch.tensor(color, dtype=pts.dtype).expand(pts.shape[0], 3)
        return s, c.contiguous()
    return fn


def z_rays(n=1, dtype=torch.float64):
    origins = torch.zeros(n, 3, dtype=dtype)
    dirs = torch.zeros(n, 3, dtype=dtype)
    dirs[:, 2] = 1.0
    return origins, dirs


class TestSlab:
    def test_alpha_matches_closed_form(self):
        # Bins of width 2/512 align with the slab edges, so midpoint
        # quadrature integrates the piecewise-constant density exactly.
        o, d = z_rays()
        cfg = RayMarchConfig(n_samples=512)
        out = render_rays(slab_field(), o, d, near=0.0, far=2.0, config=cfg)
        expected = 1.0 - math.exp(-4.0 * 0.5)
        assert out["alpha"].item() == pytest.approx(expected, abs=1e-7)

    def test_doubling_samples_is_stable(self):
        o, d = z_rays()
        a = render_rays(slab_field(), o, d, 0.0, 2.0,
                        RayMarchConfig(n_samples=512))["alpha"].item()
        b = render_rays(slab_field(), o, d, 0.0, 2.0,
                        RayMarchConfig(n_samples=1024))["alpha"].item()
        assert abs(a - b) < 1e-7

    def test_rgb_composites_over_white(self):
        o, d = z_rays()
        out = render_rays(slab_field(), o, d, 0.0, 2.0,
                          RayMarchConfig(n_samples=512))
        alpha = 1.0 - math.exp(-2.0)
        for ch, c in enumerate((0.8, 0.3, 0.1)):
            expected = c * alpha + (1.0 - alpha)
            assert out["rgb"][0, ch].item() == pytest.approx(expected, abs=1e-7)

    def test_expected_depth(self):
        # Continuous answer: int sigma e^{-sigma u} (u + z0) du / alpha.
        o, d = z_rays()
        out = render_rays(slab_field(), o, d, 0.0, 2.0,
                          RayMarchConfig(n_samples=512))
        s, z0, z1 = 4.0, 0.5, 1.0
        alpha = 1.0 - math.exp(-s * (z1 - z0))
        num = z0 - z1 * math.exp(-s * (z1 - z0)) + (1 / s) * alpha
        assert out["depth"].item() == pytest.approx(num / alpha, abs=1e-4)


class TestBackground:
    def test_empty_field_renders_white(self):
        def empty(pts):
            return torch.zeros(pts.shape[0], dtype=pts.dtype), \
                torch.zeros(pts.shape[0], 3, dtype=pts.dtype)
        o, d = z_rays(4)
        out = render_rays(empty, o, d, 0.0, 2.0, RayMarchConfig(n_samples=64))
        assert torch.all(out["rgb"] == 1.0)
        assert torch.all(out["alpha"] == 0.0)
        assert torch.all(out["depth"] == 0.0)

    def test_background_toggle(self):
        def empty(pts):
            return torch.zeros(pts.shape[0], dtype=pts.dtype), \
                torch.zeros(pts.shape[0], 3, dtype=pts.dtype)
        o, d = z_rays(1)
        out = render_rays(empty, o, d, 0.0, 2.0,
                          RayMarchConfig(n_samples=16, white_background=False))
        assert torch.all(out["rgb"] == 0.0)


class TestWall:
    def test_opaque_wall_depth_and_color(self):
        wall = slab_field(sigma=1e4, z0=1.0, z1=2.0, color=(0.2, 0.9, 0.4))
        o, d = z_rays()
        cfg = RayMarchConfig(n_samples=512)
        out = render_rays(wall, o, d, 0.0, 2.0, cfg)
        delta = 2.0 / 512
        assert out["alpha"].item() == pytest.approx(1.0, abs=1e-6)
        assert out["depth"].item() == pytest.approx(1.0 + 0.5 * delta, abs=delta)
        assert torch.allclose(out["rgb"][0],
                              torch.tensor([0.2, 0.9, 0.4], dtype=torch.float64),
                              atol=1e-6)


class TestMechanics:
    def test_alpha_bounded(self):
        rng_field = slab_field(sigma=50.0)
        o, d = z_rays(8)
        out = render_rays(rng_field, o, d, 0.0, 2.0, RayMarchConfig(n_samples=32))
        assert (out["alpha"] >= 0).all() and (out["alpha"] <= 1 + 1e-8).all()

    def test_chunking_invariance(self):
        o = torch.rand(37, 3, dtype=torch.float64) * 0.1
        d = torch.zeros(37, 3, dtype=torch.float64)
        d[:, 2] = 1.0
        a = render_rays(slab_field(), o, d, 0.0, 2.0,
                        RayMarchConfig(n_samples=64, chunk=7))
        b = render_rays(slab_field(), o, d, 0.0, 2.0,
                        RayMarchConfig(n_samples=64, chunk=10_000))
        for key in a:
            assert torch.allclose(a[key], b[key], atol=1e-12)

    def test_perturb_seeded_and_reproducible(self):
        def smooth(pts):
            s = 4.0 * torch.exp(-(pts[:, 2] - 0.7) ** 2 / 0.02)
            return s, torch.full((pts.shape[0], 3), 0.5, dtype=pts.dtype)

        o, d = z_rays(5)
        cfg = RayMarchConfig(n_samples=64, perturb=True)
        g1 = torch.Generator().manual_seed(3)
        g2 = torch.Generator().manual_seed(3)
        a = render_rays(smooth, o, d, 0.0, 2.0, cfg, generator=g1)
        b = render_rays(smooth, o, d, 0.0, 2.0, cfg, generator=g2)
        assert torch.equal(a["rgb"], b["rgb"])
        c = render_rays(smooth, o, d, 0.0, 2.0,
                        RayMarchConfig(n_samples=64, perturb=False))
        assert not torch.equal(a["alpha"], c["alpha"])

    def test_near_far_validation(self):
        o, d = z_rays(1)
        with pytest.raises(ValueError):
            render_rays(slab_field(), o, d, 2.0, 1.0, RayMarchConfig())
        with pytest.raises(ValueError):
            RayMarchConfig(near=3.0, far=2.0)

    def test_gradients_reach_field(self):
        cfg = HashGridConfig(n_levels=4, log2_hashmap_size=10,
                             max_resolution=64, mlp_hidden=16,
                             density_blob_scale=5.0, density_blob_std=0.3)
        field = FieldParams(cfg)
        cam = Camera.from_orbit(0.0, 0.0, 3.8, 20.0, (4, 4))
        out = render(field, cam, RayMarchConfig(n_samples=16))
        out["rgb"].sum().backward()
        assert field.tables.grad is not None
        assert field.tables.grad.abs().sum() > 0


class TestCameraRender:
    def test_blob_silhouette_depth_and_normals(self):
        def blob(pts):
            r2 = (pts * pts).sum(dim=-1)
            s = 10.0 * torch.exp(-r2 / (2 * 0.15 ** 2))
            return s, torch.full((pts.shape[0], 3), 0.5, dtype=pts.dtype)

        cam = Camera.from_orbit(0.0, 0.0, 3.8, 20.0, (33, 33))
        out = render(blob, cam,
                     RayMarchConfig(n_samples=96, render_normals=True))
        assert out["rgb"].shape == (33, 33, 3)
        center_alpha = out["alpha"][16, 16].item()
        assert center_alpha > 0.9
        assert out["alpha"][0, 0].item() < 0.02
        depth = out["depth"][16, 16].item()
        assert 3.0 < depth < 3.9
        n = out["normal"][16, 16]
        n = n / n.norm()
        assert n[2].item() > 0.9  # front surface faces the +z camera
        # Background pixels keep designated values.
        assert out["depth"][0, 0].item() == 0.0
        assert torch.allclose(out["rgb"][0, 0], torch.ones(3), atol=1e-3)
