"""Tetrahedral grids, differentiable surface extraction, and a deterministic
software rasterizer.

Surface extraction follows the marching-tetrahedra construction over a
Freudenthal (6 tets per cube) grid. Crossing vertices are deduplicated per
grid edge so extracted surfaces are watertight, and their positions are
differentiable with respect to the per-vertex scalar field and the vertex
deformation.

The rasterizer is pure torch: per-face bounding-box candidates, a sort-based
z-buffer (lowest depth wins, ties broken by lowest face id), perspective-
correct barycentrics, and a one-pixel soft silhouette band. Identical inputs
produce identical fragments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .scene import Camera

# Deformation is capped at this fraction of the grid spacing so cells can
# never invert.
DEFORM_LIMIT = 0.45

_TET_PERMS = (
    (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0),
)


@dataclass
class TetGrid:
    """Vertices (V, 3) and tetrahedra (T, 4) covering [-bound, bound]^3."""

    vertices: torch.Tensor
    tets: torch.Tensor
    resolution: int
    bound: float = 1.0

    @property
    def spacing(self) -> float:
        return 2.0 * self.bound / self.resolution

    @staticmethod
    def cube_grid(resolution: int, bound: float = 1.0) -> "TetGrid":
        """Uniform grid, each cube split into 6 tets along its main diagonal.

        The same split orientation is used in every cube, which keeps the
        triangulation face-consistent across cube boundaries.
        """
        if resolution < 1:
            raise ValueError("resolution must be >= 1")
        n = resolution + 1
        r = torch.arange(n, dtype=torch.float32)
        coords = torch.stack(torch.meshgrid(r, r, r, indexing="ij"), dim=-1)
        vertices = coords.reshape(-1, 3) / resolution * (2 * bound) - bound

        def vid(ix, iy, iz):
            return (ix * n + iy) * n + iz

        c = torch.arange(resolution, dtype=torch.int64)
        cx, cy, cz = torch.meshgrid(c, c, c, indexing="ij")
        cx, cy, cz = cx.reshape(-1), cy.reshape(-1), cz.reshape(-1)
        base = torch.stack([cx, cy, cz], dim=-1)  # (C, 3)
        tets = []
        for perm in _TET_PERMS:
            steps = torch.zeros(4, 3, dtype=torch.int64)
            for k, axis in enumerate(perm):
                steps[k + 1] = steps[k]
                steps[k + 1, axis] += 1
            corners = base[:, None, :] + steps[None]  # (C, 4, 3)
            tets.append(vid(corners[..., 0], corners[..., 1], corners[..., 2]))
        return TetGrid(vertices=vertices, tets=torch.cat(tets, dim=0),
                       resolution=resolution, bound=bound)


@dataclass
class TriMesh:
    """Triangle mesh; faces are wound so normals point out of the surface."""

    vertices: torch.Tensor  # (V, 3) float
    faces: torch.Tensor     # (F, 3) int64

    def __post_init__(self):
        if self.faces.numel() and self.faces.max() >= self.vertices.shape[0]:
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def face_normals(self, normalize: bool = True) -> torch.Tensor:
        v = self.vertices
        f = self.faces
        n = torch.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]], dim=-1)
        if normalize:
            # soft normalization: near-zero-area faces from marching tets
            # get a ~zero normal with a bounded gradient instead of a NaN
            denom = torch.sqrt(n.pow(2).sum(dim=-1, keepdim=True) + 1e-16)
            n = n / denom
        return n

    def vertex_normals(self) -> torch.Tensor:
        # Area-weighted average of incident face normals.
        raw = self.face_normals(normalize=False)
        out = torch.zeros_like(self.vertices)
        for k in range(3):
            out.index_add_(0, self.faces[:, k], raw)
        denom = torch.sqrt(out.pow(2).sum(dim=-1, keepdim=True) + 1e-16)
        return out / denom

    def edge_face_counts(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Unique undirected edges and the number of faces touching each."""
        f = self.faces
        e = torch.cat([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], dim=0)
        e, _ = torch.sort(e, dim=1)
        key = e[:, 0] * self.n_vertices + e[:, 1]
        uniq, counts = torch.unique(key, return_counts=True)
        edges = torch.stack([uniq // self.n_vertices, uniq % self.n_vertices], dim=1)
        return edges, counts

    def is_watertight(self) -> bool:
        if self.n_faces == 0:
            return False
        _, counts = self.edge_face_counts()
        return bool((counts == 2).all())

    def euler_characteristic(self) -> int:
        edges, _ = self.edge_face_counts()
        used = torch.unique(self.faces)
        return int(used.numel()) - int(edges.shape[0]) + self.n_faces


def mesh_uniform_laplacian(mesh: TriMesh) -> torch.Tensor:
    """Mean neighbor position minus the vertex, per vertex (V, 3)."""
    edges, _ = mesh.edge_face_counts()
    v = mesh.vertices
    nbr_sum = torch.zeros_like(v)
    deg = torch.zeros(mesh.n_vertices, dtype=v.dtype, device=v.device)
    ones = torch.ones(edges.shape[0], dtype=v.dtype, device=v.device)
    nbr_sum.index_add_(0, edges[:, 0], v[edges[:, 1]])
    nbr_sum.index_add_(0, edges[:, 1], v[edges[:, 0]])
    deg.index_add_(0, edges[:, 0], ones)
    deg.index_add_(0, edges[:, 1], ones)
    lap = nbr_sum / deg.clamp_min(1.0)[:, None] - v
    return torch.where(deg[:, None] > 0, lap, torch.zeros_like(lap))


def laplacian_magnitude(mesh: TriMesh) -> torch.Tensor:
    """Mean out-of-plane component of the uniform Laplacian.

    Projecting onto vertex normals makes flat meshes (boundaries included)
    score exactly zero; curvature is what remains.
    """
    lap = mesh_uniform_laplacian(mesh)
    normals = mesh.vertex_normals()
    return (lap * normals).sum(dim=-1).abs().mean()


def normal_consistency(mesh: TriMesh) -> torch.Tensor:
    """Mean (1 - cos) between normals of face pairs sharing an edge."""
    f = mesh.faces
    e = torch.cat([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], dim=0)
    e, _ = torch.sort(e, dim=1)
    key = e[:, 0] * mesh.n_vertices + e[:, 1]
    face_ids = torch.arange(mesh.n_faces, device=f.device).repeat(3)
    order = torch.argsort(key, stable=True)
    key_sorted = key[order]
    face_sorted = face_ids[order]
    same = key_sorted[1:] == key_sorted[:-1]
    if not same.any():
        return mesh.vertices.sum() * 0.0
    fa = face_sorted[:-1][same]
    fb = face_sorted[1:][same]
    n = mesh.face_normals()
    cos = (n[fa] * n[fb]).sum(dim=-1)
    return (1.0 - cos).mean()


def init_sdf_from_density(field, grid: TetGrid, tau: float = 1.0,
                          chunk: int = 200_000) -> torch.Tensor:
    """Signed scalar per grid vertex: density minus the iso threshold.

    Positive values are inside the surface.
    """
    from .volume import _field_query
    vals = []
    with torch.no_grad():
        for start in range(0, grid.vertices.shape[0], chunk):
            pts = grid.vertices[start:start + chunk]
            sigma, _ = _field_query(field, pts)
            vals.append(sigma - tau)
    return torch.cat(vals)


def marching_tets(grid: TetGrid, sdf: torch.Tensor,
                  deform: torch.Tensor | None = None) -> TriMesh:
    """Extract the sdf=0 surface; differentiable w.r.t. sdf and deform.

    deform holds unconstrained per-vertex offsets; they are squashed with
    tanh and scaled to DEFORM_LIMIT times the grid spacing.
    """
    if sdf.shape[0] != grid.vertices.shape[0]:
        raise ValueError("sdf must have one value per grid vertex")
    verts = grid.vertices.to(sdf.dtype)
    if deform is not None:
        verts = verts + DEFORM_LIMIT * grid.spacing * torch.tanh(deform)

    occ = sdf > 0
    tet_occ = occ[grid.tets]  # (T, 4)
    n_pos = tet_occ.sum(dim=1)
    active = (n_pos > 0) & (n_pos < 4)
    tets = grid.tets[active]
    t_occ = tet_occ[active]
    t_pos = n_pos[active]
    if tets.shape[0] == 0:
        return TriMesh(vertices=verts.new_zeros(0, 3),
                       faces=torch.zeros(0, 3, dtype=torch.int64))

    # Unique crossing edges over all active tets.
    pairs = torch.tensor([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
    ea = tets[:, pairs[:, 0]]  # (T, 6) grid vertex ids
    eb = tets[:, pairs[:, 1]]
    crossing = occ[ea] != occ[eb]
    lo = torch.minimum(ea, eb)[crossing]
    hi = torch.maximum(ea, eb)[crossing]
    keys = lo * grid.vertices.shape[0] + hi
    uniq_keys = torch.unique(keys)
    ua = uniq_keys // grid.vertices.shape[0]
    ub = uniq_keys % grid.vertices.shape[0]

    sa, sb = sdf[ua], sdf[ub]
    t = sa / (sa - sb)  # signs differ, denominator never 0
    new_verts = verts[ua] + t[:, None] * (verts[ub] - verts[ua])

    def edge_index(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        k = torch.minimum(a, b) * grid.vertices.shape[0] + torch.maximum(a, b)
        return torch.searchsorted(uniq_keys, k)

    faces = []
    face_dirs = []  # direction from positive side toward negative side

    # One vertex separated from the other three: a single triangle.
    for lone_positive in (True, False):
        lone_count = 1 if lone_positive else 3
        sel = t_pos == lone_count
        if not sel.any():
            continue
        tt = tets[sel]
        oo = t_occ[sel]
        lone = (oo if lone_positive else ~oo).float().argmax(dim=1)
        rows = torch.arange(tt.shape[0])
        lid = tt[rows, lone]
        others = torch.stack(
            [tt[rows, (lone + k) % 4] for k in (1, 2, 3)], dim=1)
        tri = torch.stack([edge_index(lid, others[:, k]) for k in range(3)],
                          dim=1)
        faces.append(tri)
        tri_c = new_verts[tri].mean(dim=1)
        lone_v = verts[lid]
        d = (tri_c - lone_v) if lone_positive else (lone_v - tri_c)
        face_dirs.append(d)

    # Two against two: a quad split into two triangles.
    sel = t_pos == 2
    if sel.any():
        tt = tets[sel]
        oo = t_occ[sel]
        order = torch.argsort((~oo).long(), dim=1, stable=True)
        rows = torch.arange(tt.shape[0])[:, None]
        sorted_ids = tt[rows, order]
        p0, p1 = sorted_ids[:, 0], sorted_ids[:, 1]  # positive pair
        q0, q1 = sorted_ids[:, 2], sorted_ids[:, 3]  # negative pair
        # Cycle p0q0 -> p0q1 -> p1q1 -> p1q0 walks around the quad.
        e00 = edge_index(p0, q0)
        e01 = edge_index(p0, q1)
        e11 = edge_index(p1, q1)
        e10 = edge_index(p1, q0)
        tri1 = torch.stack([e00, e01, e11], dim=1)
        tri2 = torch.stack([e00, e11, e10], dim=1)
        d = 0.5 * (verts[q0] + verts[q1]) - 0.5 * (verts[p0] + verts[p1])
        faces.extend([tri1, tri2])
        face_dirs.extend([d, d])

    faces_t = torch.cat(faces, dim=0)
    dirs_t = torch.cat(face_dirs, dim=0)
    v0 = new_verts[faces_t[:, 0]]
    n = torch.cross(new_verts[faces_t[:, 1]] - v0,
                    new_verts[faces_t[:, 2]] - v0, dim=-1)
    flip = (n * dirs_t).sum(dim=-1) < 0
    flipped = faces_t[flip][:, [0, 2, 1]]
    faces_t = faces_t.clone()
    faces_t[flip] = flipped
    return TriMesh(vertices=new_verts, faces=faces_t)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

@dataclass
class RasterFragment:
    """Per-pixel rasterizer outputs for one view.

    face_id: (H, W) int64, -1 on background.
    bary: (H, W, 3) perspective-correct barycentrics of the hit face.
    depth: (H, W) distance along -z in camera space, 0 on background.
    alpha: (H, W) soft silhouette, 1 inside, 0 outside, graded in a
        one-pixel band around the outline.
    """

    face_id: torch.Tensor
    bary: torch.Tensor
    depth: torch.Tensor
    alpha: torch.Tensor

    @property
    def covered(self) -> torch.Tensor:
        return self.face_id >= 0


def _project_vertices(mesh: TriMesh, camera: Camera):
    rot = torch.from_numpy(camera.rotation).to(mesh.vertices.dtype)
    tr = torch.from_numpy(camera.translation).to(mesh.vertices.dtype)
    cam = mesh.vertices @ rot.T + tr
    depth = -cam[:, 2]
    f = camera.focal_px
    px = f * cam[:, 0] / depth + 0.5 * camera.width
    py = -f * cam[:, 1] / depth + 0.5 * camera.height
    return px, py, depth


def rasterize(mesh: TriMesh, camera: Camera, band_px: float = 1.0,
              ) -> RasterFragment:
    """Rasterize a mesh; differentiable through bary, depth, and alpha.

    Faces with any vertex at or behind the camera plane are dropped (no
    clipping; the subject is assumed in front of the camera). The alpha
    band uses per-face signed edge distance, summed over faces and
    clamped, which is exact along silhouette edges and slightly generous
    at convex corners.
    """
    h, w = camera.height, camera.width
    dev = mesh.vertices.device
    dt = mesh.vertices.dtype
    empty = RasterFragment(
        face_id=torch.full((h, w), -1, dtype=torch.int64, device=dev),
        bary=torch.zeros(h, w, 3, dtype=dt, device=dev),
        depth=torch.zeros(h, w, dtype=dt, device=dev),
        alpha=torch.zeros(h, w, dtype=dt, device=dev),
    )
    if mesh.n_faces == 0:
        return empty

    px, py, depth = _project_vertices(mesh, camera)
    f = mesh.faces
    front = (depth[f] > 1e-6).all(dim=1)
    face_ids_all = torch.arange(mesh.n_faces, device=dev)[front]
    if face_ids_all.numel() == 0:
        return empty
    fx = px[f[front]]  # (F, 3)
    fy = py[f[front]]
    fd = depth[f[front]]

    pad = 0.5 + band_px
    x0 = torch.clamp((fx.min(dim=1).values - pad).floor().long(), 0, w - 1)
    x1 = torch.clamp((fx.max(dim=1).values + pad).ceil().long(), 0, w - 1)
    y0 = torch.clamp((fy.min(dim=1).values - pad).floor().long(), 0, h - 1)
    y1 = torch.clamp((fy.max(dim=1).values + pad).ceil().long(), 0, h - 1)
    inb = (fx.max(dim=1).values >= -pad) & (fx.min(dim=1).values <= w - 1 + pad) \
        & (fy.max(dim=1).values >= -pad) & (fy.min(dim=1).values <= h - 1 + pad)
    x0, x1, y0, y1 = x0[inb], x1[inb], y0[inb], y1[inb]
    keep = face_ids_all[inb]
    fx, fy, fd = fx[inb], fy[inb], fd[inb]
    if keep.numel() == 0:
        return empty

    bw = (x1 - x0 + 1)
    bh = (y1 - y0 + 1)
    areas = bw * bh
    total = int(areas.sum())
    slot = torch.repeat_interleave(torch.arange(keep.numel(), device=dev), areas)
    offs = torch.arange(total, device=dev) - torch.repeat_interleave(
        torch.cumsum(areas, 0) - areas, areas)
    cand_col = x0[slot] + offs % bw[slot]
    cand_row = y0[slot] + offs // bw[slot]
    cx = cand_col.to(dt) + 0.5
    cy = cand_row.to(dt) + 0.5

    ax, ay = fx[slot, 0], fy[slot, 0]
    bx, by = fx[slot, 1], fy[slot, 1]
    gx, gy = fx[slot, 2], fy[slot, 2]
    area2 = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
    e0 = (bx - cx) * (gy - cy) - (by - cy) * (gx - cx)
    e1 = (gx - cx) * (ay - cy) - (gy - cy) * (ax - cx)
    e2 = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    nz = area2.abs() > 1e-12
    safe_area = torch.where(nz, area2, torch.ones_like(area2))
    b2 = torch.stack([e0, e1, e2], dim=1) / safe_area[:, None]

    # Signed pixel distance to the triangle boundary, positive inside.
    sign = torch.sign(safe_area)
    # sqrt(x^2 + y^2 + eps), not hypot: hypot's backward is 0/0 = nan on
    # zero-length projected edges, which degenerate faces do produce.
    len0 = torch.sqrt((gx - bx) ** 2 + (gy - by) ** 2 + 1e-24)
    len1 = torch.sqrt((ax - gx) ** 2 + (ay - gy) ** 2 + 1e-24)
    len2 = torch.sqrt((bx - ax) ** 2 + (by - ay) ** 2 + 1e-24)
    sd = torch.minimum(torch.minimum(e0 * sign / len0, e1 * sign / len1),
                       e2 * sign / len2)
    alpha_cand = torch.where(nz, (sd + 0.5).clamp(0.0, 1.0),
                             torch.zeros_like(sd))

    pix = cand_row * w + cand_col
    alpha_flat = torch.zeros(h * w, dtype=dt, device=dev)
    alpha_flat.index_add_(0, pix, alpha_cand)
    alpha = alpha_flat.clamp(0.0, 1.0).reshape(h, w)

    inside = nz & (b2 >= 0).all(dim=1)
    if not inside.any():
        frag = empty
        return RasterFragment(face_id=frag.face_id, bary=frag.bary,
                              depth=frag.depth, alpha=alpha)
    slot_in = slot[inside]
    pix_in = pix[inside]
    b2_in = b2[inside]
    d_in = fd[slot_in]  # (C, 3)
    inv = b2_in / d_in
    b3 = inv / inv.sum(dim=1, keepdim=True)
    depth_in = (b3 * d_in).sum(dim=1)
    face_in = keep[slot_in]

    # Deterministic z-buffer: sort by (pixel, depth, face id), keep first.
    order = np.lexsort((face_in.detach().cpu().numpy(),
                        depth_in.detach().cpu().numpy(),
                        pix_in.cpu().numpy()))
    order = torch.from_numpy(order)
    pix_sorted = pix_in[order]
    first = torch.ones_like(pix_sorted, dtype=torch.bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    face_flat = torch.full((h * w,), -1, dtype=torch.int64, device=dev)
    bary_flat = torch.zeros(h * w, 3, dtype=dt, device=dev)
    depth_flat = torch.zeros(h * w, dtype=dt, device=dev)
    face_flat[pix_in[win]] = face_in[win]
    bary_flat[pix_in[win]] = b3[win]
    depth_flat[pix_in[win]] = depth_in[win]
    return RasterFragment(face_id=face_flat.reshape(h, w),
                          bary=bary_flat.reshape(h, w, 3),
                          depth=depth_flat.reshape(h, w),
                          alpha=alpha)


def interpolate_attribute(fragment: RasterFragment, mesh: TriMesh,
                          values: torch.Tensor) -> torch.Tensor:
    """Barycentric interpolation of per-vertex values (V, C) -> (H, W, C)."""
    if values.ndim == 1:
        values = values[:, None]
    h, w = fragment.face_id.shape
    out = torch.zeros(h, w, values.shape[1], dtype=values.dtype,
                      device=values.device)
    covered = fragment.covered
    if covered.any():
        faces = mesh.faces[fragment.face_id[covered]]  # (N, 3)
        vals = values[faces]  # (N, 3, C)
        bary = fragment.bary[covered].to(values.dtype)
        out[covered] = (bary[..., None] * vals).sum(dim=1)
    return out


def pixel_positions(fragment: RasterFragment, mesh: TriMesh) -> torch.Tensor:
    """World-space surface position per covered pixel (H, W, 3)."""
    return interpolate_attribute(fragment, mesh, mesh.vertices)


def compute_vertex_visibility(mesh: TriMesh, cameras: list[Camera],
                              ) -> torch.Tensor:
    """Boolean per-vertex visibility from a set of cameras.

    For every covered pixel the vertex carrying the largest barycentric
    coordinate is marked visible; exact ties mark all tied vertices.
    Adding cameras can only grow the visible set.
    """
    vis = torch.zeros(mesh.n_vertices, dtype=torch.bool)
    for camera in cameras:
        frag = rasterize(mesh, camera)
        covered = frag.covered
        if not covered.any():
            continue
        bary = frag.bary[covered]  # (N, 3)
        faces = mesh.faces[frag.face_id[covered]]
        top = bary.max(dim=1, keepdim=True).values
        hit = bary >= top - 1e-6
        vis.index_put_((faces[hit],), torch.ones(int(hit.sum()), dtype=torch.bool))
    return vis


def render_visibility_map(mesh: TriMesh, vertex_visibility: torch.Tensor,
                          camera: Camera) -> torch.Tensor:
    """Pixel visibility for a view: interpolate vertex bits, threshold 0.5.

    Background pixels come back 0.
    """
    frag = rasterize(mesh, camera)
    interp = interpolate_attribute(frag, mesh,
                                   vertex_visibility.to(mesh.vertices.dtype))
    return (interp[..., 0] > 0.5) & frag.covered


def ray_mesh_intersect(mesh: TriMesh, origins: torch.Tensor,
                       dirs: torch.Tensor) -> dict[str, torch.Tensor]:
    """Brute-force Moller-Trumbore over all faces.

    Returns t (inf when missed), face_id (-1 when missed), and the
    barycentrics (1-u-v, u, v) of the nearest hit.
    """
    v = mesh.vertices
    f = mesh.faces
    v0 = v[f[:, 0]][None]  # (1, F, 3)
    e1 = (v[f[:, 1]] - v[f[:, 0]])[None]
    e2 = (v[f[:, 2]] - v[f[:, 0]])[None]
    o = origins[:, None, :]
    d = dirs[:, None, :]
    pvec = torch.cross(d.expand(-1, f.shape[0], -1), e2.expand(o.shape[0], -1, -1), dim=-1)
    det = (e1 * pvec).sum(-1)
    ok = det.abs() > 1e-12
    inv_det = torch.where(ok, 1.0 / det, torch.zeros_like(det))
    tvec = o - v0
    u = (tvec * pvec).sum(-1) * inv_det
    qvec = torch.cross(tvec, e1.expand(o.shape[0], -1, -1), dim=-1)
    vv = (d * qvec).sum(-1) * inv_det
    t = (e2 * qvec).sum(-1) * inv_det
    eps = 1e-9
    hit = ok & (u >= -eps) & (vv >= -eps) & (u + vv <= 1 + eps) & (t > 1e-6)
    t = torch.where(hit, t, torch.full_like(t, float("inf")))
    best_t, best_f = t.min(dim=1)
    missed = torch.isinf(best_t)
    rows = torch.arange(origins.shape[0])
    bu = u[rows, best_f]
    bv = vv[rows, best_f]
    bary = torch.stack([1 - bu - bv, bu, bv], dim=1)
    bary[missed] = 0.0
    return {
        "t": best_t,
        "face_id": torch.where(missed, torch.full_like(best_f, -1), best_f),
        "bary": bary,
    }


# ---------------------------------------------------------------------------
# Mesh I/O
# ---------------------------------------------------------------------------

def save_obj(path: str | Path, mesh: TriMesh) -> None:
    v = mesh.vertices.detach().cpu().numpy()
    f = mesh.faces.cpu().numpy() + 1
    with open(path, "w") as fh:
        for x, y, z in v:
            fh.write(f"v {x:.8f} {y:.8f} {z:.8f}\n")
        for a, b, c in f:
            fh.write(f"f {a} {b} {c}\n")


def load_obj(path: str | Path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    return TriMesh(vertices=torch.tensor(verts, dtype=torch.float32),
                   faces=torch.tensor(faces, dtype=torch.int64))


def save_ply(path: str | Path, mesh: TriMesh,
             vertex_visibility: torch.Tensor | None = None) -> None:
    """Binary little-endian PLY; visibility becomes a float vertex property."""
    v = mesh.vertices.detach().cpu().numpy().astype("<f4")
    f = mesh.faces.cpu().numpy().astype("<i4")
    has_vis = vertex_visibility is not None
    if has_vis:
        vis = vertex_visibility.detach().cpu().numpy().astype("<f4").reshape(-1)
        if vis.shape[0] != v.shape[0]:
            raise ValueError("visibility length must match vertex count")
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {v.shape[0]}",
              "property float x", "property float y", "property float z"]
    if has_vis:
        header.append("property float visibility")
    header += [f"element face {f.shape[0]}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if has_vis:
            inter = np.concatenate([v, vis[:, None]], axis=1).astype("<f4")
            fh.write(inter.tobytes())
        else:
            fh.write(v.tobytes())
        for tri in f:
            fh.write(struct.pack("<B3i", 3, *tri))
