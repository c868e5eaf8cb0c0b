import torch

from humanlift.mesh import TriMesh


def icosphere(subdivisions: int = 2, radius: float = 1.0,
              dtype=torch.float64) -> TriMesh:
    """Subdivided icosahedron projected onto a sphere, outward wound."""
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(c / (1 + phi * phi) ** 0.5 for c in v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                ax, ay, az = verts[a]
                bx, by, bz = verts[b]
                mx, my, mz = (ax + bx) / 2, (ay + by) / 2, (az + bz) / 2
                norm = (mx * mx + my * my + mz * mz) ** 0.5
                verts.append((mx / norm, my / norm, mz / norm))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = torch.tensor(verts, dtype=dtype) * radius
    f = torch.tensor(faces, dtype=torch.int64)
    return TriMesh(vertices=v, faces=f)
