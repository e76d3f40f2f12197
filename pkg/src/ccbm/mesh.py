"""Annular triangulations with a known outer circle and a movable inner boundary.

The outer boundary is labelled ``Sigma`` (accessible, carries the data) and
the inner one ``Gamma`` (the unknown obstacle boundary).  Meshes are built
by a structured transfinite construction: every angular sample of the inner
polyline is joined to a point of the outer circle and the segment is split
into ``n_radial`` cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coeff

SIGMA = "Sigma"
GAMMA = "Gamma"

INVERSION_TOL = 1e-14


class MeshError(ValueError):
    """Invalid mesh construction input or a mesh that fails its audit."""


class InvalidCurveError(MeshError):
    """A sampled obstacle curve is not a simple closed polyline."""


class MeshInversionError(MeshError):
    """A deformation produced a triangle with non-positive signed area."""

    def __init__(self, msg: str, min_area: float):
        super().__init__(msg)
        self.min_area = min_area


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming P1 triangulation of an annulus.

    Attributes:
        vertices: (N, 2) float array.
        triangles: (M, 3) counter-clockwise vertex indices.
        boundary_edges: (E, 2) vertex indices; Gamma edges first, each label
            block ordered along its polyline.
        labels: (E,) array of ``SIGMA`` / ``GAMMA``.
        edge_triangles: (E,) index of the unique triangle owning each edge.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    labels: np.ndarray
    edge_triangles: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.vertices, self.triangles, self.boundary_edges, self.labels, self.edge_triangles):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def edges(self, label: str) -> np.ndarray:
        return self.boundary_edges[self.labels == label]

    def edge_owner(self, label: str) -> np.ndarray:
        return self.edge_triangles[self.labels == label]

    def boundary_vertices(self, label: str) -> np.ndarray:
        """Vertex indices of a boundary polyline, in polyline order."""
        key = ("bverts", label)
        if key not in self._cache:
            self._cache[key] = self.edges(label)[:, 0].copy()
        return self._cache[key]

    def polyline(self, label: str = GAMMA) -> np.ndarray:
        return self.vertices[self.boundary_vertices(label)]

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(np.array(vertices, dtype=float), self.triangles, self.boundary_edges, self.labels, self.edge_triangles)

    def signed_areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.triangles)


def signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


# ---------------------------------------------------------------- curves


_LBLOCK = np.array([(-0.55, -0.55), (0.55, -0.55), (0.55, 0.0), (0.0, 0.0), (0.0, 0.55), (-0.55, 0.55)])


@dataclass(frozen=True)
class ObstacleCurve:
    """A closed obstacle boundary.

    ``kind`` is one of ``circle``, ``ellipse``, ``dumbbell``, ``peanut``,
    ``lblock`` or ``polar``.  ``circle`` takes ``center`` and ``radius``;
    ``polar`` takes ``radius_expr`` (an expression in ``t``) and ``center``.
    """

    kind: str
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.6
    radius_expr: str | None = None

    @property
    def star_center(self) -> tuple[float, float]:
        return {
            "ellipse": (0.1, 0.2),
            "dumbbell": (0.0, 0.0),
            "peanut": (-0.25, 0.05),
            "lblock": (-0.25, -0.25),
        }.get(self.kind, tuple(self.center))

    def points(self, n: int) -> np.ndarray:
        """Evaluate the parametrization at ``t_j = 2 pi j / n`` (no validation)."""
        t = 2.0 * np.pi * np.arange(n) / n
        return self.evaluate(t) if self.kind != "lblock" else _lblock_points(n)

    def polygon(self, n: int = 4096) -> np.ndarray:
        """Reference polygon of the curve: the exact corners for ``lblock``, else ``n`` samples."""
        if self.kind == "lblock":
            return _LBLOCK.copy()
        return self.points(n)

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        c, s = np.cos(t), np.sin(t)
        if self.kind == "circle":
            x, y = self.center[0] + self.radius * c, self.center[1] + self.radius * s
        elif self.kind == "ellipse":
            x, y = 0.1 + 0.7 * c, 0.2 + 0.5 * s
        elif self.kind == "dumbbell":
            x, y = 0.6 * c, 0.5 * s * (1.8 + np.cos(2 * t))
        elif self.kind == "peanut":
            r = (0.6 + 0.54 * c + 0.06 * np.sin(2 * t)) / (1 + 0.75 * c)
            x, y = -0.25 + r * c, 0.05 + r * s
        elif self.kind == "polar":
            if self.radius_expr is None:
                raise ValueError("polar curve needs radius_expr")
            r = coeff.evaluate(coeff.parse_expr(self.radius_expr), c, s)
            x, y = self.center[0] + r * c, self.center[1] + r * s
        elif self.kind == "lblock":
            return _lblock_at_angles(t)
        else:
            raise ValueError(f"unknown curve kind {self.kind!r}")
        return np.stack([x, y], axis=-1)


def _ray_polygon(center, poly, angles):
    """Distance from ``center`` along each angle to the first polygon crossing."""
    c = np.asarray(center, dtype=float)
    d = np.stack([np.cos(angles), np.sin(angles)], axis=-1)[:, None, :]
    p = (poly - c)[None]
    e = (np.roll(poly, -1, axis=0) - poly)[None]
    den = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (p[..., 0] * e[..., 1] - p[..., 1] * e[..., 0]) / den
        w = (p[..., 0] * d[..., 1] - p[..., 1] * d[..., 0]) / den
    ok = (np.abs(den) > 1e-14) & (s > 0) & (w >= -1e-12) & (w <= 1 + 1e-12)
    return np.where(ok, s, np.inf).min(axis=1)


def _lblock_at_angles(angles):
    c = np.array([-0.25, -0.25])
    r = _ray_polygon(c, _LBLOCK, angles)
    return c + r[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def _lblock_points(n):
    # uniform polar angles about the star center, nearest samples snapped onto the corners
    c = np.array([-0.25, -0.25])
    angles = 2.0 * np.pi * np.arange(n) / n
    corner_angles = np.mod(np.arctan2(_LBLOCK[:, 1] - c[1], _LBLOCK[:, 0] - c[0]), 2 * np.pi)
    taken = set()
    for ca in corner_angles:
        diff = np.abs((angles - ca + np.pi) % (2 * np.pi) - np.pi)
        for j in np.argsort(diff):
            if j not in taken:
                angles[j] = ca
                taken.add(int(j))
                break
    angles = np.sort(angles)
    return _lblock_at_angles(angles)


def _segments_intersect(poly: np.ndarray) -> bool:
    n = len(poly)
    p = poly
    q = np.roll(poly, -1, axis=0)

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    d1 = orient(p[i], q[i], p[j])
    d2 = orient(p[i], q[i], q[j])
    d3 = orient(p[j], q[j], p[i])
    d4 = orient(p[j], q[j], q[i])
    return bool(np.any((d1 * d2 <= 0) & (d3 * d4 <= 0)))


def sample_curve(curve: ObstacleCurve, n: int) -> np.ndarray:
    """Sample ``n`` points of a closed obstacle curve, counter-clockwise.

    Raises:
        InvalidCurveError: if the sampled polyline self-intersects or has
            repeated points.
    """
    if n < 8:
        raise ValueError("need at least 8 samples")
    pts = curve.points(n)
    check_simple(pts)
    return pts


def check_simple(pts: np.ndarray) -> None:
    seg = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    if np.any(seg < 1e-12):
        raise InvalidCurveError("polyline has repeated points")
    if _segments_intersect(pts):
        raise InvalidCurveError("polyline self-intersects")


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# ------------------------------------------------------------- generation


def _check_star(inner: np.ndarray, center) -> None:
    rel = inner - np.asarray(center, dtype=float)
    if np.any(np.linalg.norm(rel, axis=1) < 1e-12):
        raise MeshError("star center lies on the inner polyline")
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    steps = np.mod(np.diff(np.append(ang, ang[0])), 2 * np.pi)
    if np.any(steps <= 0) or np.any(steps >= np.pi) or not math.isclose(steps.sum(), 2 * np.pi, rel_tol=1e-9):
        raise MeshError("inner polyline is not star-shaped about the star center")


def generate_annular_mesh(
    outer_radius: float,
    inner: np.ndarray,
    n_angular: int,
    n_radial: int,
    star_center=(0.0, 0.0),
) -> Mesh:
    """Structured annular mesh between ``inner`` and the circle of ``outer_radius``.

    Sigma vertices sit at polar angles ``2 pi j / n_angular``.  Gamma vertex
    ``j`` is where the ray from ``star_center`` towards Sigma vertex ``j``
    crosses ``inner`` (any closed polygon, typically a dense sampling of
    the obstacle curve); polygon corners sharper than 25 degrees are kept
    exactly.  Vertex ``k * n_angular + j`` sits at fraction ``k / n_radial``
    of the segment between the two.  Ring 0 is Gamma, ring ``n_radial`` is
    Sigma.
    """
    inner = np.asarray(inner, dtype=float)
    if inner.ndim != 2 or inner.shape[1] != 2 or len(inner) < 3:
        raise MeshError("inner polyline must be an (m, 2) array with m >= 3")
    if n_angular < 3 or n_radial < 1:
        raise MeshError("need n_angular >= 3 and n_radial >= 1")
    if polygon_area(inner) < 0:
        inner = inner[::-1]
    if np.any(np.linalg.norm(inner, axis=1) >= outer_radius):
        raise MeshError("inner polyline is not strictly inside the outer circle")
    _check_star(inner, star_center)

    c = np.asarray(star_center, dtype=float)
    phi = 2.0 * np.pi * np.arange(n_angular) / n_angular
    outer = outer_radius * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    rays = outer - c
    psi = np.arctan2(rays[:, 1], rays[:, 0])
    r = _ray_polygon(c, inner, psi)
    if not np.all(np.isfinite(r)):
        raise MeshError("ray from the star center misses the inner polyline")
    gamma_pts = c + r[:, None] * np.stack([np.cos(psi), np.sin(psi)], axis=-1)
    # sharp polygon corners are kept exactly by snapping the closest ray sample onto them
    prev = inner - np.roll(inner, 1, axis=0)
    nxt = np.roll(inner, -1, axis=0) - inner
    turn = np.abs(np.arctan2(prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0], np.einsum("ij,ij->i", prev, nxt)))
    used = set()
    for corner in inner[turn > np.radians(25.0)]:
        ca = np.arctan2(corner[1] - c[1], corner[0] - c[0])
        order = np.argsort(np.abs((psi - ca + np.pi) % (2 * np.pi) - np.pi))
        j = next(int(j) for j in order if int(j) not in used)
        used.add(j)
        gamma_pts[j] = corner
    inner = gamma_pts

    s = np.arange(n_radial + 1)[:, None, None] / n_radial
    verts = ((1 - s) * inner[None] + s * outer[None]).reshape(-1, 2)

    def vid(k, j):
        return k * n_angular + (j % n_angular)

    k, j = np.meshgrid(np.arange(n_radial), np.arange(n_angular), indexing="ij")
    k, j = k.ravel(), j.ravel()
    t1 = np.stack([vid(k, j), vid(k + 1, j), vid(k + 1, j + 1)], axis=1)
    t2 = np.stack([vid(k, j), vid(k + 1, j + 1), vid(k, j + 1)], axis=1)
    tris = np.empty((2 * len(k), 3), dtype=np.int64)
    tris[0::2] = t1
    tris[1::2] = t2

    jj = np.arange(n_angular)
    gamma = np.stack([vid(0, jj), vid(0, jj + 1)], axis=1)
    sigma = np.stack([vid(n_radial, jj), vid(n_radial, jj + 1)], axis=1)
    # quad (0, j) second triangle owns Gamma edge j; quad (n_radial - 1, j) first owns Sigma edge j
    gamma_owner = 2 * (0 * n_angular + jj) + 1
    sigma_owner = 2 * ((n_radial - 1) * n_angular + jj)
    mesh = Mesh(
        verts,
        tris,
        np.concatenate([gamma, sigma]),
        np.array([GAMMA] * n_angular + [SIGMA] * n_angular, dtype=object),
        np.concatenate([gamma_owner, sigma_owner]),
    )
    areas = mesh.signed_areas()
    if np.any(areas <= INVERSION_TOL * np.median(np.abs(areas))):
        raise MeshError("structured construction folded: non-positive triangle area")
    return mesh


def annulus_for_curve(curve: ObstacleCurve, n_angular: int, n_radial: int, outer_radius: float = 1.0) -> Mesh:
    return generate_annular_mesh(outer_radius, curve.polygon(), n_angular, n_radial, curve.star_center)


def audit(mesh: Mesh) -> list[str]:
    """Full structural audit; returns a list of violated invariants (empty when valid)."""
    problems = []
    nv = mesh.n_vertices
    tris = mesh.triangles
    if tris.min() < 0 or tris.max() >= nv or mesh.boundary_edges.max() >= nv:
        problems.append("vertex index out of range")
        return problems
    if np.any(mesh.signed_areas() <= 0):
        problems.append("non-positive signed area")
    all_edges = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        problems.append("edge shared by more than two triangles")
    bset = {tuple(e) for e in uniq[counts == 1]}
    labelled = {tuple(sorted(e)) for e in mesh.boundary_edges.tolist()}
    if bset != labelled:
        problems.append("labelled boundary edges differ from single-triangle edges")
    for e, t in zip(mesh.boundary_edges, mesh.edge_triangles):
        if not set(e.tolist()) <= set(tris[t].tolist()):
            problems.append("edge owner does not contain the edge")
            break
    if nv - len(uniq) + len(tris) != 0:
        problems.append("Euler characteristic V - E + F != 0")
    for label in (SIGMA, GAMMA):
        e = mesh.edges(label)
        if len(e) == 0 or not np.array_equal(e[:, 1], np.roll(e[:, 0], -1)):
            problems.append(f"{label} edges do not form one closed polyline")
    sig = mesh.polyline(SIGMA)
    gam = mesh.polyline(GAMMA)
    if len(sig) and len(gam) and np.max(np.linalg.norm(gam, axis=1)) >= np.min(np.linalg.norm(sig, axis=1)) + 1e-12:
        if not _inside(gam, sig):
            problems.append("Gamma is not inside Sigma")
    return problems


def _inside(points, poly):
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    for (x0, y0), (x1, y1) in zip(poly, np.roll(poly, -1, axis=0)):
        cross = ((y0 > y) != (y1 > y)) & (x < (x1 - x0) * (y - y0) / (y1 - y0 + 1e-300) + x0)
        inside ^= cross
    return bool(np.all(inside))


# ------------------------------------------------ deformation and geometry


def deform(mesh: Mesh, theta: np.ndarray, t: float) -> Mesh:
    """Move every vertex to ``x + t * theta(x)``.

    Raises:
        MeshInversionError: when some signed area drops to (numerically) zero
            or below; callers halve ``t`` and retry.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != mesh.vertices.shape:
        raise ValueError("deformation field must have one 2-vector per vertex")
    if np.any(theta[mesh.boundary_vertices(SIGMA)] != 0):
        raise ValueError("deformation field must vanish on Sigma")
    if t == 0:
        return mesh
    verts = mesh.vertices + t * theta
    areas = signed_areas(verts, mesh.triangles)
    ref = np.median(np.abs(mesh.signed_areas()))
    if np.any(areas <= INVERSION_TOL * ref):
        raise MeshInversionError(f"deformation with t={t:g} inverts the mesh", float(areas.min()))
    return mesh.with_vertices(verts)


def boundary_geometry(mesh: Mesh, label: str):
    """Midpoints, lengths and outward unit normals (of Omega) of labelled edges."""
    key = ("bgeom", label)
    if key in mesh._cache:
        return mesh._cache[key]
    e = mesh.edges(label)
    owner = mesh.triangles[mesh.edge_owner(label)]
    a, b = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    tang = b - a
    length = np.linalg.norm(tang, axis=1)
    normal = np.stack([tang[:, 1], -tang[:, 0]], axis=1) / length[:, None]
    # third vertex of the owning triangle lies inside Omega
    third = mesh.vertices[owner].sum(axis=1) - a - b
    flip = np.einsum("ij,ij->i", normal, third - a) > 0
    normal[flip] *= -1
    out = (0.5 * (a + b), length, normal)
    mesh._cache[key] = out
    return out


def min_quality(mesh: Mesh) -> tuple[float, float]:
    """Minimum signed area and minimum interior angle (degrees)."""
    v = mesh.vertices[mesh.triangles]
    angles = []
    for i in range(3):
        p, q, r = v[:, i], v[:, (i + 1) % 3], v[:, (i + 2) % 3]
        u, w = q - p, r - p
        cosang = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    return float(mesh.signed_areas().min()), float(np.min(angles))


def _point_segment_distance(points, a, b):
    """(P, S) matrix of distances from points to segments a->b."""
    ab = b - a
    ap = points[:, None, :] - a[None]
    denom = np.einsum("ij,ij->i", ab, ab)
    s = np.clip(np.einsum("pij,ij->pi", ap, ab) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    closest = a[None] + s[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def _directed_hausdorff(pa, pb):
    a, b = pb, np.roll(pb, -1, axis=0)
    best = 0.0
    for chunk in np.array_split(pa, max(1, len(pa) // 256)):
        best = max(best, float(_point_segment_distance(chunk, a, b).min(axis=1).max()))
    return best


def hausdorff_distance(poly_a: np.ndarray, poly_b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between closed polylines (vertex to segment, both ways)."""
    poly_a = np.asarray(poly_a, dtype=float)
    poly_b = np.asarray(poly_b, dtype=float)
    if len(poly_a) == 0 or len(poly_b) == 0:
        raise ValueError("polylines must be non-empty")
    return max(_directed_hausdorff(poly_a, poly_b), _directed_hausdorff(poly_b, poly_a))


# ---------------------------------------------------------------------- io


def write_polyline_csv(path, poly: np.ndarray) -> None:
    lines = ["t_index,x,y"] + [f"{i},{x!r},{y!r}" for i, (x, y) in enumerate(np.asarray(poly, dtype=float).tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_polyline_csv(path) -> np.ndarray:
    rows = Path(path).read_text().strip().splitlines()
    if rows[0].strip() != "t_index,x,y":
        raise ValueError(f"{path}: unexpected header {rows[0]!r}")
    return np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])


def write_vtk(path, mesh: Mesh, point_data: dict | None = None) -> None:
    """Legacy ASCII VTK unstructured grid with triangle cells."""
    out = ["# vtk DataFile Version 3.0", "ccbm mesh", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.n_vertices} double")
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    out.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    out.append(f"CELL_TYPES {mesh.n_triangles}")
    out += ["5"] * mesh.n_triangles
    if point_data:
        out.append(f"POINT_DATA {mesh.n_vertices}")
        for name, values in point_data.items():
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [repr(float(v)) for v in np.asarray(values, dtype=float)]
    Path(path).write_text("\n".join(out) + "\n")
