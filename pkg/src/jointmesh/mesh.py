"""Labeled multi-component surface meshes.

A :class:`LabeledSurfaceMesh` stores every triangle exactly once.  Triangles
owned by a single component are *exterior* faces; triangles owned by two
components are *wall* faces shared between them.  A wall face is stored with
the winding that is outward for its lower-numbered owner and is flipped when
the closed surface of the other owner is extracted.

Region labels follow one convention throughout the package: the exterior of
component ``c`` has label ``c``; interface regions use labels ``>= C``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

DEGENERATE_AREA_TOL = 1e-12
QUAD_PLANARITY_TOL = 1e-9


class MeshError(ValueError):
    """Raised when a mesh violates a structural invariant."""


# ---------------------------------------------------------------------------
# core type
# ---------------------------------------------------------------------------


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledSurfaceMesh:
    """Shared-vertex triangle mesh with per-face region labels and owners.

    Attributes:
        vertices: (V, 3) float64 positions.
        triangles: (F, 3) int64 vertex indices.
        region_label: (F,) int64 region id per face.
        owners: (F, 2) int64 owning components, sorted ascending; the second
            column is -1 for exterior faces.
        component_count: number of components C.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    region_label: np.ndarray
    owners: np.ndarray
    component_count: int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        r = np.asarray(self.region_label, dtype=np.int64).reshape(-1)
        o = np.asarray(self.owners, dtype=np.int64).reshape(-1, 2)
        if not (len(t) == len(r) == len(o)):
            raise MeshError("triangles, region_label and owners differ in length")
        object.__setattr__(self, "vertices", _frozen(v.copy()))
        object.__setattr__(self, "triangles", _frozen(t.copy()))
        object.__setattr__(self, "region_label", _frozen(r.copy()))
        object.__setattr__(self, "owners", _frozen(o.copy()))
        object.__setattr__(self, "component_count", int(self.component_count))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.triangles)

    @property
    def shared(self) -> np.ndarray:
        """Boolean mask of wall faces."""
        return self.owners[:, 1] >= 0

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, (E, 2) with ``e[:, 0] < e[:, 1]``."""
        return unique_edges(self.triangles)[0]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def euler(self) -> int:
        return self.n_vertices - self.n_edges + self.n_faces

    def with_vertices(self, vertices: np.ndarray) -> "LabeledSurfaceMesh":
        """Same connectivity and labels with new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(
                f"vertex array shape {vertices.shape} != {self.vertices.shape}"
            )
        out = LabeledSurfaceMesh(
            vertices, self.triangles, self.region_label, self.owners, self.component_count
        )
        # topology caches carry over
        if "edges" in self.__dict__:
            out.__dict__["edges"] = self.edges
        return out

    def region_labels(self) -> np.ndarray:
        return np.unique(self.region_label)

    def faces_of_component(self, c: int) -> np.ndarray:
        return np.flatnonzero((self.owners[:, 0] == c) | (self.owners[:, 1] == c))

    def topology_signature(self) -> tuple:
        """Hashable summary of all combinatorial data (positions excluded)."""
        return (
            self.component_count,
            self.triangles.tobytes(),
            self.region_label.tobytes(),
            self.owners.tobytes(),
        )


# ---------------------------------------------------------------------------
# combinatorics
# ---------------------------------------------------------------------------


def unique_edges(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edges of a triangle list.

    Returns:
        edges: (E, 2) sorted vertex pairs, lexicographically ordered.
        face_edges: (F, 3) edge id of each face side (v0v1, v1v2, v2v0).
    """
    t = np.asarray(triangles, dtype=np.int64)
    half = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
    half = np.sort(half, axis=1)
    edges, inverse = np.unique(half, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def euler_characteristic(triangles: np.ndarray) -> int:
    t = np.asarray(triangles)
    if len(t) == 0:
        return 0
    n_v = len(np.unique(t))
    return n_v - len(unique_edges(t)[0]) + len(t)


def closed_manifold_problems(triangles: np.ndarray) -> list[str]:
    """Describe why a triangle list is not a closed oriented 2-manifold.

    An empty list means every undirected edge has exactly two incident faces
    which traverse it in opposite directions.
    """
    t = np.asarray(triangles, dtype=np.int64)
    if len(t) == 0:
        return ["no faces"]
    directed = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
    und, counts = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
    problems = []
    if np.any(counts != 2):
        bad = und[counts != 2][:3]
        problems.append(f"{int(np.sum(counts != 2))} edges without exactly 2 faces, e.g. {bad.tolist()}")
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    if np.any(dcounts > 1):
        problems.append(f"{int(np.sum(dcounts > 1))} directed edges repeated (inconsistent orientation)")
    return problems


def is_closed_manifold(triangles: np.ndarray) -> bool:
    return not closed_manifold_problems(triangles)


def face_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def face_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def signed_volume(vertices: np.ndarray, triangles: np.ndarray) -> float:
    v = vertices[triangles]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def volume_centroid(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Centroid of the solid enclosed by a closed oriented surface."""
    v = vertices[triangles]
    ref = vertices[triangles].reshape(-1, 3).mean(axis=0)
    a, b, c = v[:, 0] - ref, v[:, 1] - ref, v[:, 2] - ref
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    vol = det.sum()
    if abs(vol) < 1e-300:
        raise MeshError("surface encloses zero volume")
    return ref + (det[:, None] * (a + b + c)).sum(axis=0) / (4.0 * vol)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def component_boundary(mesh: LabeledSurfaceMesh, c: int) -> np.ndarray:
    """Closed, outward-oriented triangle list of component ``c``.

    Exterior faces of ``c`` keep their winding; wall faces where ``c`` is the
    second owner are flipped.  Indices refer to ``mesh.vertices``.
    """
    if not 0 <= c < mesh.component_count:
        raise MeshError(f"component {c} out of range 0..{mesh.component_count - 1}")
    idx = mesh.faces_of_component(c)
    if len(idx) == 0:
        raise MeshError(f"component {c} has no faces")
    tris = mesh.triangles[idx].copy()
    flip = mesh.owners[idx, 1] == c
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def component_surface(mesh: LabeledSurfaceMesh, c: int) -> tuple[np.ndarray, np.ndarray]:
    """Compact (vertices, triangles) copy of one component's closed surface."""
    tris = component_boundary(mesh, c)
    used, inv = np.unique(tris, return_inverse=True)
    return mesh.vertices[used], inv.reshape(-1, 3)


def validate(mesh: LabeledSurfaceMesh, check_manifold: bool = True) -> None:
    """Raise :class:`MeshError` on the first violated invariant."""
    C = mesh.component_count
    t, o, r = mesh.triangles, mesh.owners, mesh.region_label
    if C < 1:
        raise MeshError("component_count must be >= 1")
    if len(t) and (t.min() < 0 or t.max() >= mesh.n_vertices):
        raise MeshError("triangle vertex index out of range")
    if np.any(t[:, 0] == t[:, 1]) or np.any(t[:, 1] == t[:, 2]) or np.any(t[:, 0] == t[:, 2]):
        raise MeshError("triangle with repeated vertex")
    if not np.all(np.isfinite(mesh.vertices)):
        raise MeshError("non-finite vertex coordinates")
    if np.any(o[:, 0] < 0) or np.any(o[:, 0] >= C) or np.any(o[:, 1] >= C):
        raise MeshError("owner id out of range")
    shared = o[:, 1] >= 0
    if np.any(o[shared, 0] >= o[shared, 1]):
        raise MeshError("wall owners must be two distinct ids in ascending order")
    ext = ~shared
    if np.any(r[ext] != o[ext, 0]):
        raise MeshError("exterior face label must equal its owner id")
    if np.any(r[shared] < C):
        raise MeshError("wall faces must carry an interface label (>= component_count)")
    for lab in np.unique(r[shared]):
        pairs = np.unique(o[r == lab], axis=0)
        if len(pairs) != 1:
            raise MeshError(f"interface label {lab} spans several owner pairs")
    areas = face_areas(mesh.vertices, t)
    if np.any(areas <= DEGENERATE_AREA_TOL):
        f = int(np.argmin(areas))
        raise MeshError(f"degenerate triangle {f} (area {areas[f]:.3e})")
    # coincident duplicated vertices along walls
    wall_vertices = np.unique(t[shared])
    if len(wall_vertices) > 1:
        from scipy.spatial import cKDTree

        pairs = cKDTree(mesh.vertices).query_pairs(1e-12)
        if pairs:
            raise MeshError(f"{len(pairs)} coincident vertex pairs")
    if check_manifold:
        for c in range(C):
            tris = component_boundary(mesh, c)
            problems = closed_manifold_problems(tris)
            if problems:
                raise MeshError(f"component {c}: " + "; ".join(problems))
            chi = euler_characteristic(tris)
            if chi != 2:
                raise MeshError(f"component {c}: Euler characteristic {chi} != 2")


def component_euler(mesh: LabeledSurfaceMesh) -> list[int]:
    return [euler_characteristic(component_boundary(mesh, c)) for c in range(mesh.component_count)]


# ---------------------------------------------------------------------------
# quads and subdivision
# ---------------------------------------------------------------------------


def triangulate_quads(
    faces: Sequence[Sequence[int]],
    vertices: np.ndarray | None = None,
    tol: float = QUAD_PLANARITY_TOL,
    avoid=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Split quads along the diagonal through their lowest vertex index.

    Vertices in ``avoid`` are kept off the diagonal where possible.

    Args:
        faces: mixed list of 3- and 4-vertex faces.
        vertices: optional positions; when given each quad is checked for
            planarity and convexity.
        tol: planarity tolerance (distance of the fourth vertex to the plane
            of the other three, relative to the quad diameter).
        avoid: optional set of vertex ids.

    Returns:
        triangles (T, 3) and, per triangle, the index of its source face.
    """
    tris, src = [], []
    for fi, f in enumerate(faces):
        f = [int(i) for i in f]
        if len(f) == 3:
            tris.append(f)
            src.append(fi)
            continue
        if len(f) != 4:
            raise MeshError(f"face {fi} has {len(f)} vertices; only triangles and quads supported")
        if vertices is not None:
            _check_quad(vertices[f], fi, tol)
        k = int(np.argmin(f))
        if avoid and (f[k] in avoid or f[(k + 2) % 4] in avoid):
            k = (k + 1) % 4
        q = f[k:] + f[:k]
        tris += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
        src += [fi, fi]
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3), np.asarray(src, dtype=np.int64)


def _check_quad(p: np.ndarray, fi: int, tol: float) -> None:
    diam = max(np.linalg.norm(p[0] - p[2]), np.linalg.norm(p[1] - p[3]))
    n = np.cross(p[1] - p[0], p[2] - p[0])
    nn = np.linalg.norm(n)
    if nn <= DEGENERATE_AREA_TOL:
        raise MeshError(f"quad {fi} is degenerate")
    if abs(np.dot(p[3] - p[0], n / nn)) > tol * diam:
        raise MeshError(f"quad {fi} is not planar")
    crosses = [np.dot(np.cross(p[(i + 1) % 4] - p[i], p[(i + 2) % 4] - p[(i + 1) % 4]), n) for i in range(4)]
    if min(crosses) <= 0:
        raise MeshError(f"quad {fi} is not convex")


def subdivide4(mesh: LabeledSurfaceMesh) -> LabeledSurfaceMesh:
    """Split every triangle into four through its edge midpoints.

    One midpoint is created per undirected edge, so faces on both sides of a
    wall (and the wall itself) share it.  Children inherit label and owners.
    """
    edges, face_edges = unique_edges(mesh.triangles)
    V = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    verts = np.concatenate([mesh.vertices, mids])
    a, b, c = mesh.triangles.T
    ab, bc, ca = (face_edges + V).T
    children = np.stack(
        [
            np.stack([a, ab, ca], 1),
            np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1),
            np.stack([ab, bc, ca], 1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return LabeledSurfaceMesh(
        verts,
        children,
        np.repeat(mesh.region_label, 4),
        np.repeat(mesh.owners, 4, axis=0),
        mesh.component_count,
    )


def subdivide_triangles(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain midpoint subdivision of an unlabeled triangle list."""
    n = len(triangles)
    m = subdivide4(
        LabeledSurfaceMesh(vertices, triangles, np.zeros(n), np.tile([0, -1], (n, 1)), 1)
    )
    return np.asarray(m.vertices), np.asarray(m.triangles)


# ---------------------------------------------------------------------------
# normals and sampling
# ---------------------------------------------------------------------------


def vertex_normals_of(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals of an oriented triangle list.

    Vertices not referenced by ``triangles`` get NaN.  Referenced vertices
    whose normals cancel to zero raise :class:`MeshError`.
    """
    v = vertices[triangles]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])  # |fn| = 2 * area
    acc = np.zeros((len(vertices), 3))
    for k in range(3):
        for d in range(3):
            acc[:, d] += np.bincount(triangles[:, k], weights=fn[:, d], minlength=len(vertices))
    used = np.zeros(len(vertices), dtype=bool)
    used[triangles.ravel()] = True
    norms = np.linalg.norm(acc, axis=1)
    bad = used & (norms <= 1e-300)
    if np.any(bad):
        raise MeshError(f"zero vertex normal at vertex {int(np.flatnonzero(bad)[0])}")
    out = np.full_like(acc, np.nan)
    out[used] = acc[used] / norms[used, None]
    return out


def vertex_normals(mesh: LabeledSurfaceMesh, component: int | None = None) -> np.ndarray:
    """Per-vertex unit normals.

    Wall faces point in opposite directions for their two owners, so meshes
    with walls need a ``component`` context; the normals are then those of the
    component's closed surface (NaN for vertices outside it).
    """
    unused = np.ones(mesh.n_vertices, dtype=bool)
    unused[mesh.triangles.ravel()] = False
    if np.any(unused):
        raise MeshError(f"isolated vertex {int(np.flatnonzero(unused)[0])} has no normal")
    if component is None:
        if np.any(mesh.shared):
            raise MeshError("mesh has shared walls; vertex normals need a component context")
        return vertex_normals_of(mesh.vertices, mesh.triangles)
    return vertex_normals_of(mesh.vertices, component_boundary(mesh, component))


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """Random surface points with barycentric provenance.

    ``points[i] = sum_k bary[i, k] * vertices[triangles[face[i], k]]``.
    """

    points: np.ndarray
    normals: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    region: object = None

    def __len__(self) -> int:
        return len(self.points)


def select_faces(
    mesh: LabeledSurfaceMesh, region: int | Iterable[int] | None = None, component: int | None = None
) -> np.ndarray:
    """Face indices matching a region label (or labels) and/or a component."""
    mask = np.ones(mesh.n_faces, dtype=bool)
    if region is not None:
        labels = np.atleast_1d(np.asarray(list(region) if not np.isscalar(region) else [region]))
        mask &= np.isin(mesh.region_label, labels)
    if component is not None:
        mask &= (mesh.owners[:, 0] == component) | (mesh.owners[:, 1] == component)
    return np.flatnonzero(mask)


def draw_barycentric(
    areas: np.ndarray, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted face choice plus uniform barycentric coordinates."""
    cdf = np.cumsum(areas)
    pick = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    pick = np.minimum(pick, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return pick, bary


def sample_surface(
    mesh: LabeledSurfaceMesh,
    region: int | Iterable[int] | None,
    n: int,
    seed: int | np.random.Generator | None = 0,
    component: int | None = None,
) -> SurfaceSamples:
    """Area-weighted uniform samples on a face subset.

    Normals are interpolated from vertex normals and renormalized.  The normal
    context of each face is ``component`` when given, otherwise the face's
    first owner (the orientation it is stored with).
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    faces = select_faces(mesh, region, component)
    if len(faces) == 0:
        what = f"region {region}" if component is None else f"region {region} / component {component}"
        raise MeshError(f"{what} selects no faces")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    areas = face_areas(mesh.vertices, mesh.triangles[faces])
    pick, bary = draw_barycentric(areas, n, rng)
    face = faces[pick]
    tri = mesh.triangles[face]
    points = np.einsum("nk,nkd->nd", bary, mesh.vertices[tri])

    ctx = mesh.owners[face, 0] if component is None else np.full(n, component)
    normals = np.empty_like(points)
    for c in np.unique(ctx):
        vn = vertex_normals(mesh, int(c)) if mesh.shared.any() else vertex_normals(mesh)
        sel = ctx == c
        normals[sel] = np.einsum("nk,nkd->nd", bary[sel], vn[tri[sel]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return SurfaceSamples(points, normals, face, bary, region)


def sample_triangles(
    vertices: np.ndarray,
    triangles: np.ndarray,
    n: int,
    rng: np.random.Generator,
    normals: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform samples on an unlabeled triangle soup.

    ``normals`` are per-vertex; if omitted, face normals are used.
    """
    areas = face_areas(vertices, triangles)
    pick, bary = draw_barycentric(areas, n, rng)
    tri = triangles[pick]
    pts = np.einsum("nk,nkd->nd", bary, vertices[tri])
    if normals is None:
        nrm = face_normals(vertices, triangles)[pick]
    else:
        nrm = np.einsum("nk,nkd->nd", bary, normals[tri])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm


# ---------------------------------------------------------------------------
# inside tests
# ---------------------------------------------------------------------------

# fixed, generic directions; later entries are used when a ray grazes an edge
_RAY_DIRECTIONS = np.array(
    [
        [0.5773502691896258 + 0.0123456789, 0.5773502691896258 - 0.0311415926, 0.5773502691896258 + 0.0271828182],
        [-0.3162277660168379, 0.8944271909999159 + 0.0017320508, 0.3162277660168379 - 0.0141421356],
        [0.7071067811865476 + 0.0022360679, -0.1234567890123457, -0.7071067811865476 + 0.0031622776],
        [-0.6123724356957945, -0.6123724356957945 + 0.0052915026, 0.5 - 0.0072111025],
        [0.1, 0.2, -0.9746794344808963],
    ]
)
_RAY_DIRECTIONS /= np.linalg.norm(_RAY_DIRECTIONS, axis=1, keepdims=True)
_BARY_TOL = 1e-10


def _ray_parity(points, d, v0, e1, e2, chunk=2_000_000):
    """Crossing parity along direction d plus a flag for grazing rays."""
    n, F = len(points), len(v0)
    inside = np.zeros(n, dtype=bool)
    degenerate = np.zeros(n, dtype=bool)
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    parallel = np.abs(det) <= 1e-13 * scale
    inv_det = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, det))
    unit_n = np.cross(e1, e2)
    unit_n /= np.maximum(np.linalg.norm(unit_n, axis=1, keepdims=True), 1e-300)
    step = max(1, chunk // max(F, 1))
    for s in range(0, n, step):
        p = points[s : s + step]
        tvec = p[:, None, :] - v0[None]
        u = np.einsum("mfd,fd->mf", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None])
        v = (qvec @ d) * inv_det
        t = np.einsum("mfd,fd->mf", qvec, e2) * inv_det
        w = 1.0 - u - v
        hit = (u > _BARY_TOL) & (v > _BARY_TOL) & (w > _BARY_TOL) & (t > 0) & ~parallel
        near = (u > -_BARY_TOL) & (v > -_BARY_TOL) & (w > -_BARY_TOL) & (t > 0) & ~parallel & ~hit
        # a ray lying in a face plane is degenerate only if it starts in that plane
        in_plane = parallel[None] & (np.abs(np.einsum("mfd,fd->mf", tvec, unit_n)) < 1e-12)
        inside[s : s + step] = (hit.sum(axis=1) % 2) == 1
        degenerate[s : s + step] = near.any(axis=1) | in_plane.any(axis=1)
    return inside, degenerate


def point_inside(points: np.ndarray, vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Ray-parity inside test against a closed surface.

    Rays that graze an edge or vertex are re-cast along the next direction of
    a fixed list, so the result is deterministic.  Points closer than about
    1e-9 to the surface may be classified either way.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = np.sort(np.asarray(triangles, dtype=np.int64), axis=1)  # orientation-free arithmetic
    v0 = vertices[tri[:, 0]]
    e1 = vertices[tri[:, 1]] - v0
    e2 = vertices[tri[:, 2]] - v0
    result = np.zeros(len(pts), dtype=bool)
    pending = np.arange(len(pts))
    for d in _RAY_DIRECTIONS:
        if len(pending) == 0:
            break
        inside, degenerate = _ray_parity(pts[pending], d, v0, e1, e2)
        result[pending] = inside
        pending = pending[degenerate]
    return result if np.ndim(points) > 1 else bool(result[0])


# lateral surface shifts (fractions of its extent) used to re-cast grid
# columns that graze an edge; generic so a second coincidence is unlikely
_GRID_SHIFTS = np.array([[3.1415926e-8, 2.7182818e-8, 0.0], [-1.4142135e-8, 1.7320508e-8, 0.0]])


def inside_grid(
    vertices: np.ndarray,
    triangles: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    zs: np.ndarray,
    tri_chunk: int = 4096,
) -> np.ndarray:
    """Inside test for every node of a rectilinear grid.

    Casts one +z ray per (x, y) column and fills crossing parity along it.
    Columns passing within tolerance of a projected edge are re-cast against
    the surface shifted sideways by about 1e-7 of its extent, then fall back
    to :func:`point_inside`.  Nodes closer than that to the surface may be
    classified either way.  ``zs`` must be increasing.

    Returns:
        bool array of shape (len(xs), len(ys), len(zs)).
    """
    xs, ys, zs = (np.asarray(a, dtype=np.float64) for a in (xs, ys, zs))
    nx, ny, nz = len(xs), len(ys), len(zs)
    tri = np.sort(np.asarray(triangles, dtype=np.int64), axis=1)
    P = vertices[tri]
    span = np.ptp(vertices, axis=0).max() if len(vertices) else 1.0
    tol = 1e-10 * max(span, 1e-12)

    out, bad = _grid_pass(P, xs, ys, zs, tol, tri_chunk)
    for shift in _GRID_SHIFTS * span:
        if len(bad) == 0:
            break
        again, still = _grid_pass(P + shift, xs, ys, zs, tol, tri_chunk)
        fixed = bad[~np.isin(bad, still)]
        out[fixed] = again[fixed]
        bad = bad[np.isin(bad, still)]
    if len(bad):
        bi, bj = np.divmod(bad, ny)
        pts = np.stack(
            [np.repeat(xs[bi], nz), np.repeat(ys[bj], nz), np.tile(zs, len(bad))], axis=1
        )
        out[bad] = point_inside(pts, vertices, triangles).reshape(len(bad), nz)
    return out.reshape(nx, ny, nz)


def _grid_pass(P, xs, ys, zs, tol, tri_chunk):
    """Column parity for triangle corners ``P``; returns (grid, degenerate columns)."""
    nx, ny, nz = len(xs), len(ys), len(zs)
    hit_col, hit_b, degenerate_cols = [], [], []
    for s in range(0, len(P), tri_chunk):
        Q = P[s : s + tri_chunk]
        x, y, z = Q[..., 0], Q[..., 1], Q[..., 2]
        i0 = np.searchsorted(xs, x.min(1) - tol, "left")
        i1 = np.searchsorted(xs, x.max(1) + tol, "right")
        j0 = np.searchsorted(ys, y.min(1) - tol, "left")
        j1 = np.searchsorted(ys, y.max(1) + tol, "right")
        ni, nj = np.maximum(i1 - i0, 0), np.maximum(j1 - j0, 0)
        cnt = ni * nj
        total = int(cnt.sum())
        if total == 0:
            continue
        tid = np.repeat(np.arange(len(Q)), cnt)
        off = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        ii = i0[tid] + off // nj[tid]
        jj = j0[tid] + off % nj[tid]
        px, py = xs[ii], ys[jj]
        X, Y, Z = x[tid], y[tid], z[tid]
        # edge k runs from vertex k+1 to k+2; w[k] is the barycentric weight of vertex k
        w = np.empty((total, 3))
        lens = np.empty((total, 3))
        for k in range(3):
            a, b = (k + 1) % 3, (k + 2) % 3
            ex, ey = X[:, b] - X[:, a], Y[:, b] - Y[:, a]
            w[:, k] = ex * (py - Y[:, a]) - ey * (px - X[:, a])
            lens[:, k] = np.hypot(ex, ey)
        area2 = w.sum(axis=1)
        edge_on = np.abs(area2) <= tol * lens.max(axis=1)
        sd = np.sign(area2)[:, None] * w / np.maximum(lens, 1e-300)
        hit = ~edge_on & np.all(sd > tol, axis=1)
        near = ~hit & np.all(sd > -tol, axis=1)
        near |= edge_on & (np.abs(w / np.maximum(lens, 1e-300)).min(axis=1) <= tol)
        col = ii * ny + jj
        if np.any(near):
            degenerate_cols.append(col[near])
        if np.any(hit):
            lam = w[hit] / area2[hit, None]
            zh = np.einsum("nk,nk->n", lam, Z[hit])
            hit_col.append(col[hit])
            hit_b.append(np.searchsorted(zs, zh, "left"))

    out = np.zeros((nx * ny, nz), dtype=bool)
    if hit_col:
        hc = np.concatenate(hit_col)
        hb = np.concatenate(hit_b)
        key = hc * (nz + 1) + hb
        ukey, kcount = np.unique(key, return_counts=True)
        odd = ukey[kcount % 2 == 1]
        cols, rows = np.unique(odd // (nz + 1), return_inverse=True)
        toggles = np.zeros((len(cols), nz + 1), dtype=np.uint8)
        toggles[rows, odd % (nz + 1)] = 1
        parity = np.bitwise_xor.accumulate(toggles[:, ::-1], axis=1)[:, ::-1]
        out[cols] = parity[:, 1:].astype(bool)
    bad = np.unique(np.concatenate(degenerate_cols)) if degenerate_cols else np.zeros(0, dtype=np.int64)
    return out, bad
