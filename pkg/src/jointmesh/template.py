"""Connected organ templates built from glued rhombicuboctahedra.

Each anatomical component starts as a rhombicuboctahedron.  Neighbouring
components share one square face, which becomes a wall stored once with two
owners.  After subdivision the geometry is *spherified*: exterior vertices go
onto the component's sphere, each wall's boundary ring onto the circle where
the two spheres meet, and the wall interior onto the flat disk spanned by
that circle.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import ConvexHull

from .mesh import (
    LabeledSurfaceMesh,
    MeshError,
    face_normals,
    subdivide4,
    triangulate_quads,
    validate,
)

_A = 1.0 + np.sqrt(2.0)
CIRCUMRADIUS = float(np.sqrt(2.0 + _A * _A))
# center-to-square distance of a unit-circumradius rhombicuboctahedron
SQUARE_OFFSET = float(_A / CIRCUMRADIUS)
COINCIDENT_TOL = 1e-9


class TemplateError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Component:
    name: str
    center: tuple[float, float, float]
    radius: float = 1.0


@dataclass(frozen=True)
class Adjacency:
    a: int
    b: int
    label: int
    supervised: bool = True
    name: str | None = None


@dataclass(frozen=True)
class Region:
    label: int
    name: str
    owners: tuple[int, ...]
    supervised: bool

    @property
    def is_interface(self) -> bool:
        return len(self.owners) == 2


@dataclass(frozen=True)
class TemplateSpec:
    """Declarative description of a multi-component template."""

    components: tuple[Component, ...]
    adjacencies: tuple[Adjacency, ...] = ()
    subdivision_levels: int = 1
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "adjacencies", tuple(self.adjacencies))

    @property
    def component_count(self) -> int:
        return len(self.components)

    def adjacency_name(self, adj: Adjacency) -> str:
        if adj.name:
            return adj.name
        return f"{self.components[adj.a].name}-{self.components[adj.b].name}"

    def regions(self) -> list[Region]:
        out = [Region(c, comp.name, (c,), True) for c, comp in enumerate(self.components)]
        for adj in self.adjacencies:
            lo, hi = sorted((adj.a, adj.b))
            out.append(Region(adj.label, self.adjacency_name(adj), (lo, hi), adj.supervised))
        return out

    def region(self, label: int) -> Region:
        for r in self.regions():
            if r.label == label:
                return r
        raise KeyError(label)

    def supervised_regions(self) -> list[int]:
        return [r.label for r in self.regions() if r.supervised]

    def groups(self) -> list[list[int]]:
        """Connected components of the adjacency graph (sorted)."""
        parent = list(range(self.component_count))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for adj in self.adjacencies:
            parent[find(adj.a)] = find(adj.b)
        groups: dict[int, list[int]] = {}
        for c in range(self.component_count):
            groups.setdefault(find(c), []).append(c)
        return sorted(groups.values())

    def validate(self) -> None:
        C = self.component_count
        if C < 1:
            raise TemplateError("template needs at least one component")
        if self.subdivision_levels < 0:
            raise TemplateError("subdivision_levels must be >= 0")
        for comp in self.components:
            if not comp.radius > 0:
                raise TemplateError(f"component {comp.name}: radius must be positive")
        labels, pairs = set(), set()
        for adj in self.adjacencies:
            if not (0 <= adj.a < C and 0 <= adj.b < C) or adj.a == adj.b:
                raise TemplateError(f"adjacency ({adj.a}, {adj.b}) references invalid components")
            pair = tuple(sorted((adj.a, adj.b)))
            if pair in pairs:
                raise TemplateError(f"duplicate adjacency {pair}")
            pairs.add(pair)
            if adj.label < C:
                raise TemplateError(
                    f"interface label {adj.label} collides with component exterior labels 0..{C - 1}"
                )
            if adj.label in labels:
                raise TemplateError(f"interface label {adj.label} used twice")
            labels.add(adj.label)
            ca, cb = self.components[adj.a], self.components[adj.b]
            d = np.linalg.norm(np.subtract(cb.center, ca.center))
            if not (abs(ca.radius - cb.radius) < d < ca.radius + cb.radius):
                raise TemplateError(
                    f"spheres of {ca.name} and {cb.name} do not overlap properly "
                    f"(distance {d:.4g}, radii {ca.radius:.4g}, {cb.radius:.4g})"
                )

    # serialization helpers used by io
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "subdivision_levels": self.subdivision_levels,
            "components": [
                {"name": c.name, "center": list(c.center), "radius": c.radius} for c in self.components
            ],
            "adjacencies": [
                {"a": a.a, "b": a.b, "label": a.label, "supervised": a.supervised, "name": a.name}
                for a in self.adjacencies
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TemplateSpec":
        allowed = {"name", "subdivision_levels", "components", "adjacencies"}
        unknown = set(data) - allowed
        if unknown:
            raise TemplateError(f"unknown template keys: {sorted(unknown)}")
        comps = []
        for c in data["components"]:
            extra = set(c) - {"name", "center", "radius"}
            if extra:
                raise TemplateError(f"unknown component keys: {sorted(extra)}")
            comps.append(Component(str(c["name"]), tuple(float(x) for x in c["center"]), float(c.get("radius", 1.0))))
        adjs = []
        for k, a in enumerate(data.get("adjacencies", [])):
            extra = set(a) - {"a", "b", "label", "supervised", "name"}
            if extra:
                raise TemplateError(f"unknown adjacency keys: {sorted(extra)}")
            adjs.append(
                Adjacency(
                    int(a["a"]),
                    int(a["b"]),
                    int(a.get("label", len(comps) + k)),
                    bool(a.get("supervised", True)),
                    a.get("name"),
                )
            )
        return cls(tuple(comps), tuple(adjs), int(data.get("subdivision_levels", 1)), str(data.get("name", "custom")))


def _chain_labels(C: int, pairs) -> tuple[Adjacency, ...]:
    return tuple(Adjacency(a, b, C + k, sup, name) for k, (a, b, sup, name) in enumerate(pairs))


def heart_spec(spacing: float = 1.6, radius: float = 1.0, subdivision_levels: int = 1) -> TemplateSpec:
    """Four chambers in a 2x2 layout; the LA-RA wall exists but is unsupervised."""
    d = spacing
    comps = (
        Component("LV", (0.0, 0.0, 0.0), radius),
        Component("RV", (d, 0.0, 0.0), radius),
        Component("LA", (0.0, d, 0.0), radius),
        Component("RA", (d, d, 0.0), radius),
    )
    adjs = _chain_labels(
        4,
        [(0, 1, True, "LV-RV"), (0, 2, True, "LV-LA"), (1, 3, True, "RV-RA"), (2, 3, False, "LA-RA")],
    )
    return TemplateSpec(comps, adjs, subdivision_levels, "heart")


def hippocampus_spec(spacing: float = 1.2, radius: float = 1.0, subdivision_levels: int = 1) -> TemplateSpec:
    comps = (
        Component("anterior", (0.0, 0.0, 0.0), radius),
        Component("posterior", (spacing, 0.0, 0.0), radius),
    )
    return TemplateSpec(comps, _chain_labels(2, [(0, 1, True, "anterior-posterior")]), subdivision_levels, "hippocampus")


def lungs_spec(left_spacing: float = 1.2, radius: float = 1.0, subdivision_levels: int = 1) -> TemplateSpec:
    """Right lung: three pairwise-glued lobes; left lung: two lobes.

    Three mutually glued units meet at a single shared vertex, so their
    flat walls can only close up consistently when the three spheres touch
    in exactly one point: center spacing sqrt(3) * radius.
    """
    s = np.sqrt(3.0) * radius
    n1 = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    n2 = np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0)
    left = np.array([-3.0 * radius, 0.0, 0.0])
    comps = (
        Component("LR", (0.0, 0.0, 0.0), radius),
        Component("MR", tuple(s * n1), radius),
        Component("UR", tuple(s * n2), radius),
        Component("LL", tuple(left), radius),
        Component("UL", tuple(left + [0.0, 0.0, left_spacing]), radius),
    )
    adjs = _chain_labels(
        5,
        [(0, 1, True, "LR-MR"), (0, 2, True, "LR-UR"), (1, 2, True, "MR-UR"), (3, 4, True, "LL-UL")],
    )
    return TemplateSpec(comps, adjs, subdivision_levels, "lungs")


PRESETS = {"heart": heart_spec, "hippocampus": hippocampus_spec, "lungs": lungs_spec}


# ---------------------------------------------------------------------------
# polyhedral assembly
# ---------------------------------------------------------------------------


def rhombicuboctahedron_faces() -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Vertices (unit circumradius) and outward-wound faces: 8 triangles, 18 squares."""
    pts = set()
    for k in range(3):
        for sx in (-1, 1):
            for sy in (-1, 1):
                for sz in (-1, 1):
                    p = [sx * 1.0, sy * 1.0, sz * 1.0]
                    p[k] *= _A
                    pts.add(tuple(p))
    verts = np.array(sorted(pts)) / CIRCUMRADIUS
    hull = ConvexHull(verts)
    planes: dict[tuple, set] = {}
    for simplex, eq in zip(hull.simplices, hull.equations):
        key = tuple(np.round(eq, 9))
        planes.setdefault(key, set()).update(int(i) for i in simplex)
    faces = []
    for key, idx in planes.items():
        idx = sorted(idx)
        normal = np.array(key[:3])
        c = verts[idx].mean(axis=0)
        e1 = verts[idx[0]] - c
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(normal, e1)
        ang = [np.arctan2(np.dot(verts[i] - c, e2), np.dot(verts[i] - c, e1)) for i in idx]
        ring = [idx[i] for i in np.argsort(ang)]
        k = int(np.argmin(ring))
        faces.append(tuple(ring[k:] + ring[:k]))
    faces.sort(key=lambda f: (len(f), f))
    return verts, faces


@dataclass
class PolyAssembly:
    """Polygonal multi-component surface prior to triangulation.

    ``owners[i]`` is ``(c, -1)`` for exterior faces and a sorted pair for
    walls; wall faces are wound outward for the lower owner.
    """

    vertices: np.ndarray
    faces: list[tuple[int, ...]]
    owners: list[tuple[int, int]]
    labels: list[int | None]
    component_count: int

    def face_center(self, f: int) -> np.ndarray:
        return self.vertices[list(self.faces[f])].mean(axis=0)

    def face_normal(self, f: int) -> np.ndarray:
        p = self.vertices[list(self.faces[f])]
        n = np.cross(p[1] - p[0], p[2] - p[0])
        return n / np.linalg.norm(n)

    def square_faces(self) -> list[int]:
        return [i for i, f in enumerate(self.faces) if len(f) == 4]

    def find_face(self, component: int, center: np.ndarray, tol: float = 1e-6) -> int:
        for i, f in enumerate(self.faces):
            if self.owners[i][0] == component and self.owners[i][1] < 0:
                if np.linalg.norm(self.face_center(i) - center) < tol:
                    return i
        raise TemplateError(f"component {component} has no free face centered at {np.round(center, 6).tolist()}")

    def junctions(self) -> set[int]:
        """Vertices shared by two or more walls."""
        seen: dict[int, int] = {}
        for f, o in zip(self.faces, self.owners):
            if o[1] >= 0:
                for v in f:
                    seen[v] = seen.get(v, 0) + 1
        return {v for v, n in seen.items() if n >= 2}

    def to_mesh(self) -> LabeledSurfaceMesh:
        # a diagonal through a junction would put free vertices into the
        # zero-width gap between tangent rings after spherification
        tris, src = triangulate_quads(self.faces, self.vertices, avoid=self.junctions())
        owners = np.array([self.owners[i] for i in src], dtype=np.int64).reshape(-1, 2)
        labels = np.array(
            [self.owners[i][0] if self.labels[i] is None else self.labels[i] for i in src], dtype=np.int64
        )
        return LabeledSurfaceMesh(self.vertices, tris, labels, owners, self.component_count)


def rhombicuboctahedron_assembly(center=(0.0, 0.0, 0.0), circumradius: float = 1.0) -> PolyAssembly:
    verts, faces = rhombicuboctahedron_faces()
    return PolyAssembly(
        verts * circumradius + np.asarray(center, dtype=float),
        list(faces),
        [(0, -1)] * len(faces),
        [None] * len(faces),
        1,
    )


def make_rhombicuboctahedron() -> LabeledSurfaceMesh:
    """Single-component triangulated rhombicuboctahedron (V=24, F=44)."""
    return rhombicuboctahedron_assembly().to_mesh()


def union(a: PolyAssembly, b: PolyAssembly) -> PolyAssembly:
    """Disjoint union; b's components are renumbered after a's."""
    off_v, off_c = len(a.vertices), a.component_count
    faces = a.faces + [tuple(i + off_v for i in f) for f in b.faces]
    owners = a.owners + [(o0 + off_c, o1 + off_c if o1 >= 0 else -1) for o0, o1 in b.owners]
    return PolyAssembly(
        np.concatenate([a.vertices, b.vertices]), faces, owners, a.labels + b.labels, a.component_count + b.component_count
    )


def fuse(asm: PolyAssembly, quad_a: int, quad_b: int, label: int | None = None) -> PolyAssembly:
    """Merge two coincident square faces of one assembly into a single wall."""
    fa, fb = asm.faces[quad_a], asm.faces[quad_b]
    if quad_a == quad_b:
        raise TemplateError("cannot glue a face to itself")
    if len(fa) != 4 or len(fb) != 4:
        raise TemplateError("only square faces can be glued")
    if asm.owners[quad_a][1] >= 0 or asm.owners[quad_b][1] >= 0:
        raise TemplateError("face is already glued")
    ca, cb = asm.owners[quad_a][0], asm.owners[quad_b][0]
    if ca == cb:
        raise TemplateError("faces belong to the same component")
    pa, pb = asm.vertices[list(fa)], asm.vertices[list(fb)]
    side_a = np.linalg.norm(np.roll(pa, -1, axis=0) - pa, axis=1)
    side_b = np.linalg.norm(np.roll(pb, -1, axis=0) - pb, axis=1)
    if abs(side_a.mean() - side_b.mean()) > COINCIDENT_TOL:
        raise TemplateError(f"square sizes differ ({side_a.mean():.6g} vs {side_b.mean():.6g})")
    remap = {}
    for j, vb in enumerate(fb):
        dist = np.linalg.norm(pa - pb[j], axis=1)
        k = int(np.argmin(dist))
        if dist[k] > COINCIDENT_TOL:
            raise TemplateError(f"faces are not coincident (vertex gap {dist[k]:.3e})")
        remap[vb] = fa[k]
    if len(set(remap.values())) != 4:
        raise TemplateError("faces are not coincident")
    if np.dot(asm.face_normal(quad_a), asm.face_normal(quad_b)) > -1 + 1e-9:
        raise TemplateError("glued faces must face each other")

    keep, drop = (quad_a, quad_b) if ca < cb else (quad_b, quad_a)
    if ca > cb:
        remap = {v: k for k, v in remap.items()}
    faces, owners, labels = [], [], []
    for i, f in enumerate(asm.faces):
        if i == drop:
            continue
        faces.append(tuple(remap.get(v, v) for v in f))
        owners.append(tuple(sorted((ca, cb))) if i == keep else asm.owners[i])
        labels.append(label if i == keep else asm.labels[i])
    # compact away the now unused duplicate vertices
    used = np.zeros(len(asm.vertices), dtype=bool)
    for f in faces:
        used[list(f)] = True
    new_index = np.cumsum(used) - 1
    faces = [tuple(int(new_index[v]) for v in f) for f in faces]
    return PolyAssembly(asm.vertices[used], faces, owners, labels, asm.component_count)


def glue(a: PolyAssembly, b: PolyAssembly, quad_a: int, quad_b: int, label: int | None = None) -> PolyAssembly:
    """Glue assembly ``b`` onto ``a`` along coincident squares.

    ``b`` must already be positioned so ``quad_b`` coincides with ``quad_a``.
    Face ids refer to each input's own face list.
    """
    merged = union(a, b)
    return fuse(merged, quad_a, len(a.faces) + quad_b, label)


# ---------------------------------------------------------------------------
# raw placement
# ---------------------------------------------------------------------------


def _square_normals() -> np.ndarray:
    verts, faces = rhombicuboctahedron_faces()
    out = []
    for f in faces:
        if len(f) == 4:
            c = verts[list(f)].mean(axis=0)
            out.append(c / np.linalg.norm(c))
    return np.array(out)


def _rotation_between(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector u onto unit vector v."""
    w = np.cross(u, v)
    c = float(np.dot(u, v))
    if np.linalg.norm(w) < 1e-15:
        if c > 0:
            return np.eye(3)
        axis = np.cross(u, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(u, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    H = src.T @ dst
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    return Vt.T @ D @ U.T


def raw_assembly(spec: TemplateSpec) -> PolyAssembly:
    """Place one rhombicuboctahedron per component and glue all adjacencies.

    Units in one adjacency group share a circumradius chosen so that glued
    squares coincide at the group's mean center spacing.  Each adjacency uses
    the square whose normal best matches the direction between the two
    centers; the layout is then rotated onto the TemplateSpec centers.
    """
    spec.validate()
    normals = _square_normals()
    centers = np.array([c.center for c in spec.components], dtype=float)
    raw_centers = np.zeros_like(centers)
    scale = np.ones(spec.component_count)
    unit_rot: dict[int, np.ndarray] = {}
    neighbors: dict[int, list[int]] = {c: [] for c in range(spec.component_count)}
    for adj in spec.adjacencies:
        neighbors[adj.a].append(adj.b)
        neighbors[adj.b].append(adj.a)

    for group in spec.groups():
        gadj = [a for a in spec.adjacencies if a.a in group]
        if gadj:
            mean_d = np.mean([np.linalg.norm(centers[a.b] - centers[a.a]) for a in gadj])
            R = mean_d / (2.0 * SQUARE_OFFSET)
        else:
            R = spec.components[group[0]].radius * 0.9
        scale[group] = R
        root = group[0]
        raw_centers[root] = centers[root]
        seen, queue = {root}, deque([root])
        while queue:
            a = queue.popleft()
            for b in sorted(neighbors[a]):
                if b in seen:
                    continue
                d = centers[b] - centers[a]
                s = normals[int(np.argmax(normals @ (d / np.linalg.norm(d))))]
                raw_centers[b] = raw_centers[a] + 2.0 * SQUARE_OFFSET * R * s
                seen.add(b)
                queue.append(b)
        # rotate the raw layout of this group onto the TemplateSpec layout
        if len(group) >= 2:
            src = raw_centers[group] - raw_centers[root]
            dst = centers[group] - centers[root]
            rank = np.linalg.matrix_rank(src, tol=1e-9 * np.abs(src).max())
            if rank >= 2:
                rot = _kabsch(src, dst)
            else:
                k = int(np.argmax(np.linalg.norm(src, axis=1)))
                rot = _rotation_between(src[k] / np.linalg.norm(src[k]), dst[k] / np.linalg.norm(dst[k]))
        else:
            rot = np.eye(3)
        for c in group:
            raw_centers[c] = centers[root] + rot @ (raw_centers[c] - raw_centers[root])
        for c in group:
            for d in group:
                if c < d and d not in neighbors[c]:
                    gap = np.linalg.norm(raw_centers[d] - raw_centers[c])
                    if gap < 2.0 * SQUARE_OFFSET * R + 1e-6:
                        raise TemplateError(
                            f"components {spec.components[c].name} and {spec.components[d].name} "
                            "touch in the glued layout but are not declared adjacent"
                        )
        for c in group:
            unit_rot[c] = rot

    asm = None
    for c in range(spec.component_count):
        unit = rhombicuboctahedron_assembly((0.0, 0.0, 0.0), scale[c])
        unit.vertices = unit.vertices @ unit_rot[c].T + raw_centers[c]
        asm = unit if asm is None else union(asm, unit)

    for adj in spec.adjacencies:
        R = scale[adj.a]
        d = raw_centers[adj.b] - raw_centers[adj.a]
        if abs(np.linalg.norm(d) - 2.0 * SQUARE_OFFSET * R) > 1e-6 * R:
            raise TemplateError(
                f"adjacency {spec.adjacency_name(adj)} cannot be realized by gluing rhombicuboctahedra "
                "with this center layout"
            )
        mid = raw_centers[adj.a] + 0.5 * d
        qa = asm.find_face(adj.a, mid)
        qb = asm.find_face(adj.b, mid)
        asm = fuse(asm, qa, qb, adj.label)
    return asm


# ---------------------------------------------------------------------------
# spherification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lens:
    """Circle where two overlapping spheres meet."""

    center: np.ndarray
    normal: np.ndarray  # from component a towards b
    radius: float
    e1: np.ndarray
    e2: np.ndarray

    def point(self, angle) -> np.ndarray:
        angle = np.asarray(angle)
        return self.center + self.radius * (
            np.cos(angle)[..., None] * self.e1 + np.sin(angle)[..., None] * self.e2
        )

    def angle_of(self, p: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(p) - self.center
        return np.arctan2(q @ self.e2, q @ self.e1)


def lens(spec: TemplateSpec, a: int, b: int) -> Lens:
    ca = np.asarray(spec.components[a].center, dtype=float)
    cb = np.asarray(spec.components[b].center, dtype=float)
    ra, rb = spec.components[a].radius, spec.components[b].radius
    d = np.linalg.norm(cb - ca)
    n = (cb - ca) / d
    h = (d * d + ra * ra - rb * rb) / (2.0 * d)
    rho = np.sqrt(max(ra * ra - h * h, 0.0))
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return Lens(ca + h * n, n, float(rho), e1, e2)


def _sphere_junction(spec: TemplateSpec, comps: Sequence[int], near: np.ndarray) -> np.ndarray:
    """Point lying on the spheres of all ``comps``, closest to ``near``."""
    cs = np.array([spec.components[c].center for c in comps], dtype=float)
    rs = np.array([spec.components[c].radius for c in comps], dtype=float)
    A = 2.0 * (cs[1:] - cs[0])
    rhs = (cs[1:] ** 2).sum(1) - (cs[0] ** 2).sum() - rs[1:] ** 2 + rs[0] ** 2
    x0, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    _, s, Vt = np.linalg.svd(A)
    null = Vt[np.sum(s > 1e-12 * s.max()) :]
    if len(null) != 1:
        if np.linalg.norm(A @ x0 - rhs) > 1e-9:
            raise TemplateError(f"spheres of components {list(comps)} have no common point")
        return x0
    u = null[0]
    # |x0 + t u - c0|^2 = r0^2
    w = x0 - cs[0]
    bq = 2.0 * np.dot(u, w)
    cq = np.dot(w, w) - rs[0] ** 2
    disc = bq * bq - 4.0 * cq
    if disc < -1e-9 * max(1.0, rs[0] ** 2):
        raise TemplateError(f"spheres of components {list(comps)} have no common point")
    root = np.sqrt(max(disc, 0.0))
    cands = [x0 + 0.5 * (-bq + root) * u, x0 + 0.5 * (-bq - root) * u]
    return min(cands, key=lambda p: np.linalg.norm(p - near))


def _mvc_solve(
    chart: np.ndarray, faces: np.ndarray, fixed: dict[int, np.ndarray]
) -> np.ndarray:
    """Tutte embedding with mean-value weights taken from ``chart``.

    ``chart`` holds 2D positions of all vertices referenced by ``faces``;
    vertices in ``fixed`` are pinned.  Returns the solved 2D positions.
    """
    n = len(chart)
    rows, cols, vals = [], [], []
    p = chart[faces]  # (F, 3, 2)
    for k in range(3):
        i, j, l = faces[:, k], faces[:, (k + 1) % 3], faces[:, (k + 2) % 3]
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        la, lb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
        cross = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        dot = np.einsum("ij,ij->i", a, b)
        tan_half = cross / (la * lb + dot)  # tan(theta / 2)
        rows += [i, i]
        cols += [j, l]
        vals += [tan_half / la, tan_half / lb]
    rows, cols, vals = (np.concatenate(x) for x in (rows, cols, vals))
    # w_ij as seen from vertex i (not symmetric)
    Wi = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    deg = np.asarray(Wi.sum(axis=1)).ravel()
    fixed_idx = np.array(sorted(fixed), dtype=np.int64)
    free = np.setdiff1d(np.unique(faces), fixed_idx)
    out = chart.copy()
    for i in fixed_idx:
        out[i] = fixed[int(i)]
    if len(free) == 0:
        return out
    L = sp.diags(deg) - Wi
    Lff = L[free][:, free].tocsc()
    Lfb = L[free][:, fixed_idx]
    rhs = -(Lfb @ out[fixed_idx])
    sol = spla.splu(Lff).solve(rhs)
    out[free] = sol
    return out


def _stereo(u: np.ndarray, pole: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    denom = 1.0 - u @ pole
    if np.any(denom <= 1e-12):
        raise TemplateError("exterior vertex lies at a cap center; cannot chart the component")
    return np.stack([(u @ f1) / denom, (u @ f2) / denom], axis=1)


def _unstereo(X: np.ndarray, pole, f1, f2) -> np.ndarray:
    s = (X ** 2).sum(axis=1)
    return (2.0 * X[:, :1] * f1 + 2.0 * X[:, 1:] * f2 + (s - 1.0)[:, None] * pole) / (s + 1.0)[:, None]


def spherify(mesh: LabeledSurfaceMesh, spec: TemplateSpec) -> LabeledSurfaceMesh:
    """Move vertices onto the TemplateSpec spheres, lens circles and wall disks.

    Ring vertices keep their angle around the wall axis (ring vertices shared
    by several walls go to the common point of the spheres involved, with the
    rest of the ring rotated smoothly to follow).  Wall interiors and sphere
    exteriors are laid out by a mean-value Tutte embedding in the lens plane
    and in a stereographic chart of each sphere, with weights from the
    current geometry, so re-applying the map changes nothing.

    Raises:
        TemplateError: overlap constraints violated or a face inverted.
    """
    spec.validate()
    C = spec.component_count
    if mesh.component_count != C:
        raise TemplateError("mesh and spec disagree on component count")
    V = mesh.vertices.copy()
    T, O, R = mesh.triangles, mesh.owners, mesh.region_label
    shared = O[:, 1] >= 0
    ext_vertices = [np.unique(T[(O[:, 0] == c) & ~shared]) for c in range(C)]
    in_ext = np.zeros(len(V), dtype=bool)
    for ev in ext_vertices:
        in_ext[ev] = True

    walls = {}
    ring_members: dict[int, list[int]] = {}
    for k, adj in enumerate(spec.adjacencies):
        wf = np.flatnonzero(R == adj.label)
        if len(wf) == 0:
            raise TemplateError(f"mesh has no faces for interface {spec.adjacency_name(adj)}")
        wv = np.unique(T[wf])
        ring = wv[in_ext[wv]]
        walls[k] = (wf, wv, ring)
        for v in ring:
            ring_members.setdefault(int(v), []).append(k)

    lenses = {k: lens(spec, adj.a, adj.b) for k, adj in enumerate(spec.adjacencies)}
    target = V.copy()
    pinned = np.zeros(len(V), dtype=bool)

    # junctions: vertices on several rings
    junction_pos = {}
    for v, ks in ring_members.items():
        if len(ks) > 1:
            comps = sorted({c for k in ks for c in (spec.adjacencies[k].a, spec.adjacencies[k].b)})
            junction_pos[v] = _sphere_junction(spec, comps, V[v])

    for k, adj in enumerate(spec.adjacencies):
        wf, wv, ring = walls[k]
        L = lenses[k]
        rel = V[ring] - L.center
        inplane = rel - np.outer(rel @ L.normal, L.normal)
        if np.any(np.linalg.norm(inplane, axis=1) < 1e-12):
            raise TemplateError(f"ring vertex at the axis of wall {spec.adjacency_name(adj)}")
        phi = np.arctan2(inplane @ L.e2, inplane @ L.e1)
        nodes, shifts = [], []
        for i, v in enumerate(ring):
            if int(v) in junction_pos:
                want = L.angle_of(junction_pos[int(v)])[0]
                nodes.append(phi[i])
                shifts.append(np.angle(np.exp(1j * (want - phi[i]))))
        if len(nodes) == 1:
            nodes.append(nodes[0] + np.pi)
            shifts.append(0.0)
        if nodes:
            order = np.argsort(np.mod(nodes, 2 * np.pi))
            xp = np.mod(np.asarray(nodes), 2 * np.pi)[order]
            fp = np.asarray(shifts)[order]
            delta = np.interp(np.mod(phi, 2 * np.pi), xp, fp, period=2 * np.pi)
        else:
            delta = 0.0
        target[ring] = L.point(phi + delta)
        for v in ring:
            if int(v) in junction_pos:
                target[v] = junction_pos[int(v)]
        pinned[ring] = True

        # wall interior: flat disk via Tutte embedding in the lens plane
        local = {int(v): i for i, v in enumerate(wv)}
        faces = np.vectorize(local.get)(T[wf])
        chart = np.stack([(V[wv] - L.center) @ L.e1, (V[wv] - L.center) @ L.e2], axis=1)
        fixed = {local[int(v)]: np.array([(target[v] - L.center) @ L.e1, (target[v] - L.center) @ L.e2]) for v in ring}
        sol = _mvc_solve(chart, faces, fixed)
        interior = np.array([i for i, v in enumerate(wv) if not in_ext[v]], dtype=np.int64)
        if len(interior):
            target[wv[interior]] = L.center + sol[interior, :1] * L.e1 + sol[interior, 1:] * L.e2

    for c in range(C):
        comp = spec.components[c]
        center = np.asarray(comp.center, dtype=float)
        r = comp.radius
        ef = np.flatnonzero((O[:, 0] == c) & ~shared)
        ev = ext_vertices[c]
        free = ev[~pinned[ev]]
        caps = [k for k, adj in enumerate(spec.adjacencies) if c in (adj.a, adj.b)]
        rel = V[ev] - center
        nrm = np.linalg.norm(rel, axis=1)
        if np.any(nrm < 1e-12):
            raise TemplateError(f"vertex at the center of component {comp.name}")
        u = rel / nrm[:, None]
        if not caps:
            target[ev] = center + r * u
            continue
        # chart from the center of the widest cap
        def cap_angle(k):
            L = lenses[k]
            return np.arctan2(L.radius, np.dot(L.center - center, L.normal if spec.adjacencies[k].a == c else -L.normal))

        kpole = max(caps, key=lambda k: (round(cap_angle(k), 12), -k))
        L = lenses[kpole]
        pole = L.normal if spec.adjacencies[kpole].a == c else -L.normal
        f1 = L.e1
        f2 = np.cross(pole, f1)
        local = {int(v): i for i, v in enumerate(ev)}
        faces = np.vectorize(local.get)(T[ef])
        chart = _stereo(u, pole, f1, f2)
        fixed = {}
        for v in ev[pinned[ev]]:
            tu = (target[v] - center) / r
            fixed[local[int(v)]] = _stereo(tu[None], pole, f1, f2)[0]
        sol = _mvc_solve(chart, faces, fixed)
        idx = np.array([local[int(v)] for v in free], dtype=np.int64)
        if len(idx):
            target[free] = center + r * _unstereo(sol[idx], pole, f1, f2)

    out = mesh.with_vertices(target)
    before = face_normals(mesh.vertices, T)
    after = face_normals(target, T)
    dots = np.einsum("ij,ij->i", before, after)
    bad = np.flatnonzero(~(dots > 0))
    if len(bad):
        raise TemplateError(f"face {int(bad[0])} inverted by spherification ({len(bad)} faces total)")
    return out


# ---------------------------------------------------------------------------
# public builder
# ---------------------------------------------------------------------------


def build_template(
    organ: str | TemplateSpec, subdivision_levels: int | None = None
) -> tuple[LabeledSurfaceMesh, TemplateSpec]:
    """Build a preset (``heart``, ``hippocampus``, ``lungs``) or custom template."""
    if isinstance(organ, str):
        try:
            spec = PRESETS[organ]()
        except KeyError:
            raise TemplateError(f"unknown organ {organ!r}; choose from {sorted(PRESETS)}") from None
    else:
        spec = organ
    if subdivision_levels is not None:
        spec = replace(spec, subdivision_levels=subdivision_levels)
    spec.validate()
    # spherify after every subdivision so each pass only nudges the new
    # midpoints; one big move from the polyhedron can fold the exteriors of
    # components with several walls
    mesh = spherify(raw_assembly(spec).to_mesh(), spec)
    for _ in range(spec.subdivision_levels):
        mesh = spherify(subdivide4(mesh), spec)
    try:
        validate(mesh)
    except MeshError as exc:
        raise TemplateError(f"template {spec.name} is invalid: {exc}") from exc
    return mesh, spec
