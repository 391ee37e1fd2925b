"""Labeled voxel volumes and everything derived from them.

Coordinates: voxel ``(i, j, k)`` has its center at physical position
``(i, j, k) * spacing``; :class:`VoxelMapping` sends physical positions to the
normalized frame where the longest center-to-center extent spans [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import ndimage
from skimage import measure

from .mesh import (
    LabeledSurfaceMesh,
    MeshError,
    component_surface,
    euler_characteristic,
    inside_grid,
    is_closed_manifold,
    sample_triangles,
    signed_volume,
    vertex_normals_of,
)


class VolumeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    class_table: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise VolumeError(f"labels must be a non-empty 3D array, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise VolumeError("labels must be integers")
        if labels.min() < 0:
            raise VolumeError("labels must be non-negative")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise VolumeError(f"spacing must be 3 positive numbers, got {self.spacing}")
        table = {int(k): str(v) for k, v in dict(self.class_table).items()}
        present = set(np.unique(labels).tolist()) - {0}
        missing = sorted(present - set(table))
        if missing:
            raise VolumeError(f"label ids {missing} are not in the class table")
        labels = labels.copy()
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "class_table", table)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    def class_id(self, name: str) -> int:
        for k, v in self.class_table.items():
            if v == name:
                return k
        raise VolumeError(f"class {name!r} not in class table {sorted(self.class_table.values())}")

    def mask(self, class_id: int) -> np.ndarray:
        return self.labels == class_id


@dataclass(frozen=True)
class VoxelMapping:
    """normalized = (index * spacing - center) / half_extent"""

    spacing: np.ndarray
    center: np.ndarray
    half_extent: float

    def to_normalized(self, index) -> np.ndarray:
        return (np.asarray(index, dtype=np.float64) * self.spacing - self.center) / self.half_extent

    def to_index(self, coords) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) * self.half_extent + self.center) / self.spacing

    def axis_coords(self, dims) -> list[np.ndarray]:
        return [(np.arange(n) * self.spacing[k] - self.center[k]) / self.half_extent for k, n in enumerate(dims)]

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing / self.half_extent))


def normalize_coords(volume: LabeledVolume) -> VoxelMapping:
    dims = np.array(volume.dims)
    if np.any(dims < 2):
        raise VolumeError(f"zero-extent axis: dims {tuple(dims)}")
    spacing = np.array(volume.spacing)
    extent = (dims - 1) * spacing
    return VoxelMapping(spacing, extent / 2.0, float(extent.max() / 2.0))


# ---------------------------------------------------------------------------
# surfaces
# ---------------------------------------------------------------------------


def _mc_index_space(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed, outward marching-cubes surface of a binary mask in index units."""
    padded = np.pad(mask.astype(np.float64), 1)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5, method="lewiner", allow_degenerate=False)
    # binary field -> every vertex sits at an edge midpoint; remove float noise
    verts = np.round(verts.astype(np.float64) * 2.0) / 2.0 - 1.0
    faces = faces.astype(np.int64)
    if signed_volume(verts, faces) < 0:
        faces = faces[:, ::-1].copy()
    return verts, faces


def marching_cubes(volume: LabeledVolume, class_id: int, mapping: VoxelMapping | None = None):
    """Surface of one class at isovalue 0.5, vertices in normalized coordinates."""
    mask = volume.mask(class_id)
    if not mask.any():
        raise VolumeError(f"class {class_id} has no voxels")
    verts, faces = _mc_index_space(mask)
    mapping = mapping or normalize_coords(volume)
    return mapping.to_normalized(verts), faces


def _outside_label(volume: LabeledVolume, verts_index: np.ndarray, class_id: int) -> np.ndarray:
    """Label of the non-class voxel on each marching-cubes vertex's edge."""
    lo = np.floor(verts_index).astype(np.int64)
    hi = np.ceil(verts_index).astype(np.int64)
    padded = np.pad(volume.labels, 1)
    la = padded[lo[:, 0] + 1, lo[:, 1] + 1, lo[:, 2] + 1]
    lb = padded[hi[:, 0] + 1, hi[:, 1] + 1, hi[:, 2] + 1]
    return np.where(la == class_id, lb, la)


def exterior_surface(volume: LabeledVolume, class_id: int, mapping: VoxelMapping | None = None):
    """Marching-cubes triangles of a class that face the background.

    Returns ``(vertices, triangles)``; the triangle list may be empty when the
    class is fully enclosed by other classes.
    """
    mask = volume.mask(class_id)
    if not mask.any():
        raise VolumeError(f"class {class_id} has no voxels")
    verts, faces = _mc_index_space(mask)
    outside = _outside_label(volume, verts, class_id)
    keep = np.all(outside[faces] == 0, axis=1)
    mapping = mapping or normalize_coords(volume)
    return mapping.to_normalized(verts), faces[keep]


def _interface_faces(volume: LabeledVolume, a: int, b: int):
    """Voxel faces between classes a and b: (center index coords, axis, sign a->b)."""
    for c in (a, b):
        if c not in volume.class_table:
            raise VolumeError(f"unknown class id {c}")
    L = volume.labels
    centers, axes, signs = [], [], []
    for k in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        x, y = L[tuple(lo)], L[tuple(hi)]
        fwd = np.argwhere((x == a) & (y == b))
        bwd = np.argwhere((x == b) & (y == a))
        for idx, s in ((fwd, 1.0), (bwd, -1.0)):
            c = idx.astype(np.float64)
            c[:, k] += 0.5
            centers.append(c)
            axes.append(np.full(len(c), k))
            signs.append(np.full(len(c), s))
    centers = np.concatenate(centers)
    axes = np.concatenate(axes)
    signs = np.concatenate(signs)
    order = np.lexsort((centers[:, 2], centers[:, 1], centers[:, 0]))
    return centers[order], axes[order], signs[order]


def interface_points(volume: LabeledVolume, a: int, b: int, mapping: VoxelMapping | None = None):
    """Centers of voxel faces separating classes a and b, with unit normals a -> b."""
    centers, axes, signs = _interface_faces(volume, a, b)
    mapping = mapping or normalize_coords(volume)
    normals = np.zeros((len(centers), 3))
    normals[np.arange(len(centers)), axes] = signs
    return mapping.to_normalized(centers), normals


def interface_surface(volume: LabeledVolume, a: int, b: int, mapping: VoxelMapping | None = None):
    """The a|b voxel faces as a triangle soup (2 triangles per face, wound a -> b)."""
    centers, axes, signs = _interface_faces(volume, a, b)
    n = len(centers)
    corners = np.zeros((n, 4, 3))
    for i, (u, v) in enumerate(((1, 2), (2, 0), (0, 1))):
        sel = axes == i
        for q, (du, dv) in enumerate(((-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5))):
            corners[sel, q] = centers[sel]
            corners[sel, q, u] += du
            corners[sel, q, v] += dv
    flip = signs < 0
    corners[flip] = corners[flip][:, ::-1]
    mapping = mapping or normalize_coords(volume)
    verts = mapping.to_normalized(corners.reshape(-1, 3))
    base = 4 * np.arange(n)[:, None]
    tris = np.concatenate([base + [0, 1, 2], base + [0, 2, 3]], axis=1).reshape(-1, 3)
    return verts, tris


# ---------------------------------------------------------------------------
# fitting targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegionTarget:
    """Target samples for one supervised region.

    ``points``/``normals`` are the extracted reference points; ``sample``
    draws area-uniform points from the underlying triangle soup.
    """

    points: np.ndarray
    normals: np.ndarray
    vertices: np.ndarray
    triangles: np.ndarray
    provenance: str

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if len(self.triangles) == 0:
            return self.points
        return sample_triangles(self.vertices, self.triangles, n, rng)[0]

    def sample_with_normals(self, n: int, rng: np.random.Generator):
        if self.provenance == "interface-faces":
            return sample_triangles(self.vertices, self.triangles, n, rng)
        vn = vertex_normals_of(self.vertices, self.triangles)
        return sample_triangles(self.vertices, self.triangles, n, rng, normals=vn)


def _surface_target(verts, tris, provenance) -> RegionTarget:
    if len(tris) == 0:
        z = np.zeros((0, 3))
        return RegionTarget(z, z, verts, tris, provenance)
    used = np.unique(tris)
    if provenance == "interface-faces":
        # one reference point per voxel face: the center of its two triangles
        quad = tris.reshape(-1, 2, 3)[:, 0]
        pts = 0.5 * (verts[quad[:, 0]] + verts[quad[:, 2]])
        e1 = verts[quad[:, 1]] - verts[quad[:, 0]]
        e2 = verts[quad[:, 2]] - verts[quad[:, 0]]
        nrm = np.cross(e1, e2)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return RegionTarget(pts, nrm, verts, tris, provenance)
    vn = vertex_normals_of(verts, tris)
    return RegionTarget(verts[used], vn[used], verts, tris, provenance)


class RegionPointCloud(dict):
    """Supervised key -> :class:`RegionTarget`."""

    def require(self, keys) -> None:
        for k in keys:
            t = self.get(k)
            if t is None or len(t.points) == 0:
                raise VolumeError(f"supervised region {k} has no target points")


def component_classes(volume: LabeledVolume, spec) -> list[int]:
    """Class id in the volume for each template component (matched by name)."""
    out = []
    for comp in spec.components:
        try:
            cid = volume.class_id(comp.name)
        except VolumeError:
            raise VolumeError(f"volume has no class for component {comp.name!r}") from None
        if not volume.mask(cid).any():
            raise VolumeError(f"class {comp.name!r} is empty in the volume")
        out.append(cid)
    return out


def extract_targets(
    volume: LabeledVolume, spec, supervised=None, shared_surface_supervision: bool = True
) -> RegionPointCloud:
    """Per-region targets keyed like :func:`energy.supervision_groups`.

    Exteriors come from marching cubes (triangles facing background),
    interfaces from voxel faces between the two classes.  Without
    shared-surface supervision each component gets its whole class surface.
    """
    mapping = normalize_coords(volume)
    classes = component_classes(volume, spec)
    out = RegionPointCloud()
    if not shared_surface_supervision:
        for c, cid in enumerate(classes):
            if supervised is None or c in supervised:
                v, t = marching_cubes(volume, cid, mapping)
                out[c] = _surface_target(v, t, "marching-cubes")
        return out
    labels = supervised if supervised is not None else spec.supervised_regions()
    for lab in labels:
        region = spec.region(lab)
        if region.is_interface:
            a, b = region.owners
            v, t = interface_surface(volume, classes[a], classes[b], mapping)
            out[lab] = _surface_target(v, t, "interface-faces")
        else:
            v, t = exterior_surface(volume, classes[region.owners[0]], mapping)
            out[lab] = _surface_target(v, t, "marching-cubes")
    out.require(labels)
    return out


# ---------------------------------------------------------------------------
# voxelization and cavities
# ---------------------------------------------------------------------------


def voxelize(vertices: np.ndarray, triangles: np.ndarray, dims, mapping: VoxelMapping) -> np.ndarray:
    """Voxels whose centers lie inside a closed surface given in normalized coordinates."""
    if not is_closed_manifold(triangles):
        raise MeshError("voxelize needs a closed surface")
    xs, ys, zs = mapping.axis_coords(dims)
    return inside_grid(vertices, triangles, xs, ys, zs)


def voxelize_mesh(mesh: LabeledSurfaceMesh, dims, mapping: VoxelMapping) -> list[np.ndarray]:
    """One voxel mask per component."""
    return [voxelize(*component_surface(mesh, c), dims, mapping) for c in range(mesh.component_count)]


def label_grid(masks, class_ids=None) -> np.ndarray:
    """Stack component masks into a label grid (later components win ties)."""
    out = np.zeros(masks[0].shape, dtype=np.uint16)
    for i, m in enumerate(masks):
        out[m] = (class_ids[i] if class_ids is not None else i + 1)
    return out


def enclosed_gaps(grid: np.ndarray) -> int:
    """Background components (6-connected) that do not touch the grid border."""
    background = ~(np.asarray(grid) > 0)
    lab, n = ndimage.label(background)
    if n == 0:
        return 0
    border = np.zeros(n + 1, dtype=bool)
    for k in range(3):
        for sl in (0, -1):
            idx = [slice(None)] * 3
            idx[k] = sl
            border[np.unique(lab[tuple(idx)])] = True
    border[0] = True
    return int(n + 1 - border.sum())


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------


PHANTOM_TEMPLATES = {"two-lobe": "hippocampus", "four-chamber": "heart", "five-lobe": "lungs"}
# radial perturbation amplitude (fraction of the radius)
_PHANTOM_AMPLITUDE = {"two-lobe": 0.15, "four-chamber": 0.08, "five-lobe": 0.12}


@dataclass(frozen=True)
class PhantomTruth:
    """Analytic description: blob c is ``|x - c| < r_c * (1 + g_c(u))``."""

    names: tuple[str, ...]
    centers: np.ndarray
    radii: np.ndarray
    linear: np.ndarray  # (C, 3)
    quadratic: np.ndarray  # (C, 3, 3), symmetric

    def radial_factor(self, c: int, u: np.ndarray) -> np.ndarray:
        return 1.0 + u @ self.linear[c] + np.einsum("ni,ij,nj->n", u, self.quadratic[c], u)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        """(N, C) approximate signed distance to each blob (negative inside)."""
        x = np.atleast_2d(x)
        out = np.empty((len(x), len(self.radii)))
        for c in range(len(self.radii)):
            d = x - self.centers[c]
            r = np.linalg.norm(d, axis=1)
            u = d / np.maximum(r, 1e-300)[:, None]
            out[:, c] = r - self.radii[c] * self.radial_factor(c, u)
        return out

    def label(self, x: np.ndarray) -> np.ndarray:
        sd = self.signed_distance(x)
        best = np.argmin(sd, axis=1)
        inside = sd[np.arange(len(x)), best] < 0
        return np.where(inside, best + 1, 0)


def make_phantom(kind: str, dims=64, seed: int = 0) -> tuple[LabeledVolume, PhantomTruth]:
    """Overlapping perturbed spheres laid out like the matching template preset.

    Class ids are 1..C in template component order and carry the component
    names, so targets can be extracted against the preset template.
    """
    from .template import PRESETS

    if kind not in PHANTOM_TEMPLATES:
        raise VolumeError(f"unknown phantom {kind!r}; choose from {sorted(PHANTOM_TEMPLATES)}")
    dims = (int(dims),) * 3 if np.isscalar(dims) else tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 32:
        raise VolumeError(f"phantom dims must be >= 32 per axis to resolve interfaces, got {dims}")
    spec = PRESETS[PHANTOM_TEMPLATES[kind]]()
    rng = np.random.default_rng(seed)
    C = spec.component_count
    names = tuple(c.name for c in spec.components)
    centers = np.array([c.center for c in spec.components], dtype=float)
    radii = np.array([c.radius for c in spec.components], dtype=float)
    amp = _PHANTOM_AMPLITUDE[kind]

    centers = centers + rng.uniform(-0.02, 0.02, size=centers.shape) * radii[:, None]
    linear = np.zeros((C, 3))
    quad = np.zeros((C, 3, 3))
    for c in range(C):
        a = rng.uniform(0.5, 1.0) * amp
        b = rng.normal(size=3)
        S = rng.normal(size=(3, 3))
        S = 0.5 * (S + S.T)
        S -= np.trace(S) / 3.0 * np.eye(3)  # keep the mean radius
        w = rng.uniform(0.2, 0.8)
        linear[c] = a * w * b / np.linalg.norm(b)
        quad[c] = a * (1.0 - w) * S / np.abs(np.linalg.eigvalsh(S)).max()

    # fit the layout (with its largest possible radii) into [-0.8, 0.8]
    rmax = radii * (1.0 + amp)
    lo = (centers - rmax[:, None]).min(axis=0)
    hi = (centers + rmax[:, None]).max(axis=0)
    scale = 1.6 / (hi - lo).max()
    mid = 0.5 * (lo + hi)
    truth = PhantomTruth(names, (centers - mid) * scale, radii * scale, linear, quad)

    volume_spacing = (1.0, 1.0, 1.0)
    probe = LabeledVolume(np.zeros(dims, dtype=np.uint8), volume_spacing, {})
    mapping = normalize_coords(probe)
    xs, ys, zs = mapping.axis_coords(dims)
    grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    labels = truth.label(grid).reshape(dims).astype(np.uint8)
    table = {c + 1: names[c] for c in range(C)}
    return LabeledVolume(labels, volume_spacing, table), truth


def template_volume(mesh: LabeledSurfaceMesh, spec, dims=96, fill: float = 0.8) -> LabeledVolume:
    """Voxelize a template, scaled to span ``[-fill, fill]``, into a label volume.

    Class ids are 1..C in component order and carry the component names.
    """
    dims = (int(dims),) * 3 if np.isscalar(dims) else tuple(int(d) for d in dims)
    if not 0 < fill <= 1:
        raise VolumeError(f"fill must be in (0, 1], got {fill}")
    v = mesh.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    placed = mesh.with_vertices((v - 0.5 * (lo + hi)) * (2.0 * fill / (hi - lo).max()))
    probe = LabeledVolume(np.zeros(dims, dtype=np.uint8))
    masks = voxelize_mesh(placed, dims, normalize_coords(probe))
    table = {c + 1: comp.name for c, comp in enumerate(spec.components)}
    return LabeledVolume(label_grid(masks), (1.0, 1.0, 1.0), table)
