"""Evaluation metrics: Chamfer, normal consistency, Dice, overlap and gaps."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import ndimage

from .energy import chamfer_points, nearest
from .mesh import (
    LabeledSurfaceMesh,
    MeshError,
    component_surface,
    inside_grid,
    is_closed_manifold,
    sample_surface,
    sample_triangles,
    select_faces,
    vertex_normals_of,
)
from .volume import (
    LabeledVolume,
    RegionTarget,
    component_classes,
    enclosed_gaps,
    extract_targets,
    label_grid,
    normalize_coords,
    voxelize_mesh,
)

DEFAULT_SAMPLES = 1_048_576
CD_UNIT = 1e-3


def _as_samples(obj, n: int, rng: np.random.Generator, with_normals: bool = False):
    """Points (and normals) from a point array, a RegionTarget or a (V, T) surface."""
    if isinstance(obj, RegionTarget):
        if with_normals:
            return obj.sample_with_normals(n, rng)
        return obj.sample(n, rng), None
    if isinstance(obj, tuple) and len(obj) == 2:
        verts, tris = obj
        if len(tris) == 0:
            raise MeshError("empty surface")
        normals = vertex_normals_of(verts, tris) if with_normals else None
        return sample_triangles(np.asarray(verts, float), np.asarray(tris), n, rng, normals)
    pts = np.asarray(obj, dtype=np.float64)
    return pts, None


def chamfer_metric(pred, gt, n: int = DEFAULT_SAMPLES, seed: int = 0) -> float:
    """Symmetric squared Chamfer in units of 1e-3 (raw / 1e-3)."""
    rng = np.random.default_rng(seed)
    p, _ = _as_samples(pred, n, rng)
    q, _ = _as_samples(gt, n, rng)
    if len(p) == 0 or len(q) == 0:
        raise MeshError("chamfer_metric needs two non-empty point sets")
    value, _ = chamfer_points(p, q)
    return value / CD_UNIT


def _nc_from_match(pn, qn, iq, ip) -> float:
    a = np.abs(np.einsum("ij,ij->i", pn, qn[iq])).mean()
    b = np.abs(np.einsum("ij,ij->i", qn, pn[ip])).mean()
    return float(min(1.0, 0.5 * (a + b)))


def normal_consistency_points(p, pn, q, qn) -> float:
    if len(p) == 0 or len(q) == 0:
        raise MeshError("normal_consistency needs two non-empty surfaces")
    return _nc_from_match(pn, qn, nearest(q, p), nearest(p, q))


def chamfer_and_nc_points(p, pn, q, qn) -> tuple[float, float]:
    """(CD in 1e-3 units, NC) sharing one nearest-neighbour matching."""
    if len(p) == 0 or len(q) == 0:
        raise MeshError("chamfer/normal consistency need two non-empty point sets")
    iq, ip = nearest(q, p), nearest(p, q)
    cd = ((p - q[iq]) ** 2).sum(axis=1).mean() + ((p[ip] - q) ** 2).sum(axis=1).mean()
    return float(cd) / CD_UNIT, _nc_from_match(pn, qn, iq, ip)


def normal_consistency(pred, gt, n: int = DEFAULT_SAMPLES, seed: int = 0) -> float:
    """Mean |cos| between matched interpolated normals, symmetrized."""
    rng = np.random.default_rng(seed)
    p, pn = _as_samples(pred, n, rng, with_normals=True)
    q, qn = _as_samples(gt, n, rng, with_normals=True)
    return normal_consistency_points(p, pn, q, qn)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def intersection_volume_with_tolerance(surfaces, resolution: int = 256) -> tuple[float, float]:
    """Pairwise overlap ratio plus the grid tolerance it should be judged by.

    The tolerance is ``2 * boundary_cells / union_cells``, where boundary
    cells are the inside cells of each component with a 6-neighbour outside
    it (summed over components).
    """
    surfaces = list(surfaces)
    for i, (v, t) in enumerate(surfaces):
        if not is_closed_manifold(t):
            raise MeshError(f"surface {i} is not closed")
    allv = np.concatenate([np.asarray(v) for v, _ in surfaces])
    lo, hi = allv.min(axis=0), allv.max(axis=0)
    axes = [lo[k] + (np.arange(resolution) + 0.5) * (hi[k] - lo[k]) / resolution for k in range(3)]
    masks = [inside_grid(np.asarray(v, float), np.asarray(t), *axes) for v, t in surfaces]
    union = np.zeros_like(masks[0])
    for m in masks:
        union |= m
    nu = int(union.sum())
    if nu == 0:
        return 0.0, 0.0
    inter = sum(int((masks[i] & masks[j]).sum()) for i, j in combinations(range(len(masks)), 2))
    boundary = sum(int((m & ~ndimage.binary_erosion(m, border_value=0)).sum()) for m in masks)
    return inter / nu, 2.0 * boundary / nu


def intersection_volume(surfaces, resolution: int = 256) -> float:
    """Sum of pairwise overlap volumes divided by the union volume.

    ``surfaces`` is a list of closed ``(vertices, triangles)``; volumes are
    counted on a cell-centered grid over the union bounding box.
    """
    return intersection_volume_with_tolerance(surfaces, resolution)[0]


def unwanted_gaps(grid_or_masks) -> int:
    """Enclosed background cavities in the foreground union."""
    if isinstance(grid_or_masks, (list, tuple)):
        union = np.zeros(np.shape(grid_or_masks[0]), dtype=bool)
        for m in grid_or_masks:
            union |= np.asarray(m, dtype=bool)
        return enclosed_gaps(union)
    return enclosed_gaps(np.asarray(grid_or_masks))


@dataclass
class EvalReport:
    chamfer: dict[str, float] = field(default_factory=dict)
    normal_consistency: dict[str, float] = field(default_factory=dict)
    dice: dict[str, float] = field(default_factory=dict)
    intersection_volume_ratio: float = 0.0
    gap_count: int = 0
    samples: int = 0
    seed: int = 0

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for name, table in (("chamfer", self.chamfer), ("normal_consistency", self.normal_consistency), ("dice", self.dice)):
            for region, value in table.items():
                out.append((region, name, value))
        out.append(("all", "intersection_volume_ratio", self.intersection_volume_ratio))
        out.append(("all", "gap_count", self.gap_count))
        return out

    def to_text(self) -> str:
        return "".join(f"{r}\t{m}\t{v!r}\n" for r, m, v in self.rows())

    def to_dict(self) -> dict:
        return {
            "chamfer_x1e-3": dict(self.chamfer),
            "normal_consistency": dict(self.normal_consistency),
            "dice": dict(self.dice),
            "intersection_volume_ratio": self.intersection_volume_ratio,
            "gap_count": self.gap_count,
            "samples": self.samples,
            "seed": self.seed,
        }


def evaluate_mesh(
    mesh: LabeledSurfaceMesh,
    spec,
    gt: LabeledVolume,
    n: int = DEFAULT_SAMPLES,
    seed: int = 0,
    resolution: int = 256,
) -> EvalReport:
    """All metrics for a fitted mesh against a labeled volume."""
    rep = EvalReport(samples=n, seed=seed)
    targets = extract_targets(gt, spec)
    rng = np.random.default_rng(seed)
    for lab in sorted(targets):
        name = spec.region(lab).name
        ps = sample_surface(mesh, lab, n, rng)
        q, qn = targets[lab].sample_with_normals(n, rng)
        rep.chamfer[name], rep.normal_consistency[name] = chamfer_and_nc_points(ps.points, ps.normals, q, qn)
    mapping = normalize_coords(gt)
    masks = voxelize_mesh(mesh, gt.dims, mapping)
    for c, cid in enumerate(component_classes(gt, spec)):
        rep.dice[spec.components[c].name] = dice(masks[c], gt.labels == cid)
    rep.intersection_volume_ratio = intersection_volume(
        [component_surface(mesh, c) for c in range(mesh.component_count)], resolution
    )
    rep.gap_count = unwanted_gaps(masks)
    return rep


def evaluate_volume(pred: LabeledVolume, gt: LabeledVolume, spec, n: int = DEFAULT_SAMPLES, seed: int = 0) -> EvalReport:
    """Metrics for a label-map prediction (surfaces from marching cubes)."""
    if pred.dims != gt.dims:
        raise ValueError(f"volume dims differ: {pred.dims} vs {gt.dims}")
    rep = EvalReport(samples=n, seed=seed)
    tp, tg = extract_targets(pred, spec), extract_targets(gt, spec)
    rng = np.random.default_rng(seed)
    for lab in sorted(tg):
        name = spec.region(lab).name
        p, pn = tp[lab].sample_with_normals(n, rng)
        q, qn = tg[lab].sample_with_normals(n, rng)
        rep.chamfer[name], rep.normal_consistency[name] = chamfer_and_nc_points(p, pn, q, qn)
    pc, gc = component_classes(pred, spec), component_classes(gt, spec)
    for c in range(spec.component_count):
        rep.dice[spec.components[c].name] = dice(pred.labels == pc[c], gt.labels == gc[c])
    rep.intersection_volume_ratio = 0.0  # a label map cannot overlap itself
    rep.gap_count = enclosed_gaps(pred.labels)
    return rep
