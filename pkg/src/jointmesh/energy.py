"""Fitting energy: per-region Chamfer matching plus mesh regularizers.

Every term returns ``(value, gradient)`` with the gradient taken with respect
to the vertex array, shape ``(V, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import LabeledSurfaceMesh, MeshError, SurfaceSamples, draw_barycentric, face_areas, unique_edges


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyWeights:
    lambda_edge: float = 0.1
    lambda_edgeunif: float = 0.1
    # the normal term is a sum over face pairs while the other terms are
    # means, so at 0.1 it outweighs the match term and flattens fits
    lambda_norm: float = 1e-4
    lambda_lapl: float = 0.1
    lambda_match: float = 1.0
    lambda_reg: float = 1.0
    chamfer_samples_per_region: int = 2000
    # None -> every region the template marks as supervised
    supervised: tuple[int, ...] | None = None
    # False -> supervise whole component surfaces only; walls then count
    # towards both of their components
    shared_surface_supervision: bool = True

    def __post_init__(self):
        for name in ("lambda_edge", "lambda_edgeunif", "lambda_norm", "lambda_lapl", "lambda_match", "lambda_reg"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise EnergyError(f"{name} must be finite and >= 0, got {v}")
        if int(self.chamfer_samples_per_region) < 1:
            raise EnergyError("chamfer_samples_per_region must be >= 1")
        if self.supervised is not None:
            object.__setattr__(self, "supervised", tuple(int(s) for s in self.supervised))


@dataclass
class EnergyBreakdown:
    chamfer: dict[int, float]
    match: float
    edge: float
    edge_unif: float
    norm: float
    lapl: float
    reg: float
    total: float
    gradient: np.ndarray = field(repr=False)

    def scalars(self) -> dict:
        return {
            "total": self.total,
            "match": self.match,
            "reg": self.reg,
            "edge": self.edge,
            "edge_unif": self.edge_unif,
            "norm": self.norm,
            "lapl": self.lapl,
            "chamfer": {int(k): float(v) for k, v in self.chamfer.items()},
        }


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------


def nearest(tree_points: np.ndarray, query: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Index of the nearest point; exact distance ties go to the lower index."""
    if tree is None:
        tree = cKDTree(tree_points)
    k = min(2, len(tree_points))
    _, idx = tree.query(query, k=k)
    if k == 1:
        return np.asarray(idx, dtype=np.int64).reshape(-1)
    d0 = ((query - tree_points[idx[:, 0]]) ** 2).sum(axis=1)
    d1 = ((query - tree_points[idx[:, 1]]) ** 2).sum(axis=1)
    best = idx[:, 0].copy()
    swap = (d1 < d0) | ((d1 == d0) & (idx[:, 1] < idx[:, 0]))
    best[swap] = idx[swap, 1]
    return best


def chamfer_points(p: np.ndarray, q: np.ndarray, name=None) -> tuple[float, np.ndarray]:
    """Symmetric squared Chamfer distance and its gradient w.r.t. ``p``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if len(p) == 0 or len(q) == 0:
        which = "prediction" if len(p) == 0 else "target"
        label = f" for region {name}" if name is not None else ""
        raise EnergyError(f"empty {which} point set{label}")
    if not (np.isfinite(p).all() and np.isfinite(q).all()):
        # let the caller decide; the tree cannot index non-finite points
        return float("nan"), np.full_like(p, np.nan)
    iq = nearest(q, p)
    ip = nearest(p, q)
    dpq = p - q[iq]
    dqp = p[ip] - q
    value = float((dpq ** 2).sum(axis=1).mean() + (dqp ** 2).sum(axis=1).mean())
    grad = 2.0 * dpq / len(p)
    back = 2.0 * dqp / len(q)
    for d in range(3):
        grad[:, d] += np.bincount(ip, weights=back[:, d], minlength=len(p))
    return value, grad


def scatter_to_vertices(
    point_grad: np.ndarray, triangles: np.ndarray, face: np.ndarray, bary: np.ndarray, n_vertices: int
) -> np.ndarray:
    """Chain point gradients onto mesh vertices through barycentric provenance."""
    out = np.zeros((n_vertices, 3))
    tri = triangles[face]
    for k in range(3):
        w = bary[:, k : k + 1] * point_grad
        for d in range(3):
            out[:, d] += np.bincount(tri[:, k], weights=w[:, d], minlength=n_vertices)
    return out


def chamfer_region(
    pred: SurfaceSamples, target, mesh: LabeledSurfaceMesh | None = None
) -> tuple[float, np.ndarray]:
    """Chamfer between mesh samples and a target cloud.

    ``target`` is an (N, 3) array or anything with a ``points`` attribute.
    Returns the gradient on the sample points, or on the mesh vertices when
    ``mesh`` is given.
    """
    q = getattr(target, "points", target)
    value, g = chamfer_points(pred.points, q, name=pred.region)
    if mesh is None:
        return value, g
    return value, scatter_to_vertices(g, mesh.triangles, pred.face, pred.bary, mesh.n_vertices)


# ---------------------------------------------------------------------------
# regularizers (vertices + cached combinatorics)
# ---------------------------------------------------------------------------


def _edge_vectors(vertices, edges):
    d = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    length = np.linalg.norm(d, axis=1)
    return d, length


def _edge_grad(vertices, edges, d, coef):
    """Gradient of sum_e coef_e * |e| on the vertices."""
    V = len(vertices)
    g = d * coef[:, None]
    out = np.zeros((V, 3))
    for k in range(3):
        out[:, k] = np.bincount(edges[:, 1], weights=g[:, k], minlength=V) - np.bincount(
            edges[:, 0], weights=g[:, k], minlength=V
        )
    return out


def edge_term(vertices: np.ndarray, edges: np.ndarray) -> tuple[float, np.ndarray]:
    if len(edges) < 1:
        raise EnergyError("edge loss needs at least one edge")
    d, length = _edge_vectors(vertices, edges)
    E = len(edges)
    return float(length.mean()), _edge_grad(vertices, edges, d, 1.0 / (length * E))


def edge_unif_term(vertices: np.ndarray, edges: np.ndarray) -> tuple[float, np.ndarray]:
    E = len(edges)
    if E < 2:
        raise EnergyError("edge uniformity loss needs at least two edges")
    d, length = _edge_vectors(vertices, edges)
    dev = length - length.mean()
    sigma = float(np.sqrt((dev ** 2).sum() / (E - 1)))
    if sigma == 0.0:
        return 0.0, np.zeros_like(vertices)
    return sigma, _edge_grad(vertices, edges, d, dev / (sigma * (E - 1) * length))


def normal_pairs(mesh: LabeledSurfaceMesh) -> tuple[np.ndarray, np.ndarray]:
    """Adjacent face pairs on the component surfaces, each counted once.

    Returns ``(pairs (P, 2), sign (P,))``: ``sign`` is -1 when the two faces
    have opposite stored orientation in their shared component (a wall seen
    from its second owner next to that owner's exterior).
    """
    T, O = mesh.triangles, mesh.owners
    edges, face_edges = unique_edges(T)
    seen = {}
    for c in range(mesh.component_count):
        faces = np.flatnonzero((O[:, 0] == c) | (O[:, 1] == c))
        flip = np.where(O[faces, 1] == c, -1, 1)
        fe = face_edges[faces]  # (n, 3)
        eid = fe.ravel()
        owner = np.repeat(np.arange(len(faces)), 3)
        order = np.argsort(eid, kind="stable")
        eid, owner = eid[order], owner[order]
        starts = np.flatnonzero(np.r_[True, eid[1:] != eid[:-1]])
        counts = np.diff(np.r_[starts, len(eid)])
        if np.any(counts != 2):
            raise MeshError(f"component {c} surface is not a closed 2-manifold")
        a, b = owner[starts], owner[starts + 1]
        fa, fb = faces[a], faces[b]
        sgn = flip[a] * flip[b]
        for x, y, s in zip(fa.tolist(), fb.tolist(), sgn.tolist()):
            key = (x, y) if x < y else (y, x)
            if key not in seen:
                seen[key] = s
    if not seen:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    keys = sorted(seen)
    return np.array(keys, dtype=np.int64), np.array([seen[k] for k in keys], dtype=np.float64)


def norm_term(
    vertices: np.ndarray, triangles: np.ndarray, pairs: np.ndarray, sign: np.ndarray
) -> tuple[float, np.ndarray]:
    p = vertices[triangles]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = np.cross(a, b)
    cn = np.linalg.norm(c, axis=1)
    if np.any(cn <= 0):
        raise EnergyError("degenerate face in normal loss")
    n = c / cn[:, None]
    f, g = pairs[:, 0], pairs[:, 1]
    dots = np.einsum("ij,ij->i", n[f], n[g])
    value = float((1.0 - sign * dots).sum())
    # dL/dn
    Gn = np.zeros_like(n)
    for k in range(3):
        Gn[:, k] = np.bincount(f, weights=-sign * n[g, k], minlength=len(n)) + np.bincount(
            g, weights=-sign * n[f, k], minlength=len(n)
        )
    # through the normalization onto the raw cross product
    Gc = (Gn - n * np.einsum("ij,ij->i", n, Gn)[:, None]) / cn[:, None]
    g1 = np.cross(b, Gc)
    g2 = np.cross(Gc, a)
    g0 = -(g1 + g2)
    V = len(vertices)
    out = np.zeros((V, 3))
    for k, gk in enumerate((g0, g1, g2)):
        for d in range(3):
            out[:, d] += np.bincount(triangles[:, k], weights=gk[:, d], minlength=V)
    return value, out


def laplacian_operator(edges: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    """Uniform Laplacian ``I - D^-1 A`` over the full edge set."""
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    A = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(n_vertices, n_vertices)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise EnergyError(f"vertex {int(np.flatnonzero(deg == 0)[0])} has no neighbors")
    return (sp.identity(n_vertices, format="csr") - sp.diags(1.0 / deg) @ A).tocsr()


def lapl_term(vertices: np.ndarray, lap: sp.csr_matrix) -> tuple[float, np.ndarray]:
    u = lap @ vertices
    mag = np.linalg.norm(u, axis=1)
    V = len(vertices)
    unit = np.zeros_like(u)
    nz = mag > 0
    unit[nz] = u[nz] / mag[nz, None]
    return float(mag.sum() / V), (lap.T @ unit) / V


# public per-mesh wrappers


def edge_loss(mesh: LabeledSurfaceMesh) -> tuple[float, np.ndarray]:
    return edge_term(mesh.vertices, mesh.edges)


def edge_unif_loss(mesh: LabeledSurfaceMesh) -> tuple[float, np.ndarray]:
    return edge_unif_term(mesh.vertices, mesh.edges)


def norm_loss(mesh: LabeledSurfaceMesh) -> tuple[float, np.ndarray]:
    if mesh.n_faces < 2:
        raise EnergyError("normal loss needs at least two faces")
    pairs, sign = normal_pairs(mesh)
    return norm_term(mesh.vertices, mesh.triangles, pairs, sign)


def laplacian_loss(mesh: LabeledSurfaceMesh) -> tuple[float, np.ndarray]:
    return lapl_term(mesh.vertices, laplacian_operator(mesh.edges, mesh.n_vertices))


def reg_loss(mesh: LabeledSurfaceMesh, weights: EnergyWeights) -> tuple[float, np.ndarray]:
    total, grad = 0.0, np.zeros((mesh.n_vertices, 3))
    for lam, term in (
        (weights.lambda_edge, edge_loss),
        (weights.lambda_edgeunif, edge_unif_loss),
        (weights.lambda_norm, norm_loss),
        (weights.lambda_lapl, laplacian_loss),
    ):
        if lam:
            v, g = term(mesh)
            total += lam * v
            grad += lam * g
    return total, grad


# ---------------------------------------------------------------------------
# stage energy with cached topology
# ---------------------------------------------------------------------------


@dataclass
class Draw:
    """Sample set for one energy evaluation: prediction provenance + targets."""

    pred: dict[int, tuple[np.ndarray, np.ndarray]]  # region -> (face, bary)
    target: dict[int, np.ndarray]  # region -> points


def supervision_groups(mesh: LabeledSurfaceMesh, spec, weights: EnergyWeights) -> dict[int, np.ndarray]:
    """Map supervised target key -> prediction face ids.

    With shared-surface supervision every region is its own key.  Without
    it, key ``c`` covers all faces of component ``c`` (walls included).
    """
    if weights.shared_surface_supervision:
        labels = weights.supervised if weights.supervised is not None else tuple(spec.supervised_regions())
        out = {}
        for lab in labels:
            faces = np.flatnonzero(mesh.region_label == lab)
            if len(faces) == 0:
                raise EnergyError(f"supervised region {lab} has no mesh faces")
            out[int(lab)] = faces
        return out
    comps = range(mesh.component_count)
    if weights.supervised is not None:
        comps = [c for c in comps if c in weights.supervised]
    return {c: np.flatnonzero((mesh.owners[:, 0] == c) | (mesh.owners[:, 1] == c)) for c in comps}


class MeshEnergy:
    """Stage energy for a fixed mesh topology.

    ``targets`` maps each supervised key to an object with ``points`` and an
    optional ``sample(n, rng)`` method (see ``volume.RegionTarget``).
    """

    def __init__(self, mesh: LabeledSurfaceMesh, spec, targets: Mapping, weights: EnergyWeights):
        self.triangles = mesh.triangles
        self.n_vertices = mesh.n_vertices
        self.weights = weights
        self.edges = mesh.edges
        self.groups = supervision_groups(mesh, spec, weights)
        for key in self.groups:
            t = targets.get(key)
            if t is None or len(getattr(t, "points", t)) == 0:
                raise EnergyError(f"supervised region {key} has no target points")
        self.targets = targets
        self.pairs, self.sign = normal_pairs(mesh) if weights.lambda_norm else (None, None)
        self.lap = laplacian_operator(self.edges, self.n_vertices) if weights.lambda_lapl else None

    def draw(self, vertices: np.ndarray, seed) -> Draw:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n = int(self.weights.chamfer_samples_per_region)
        pred, target = {}, {}
        for key in sorted(self.groups):
            faces = self.groups[key]
            pick, bary = draw_barycentric(face_areas(vertices, self.triangles[faces]), n, rng)
            pred[key] = (faces[pick], bary)
            t = self.targets[key]
            target[key] = t.sample(n, rng) if hasattr(t, "sample") else np.asarray(getattr(t, "points", t))
        return Draw(pred, target)

    def match(self, vertices: np.ndarray, draw: Draw) -> tuple[dict[int, float], float, np.ndarray]:
        per, grad = {}, np.zeros((self.n_vertices, 3))
        for key in sorted(self.groups):
            face, bary = draw.pred[key]
            pts = np.einsum("nk,nkd->nd", bary, vertices[self.triangles[face]])
            value, g = chamfer_points(pts, draw.target[key], name=key)
            per[key] = value
            grad += scatter_to_vertices(g, self.triangles, face, bary, self.n_vertices)
        return per, float(sum(per[k] for k in sorted(per))), grad

    def regularizers(self, vertices: np.ndarray):
        w = self.weights
        zero = (0.0, None)
        e = edge_term(vertices, self.edges) if w.lambda_edge else zero
        u = edge_unif_term(vertices, self.edges) if w.lambda_edgeunif else zero
        n = norm_term(vertices, self.triangles, self.pairs, self.sign) if w.lambda_norm else zero
        l = lapl_term(vertices, self.lap) if w.lambda_lapl else zero
        return e, u, n, l

    def evaluate(self, vertices: np.ndarray, draw: Draw) -> EnergyBreakdown:
        w = self.weights
        vertices = np.asarray(vertices, dtype=np.float64)
        if w.lambda_match:
            per, match, gm = self.match(vertices, draw)
        else:
            per, match, gm = {}, 0.0, np.zeros((self.n_vertices, 3))
        (e, ge), (u, gu), (n, gn), (l, gl) = self.regularizers(vertices)
        reg = w.lambda_edge * e + w.lambda_edgeunif * u + w.lambda_norm * n + w.lambda_lapl * l
        greg = np.zeros((self.n_vertices, 3))
        for lam, g in ((w.lambda_edge, ge), (w.lambda_edgeunif, gu), (w.lambda_norm, gn), (w.lambda_lapl, gl)):
            if lam:
                greg += lam * g
        total = w.lambda_match * match + w.lambda_reg * reg
        grad = w.lambda_match * gm + w.lambda_reg * greg
        return EnergyBreakdown(per, match, e, u, n, l, reg, total, grad)


def match_loss(mesh: LabeledSurfaceMesh, spec, targets: Mapping, weights: EnergyWeights, seed=0):
    """Equal-weight sum of per-region Chamfer distances."""
    energy = MeshEnergy(mesh, spec, targets, weights)
    draw = energy.draw(mesh.vertices, seed)
    per, value, grad = energy.match(mesh.vertices, draw)
    return value, grad, per


def stage_loss(mesh: LabeledSurfaceMesh, spec, targets: Mapping, weights: EnergyWeights, seed=0) -> EnergyBreakdown:
    energy = MeshEnergy(mesh, spec, targets, weights)
    return energy.evaluate(mesh.vertices, energy.draw(mesh.vertices, seed))
