"""Centroid alignment and coarse-to-fine fitting of a template to a volume."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .energy import EnergyWeights, MeshEnergy
from .mesh import LabeledSurfaceMesh, component_surface, subdivide4, validate, volume_centroid
from .volume import LabeledVolume, RegionPointCloud, component_classes, extract_targets, normalize_coords

ALIGN_MODES = ("affine", "similarity", "translation-scale")
# singular-value ratio below which a centroid layout counts as flat (affine)
# or collinear (similarity); a nearly flat layout leaves the out-of-plane
# column of the affine map to noise
DEGENERACY_RATIO = 1e-2


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    stages: int = 3
    iterations: int = 300
    step_size: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    alignment: str = "affine"
    backoff: bool = True
    min_step: float = 1e-6
    # False -> one sample draw per stage instead of one per iteration
    resample: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or not self.eps > 0:
            raise ValueError("invalid optimizer moments")
        if self.alignment not in ALIGN_MODES:
            raise ValueError(f"alignment must be one of {ALIGN_MODES}")


@dataclass
class Alignment:
    linear: np.ndarray
    translation: np.ndarray
    mode: str

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.linear.T + self.translation

    def to_dict(self) -> dict:
        return {"linear": self.linear.tolist(), "translation": self.translation.tolist(), "mode": self.mode}


@dataclass
class StageReport:
    stage: int
    n_vertices: int
    n_faces: int
    trace: list[dict] = field(default_factory=list)
    rejected: int = 0
    final_step: float = 0.0
    final: dict = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class FitReport:
    alignment: Alignment
    stages: list[StageReport]
    total: float
    final_chamfer: dict[int, float]

    def to_dict(self, timing: bool = True) -> dict:
        stages = []
        for s in self.stages:
            d = asdict(s)
            if not timing:
                d.pop("seconds")
            stages.append(d)
        return {
            "alignment": self.alignment.to_dict(),
            "total": self.total,
            "final_chamfer": {str(k): v for k, v in self.final_chamfer.items()},
            "stages": stages,
        }


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


def template_centroids(mesh: LabeledSurfaceMesh) -> np.ndarray:
    return np.array([volume_centroid(*component_surface(mesh, c)) for c in range(mesh.component_count)])


def volume_centroids(volume: LabeledVolume, spec) -> np.ndarray:
    mapping = normalize_coords(volume)
    out = []
    for cid in component_classes(volume, spec):
        idx = np.argwhere(volume.labels == cid)
        out.append(mapping.to_normalized(idx).mean(axis=0))
    return np.array(out)


def _rank(x: np.ndarray) -> int:
    """Numerical rank of centered points, relative to the largest spread."""
    sv = np.linalg.svd(x, compute_uv=False)
    if len(sv) == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > DEGENERACY_RATIO * sv[0]))


def _translation_scale(src, dst) -> Alignment:
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    rs = np.sqrt(((src - ms) ** 2).sum(axis=1).mean())
    rd = np.sqrt(((dst - md) ** 2).sum(axis=1).mean())
    if rs == 0 or rd == 0:
        raise FitError("all centroids coincide; alignment undetermined")
    s = rd / rs
    return Alignment(s * np.eye(3), md - s * ms, "translation-scale")


def _similarity(src, dst) -> Alignment:
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    U, S, Vt = np.linalg.svd(b.T @ a / len(src))
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = np.trace(np.diag(S) @ D) / (a ** 2).sum(axis=1).mean()
    return Alignment(s * R, md - s * R @ ms, "similarity")


def estimate_alignment(src: np.ndarray, dst: np.ndarray, mode: str = "affine") -> Alignment:
    """Transform mapping template centroids ``src`` onto volume centroids ``dst``.

    Falls back to translation + uniform scale when the requested mode is
    underdetermined or ill-conditioned (coplanar points for affine,
    collinear for similarity; see ``DEGENERACY_RATIO``).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    centered = src - src.mean(axis=0)
    if mode == "affine" and len(src) >= 4 and _rank(centered) == 3:
        X = np.hstack([src, np.ones((len(src), 1))])
        M, *_ = np.linalg.lstsq(X, dst, rcond=None)
        return Alignment(M[:3].T.copy(), M[3].copy(), "affine")
    if mode == "similarity" and len(src) >= 3 and _rank(centered) >= 2:
        return _similarity(src, dst)
    return _translation_scale(src, dst)


def centroid_align(mesh: LabeledSurfaceMesh, spec, volume: LabeledVolume, mode: str = "affine"):
    """Align the template to the volume's class centroids.

    Returns the transformed mesh and the :class:`Alignment` used.
    """
    al = estimate_alignment(template_centroids(mesh), volume_centroids(volume, spec), mode)
    if np.linalg.det(al.linear) <= 0:
        raise FitError("centroid alignment is not orientation preserving")
    return mesh.with_vertices(al.apply(mesh.vertices)), al


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def iteration_rng(seed: int, stage: int, it: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stage), int(it)]))


def _check_topology(mesh, reference_sig, stage):
    if mesh.topology_signature() != reference_sig:
        raise FitError(f"topology changed during stage {stage}")
    try:
        validate(mesh)
    except Exception as exc:
        raise FitError(f"mesh invariants violated after stage {stage}: {exc}") from exc


def run_stage(
    mesh: LabeledSurfaceMesh,
    energy: MeshEnergy,
    config: FitConfig,
    stage: int,
    log: Callable[[str], None] | None = None,
) -> tuple[np.ndarray, StageReport]:
    """Adam on all vertex positions with step halving on loss increase."""
    x = mesh.vertices.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    step = float(config.step_size)
    report = StageReport(stage, mesh.n_vertices, mesh.n_faces)
    fixed_draw = None if config.resample else energy.draw(x, iteration_rng(config.seed, stage, 0))
    for it in range(config.iterations):
        draw = fixed_draw or energy.draw(x, iteration_rng(config.seed, stage, it))
        b = energy.evaluate(x, draw)
        if not (np.isfinite(b.total) and np.all(np.isfinite(b.gradient))):
            raise FitError(f"non-finite energy at stage {stage}, iteration {it}")
        m = config.beta1 * m + (1.0 - config.beta1) * b.gradient
        v = config.beta2 * v + (1.0 - config.beta2) * b.gradient ** 2
        mhat = m / (1.0 - config.beta1 ** (it + 1))
        vhat = v / (1.0 - config.beta2 ** (it + 1))
        x_new = x - step * mhat / (np.sqrt(vhat) + config.eps)
        accepted = True
        if config.backoff:
            after = energy.evaluate(x_new, draw).total
            if not after <= b.total:
                accepted = False
                report.rejected += 1
                step = max(step * 0.5, config.min_step)
        if accepted:
            x = x_new
        row = b.scalars()
        row["step"] = step
        row["accepted"] = accepted
        report.trace.append(row)
        if log is not None:
            log(f"stage {stage} iter {it} total {b.total:.6g} match {b.match:.6g} reg {b.reg:.6g}")
    report.final_step = step
    return x, report


def fit(
    mesh: LabeledSurfaceMesh,
    spec,
    volume: LabeledVolume,
    config: FitConfig | None = None,
    targets: RegionPointCloud | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[LabeledSurfaceMesh, FitReport]:
    """Align the template, then run ``config.stages`` optimization stages.

    The mesh is subdivided between stages.  The reported total is the mean
    of the per-stage final energies.
    """
    config = config or FitConfig()
    w = config.weights
    if targets is None:
        targets = extract_targets(volume, spec, w.supervised, w.shared_surface_supervision)
    sig = mesh.topology_signature()
    mesh, alignment = centroid_align(mesh, spec, volume, config.alignment)

    stages = []
    for stage in range(config.stages):
        t0 = time.perf_counter()
        energy = MeshEnergy(mesh, spec, targets, w)
        x, rep = run_stage(mesh, energy, config, stage, log)
        mesh = mesh.with_vertices(x)
        _check_topology(mesh, sig, stage)
        final = energy.evaluate(x, energy.draw(x, iteration_rng(config.seed, stage, config.iterations)))
        if not np.isfinite(final.total):
            raise FitError(f"non-finite energy at the end of stage {stage}")
        rep.final = final.scalars()
        rep.seconds = time.perf_counter() - t0
        stages.append(rep)
        if stage + 1 < config.stages:
            mesh = subdivide4(mesh)
            sig = mesh.topology_signature()
    total = float(np.mean([s.final["total"] for s in stages]))
    final_chamfer = {int(k): float(val) for k, val in stages[-1].final["chamfer"].items()}
    return mesh, FitReport(alignment, stages, total, final_chamfer)


def with_weights(config: FitConfig, **kw) -> FitConfig:
    return replace(config, weights=replace(config.weights, **kw))
