import numpy as np
import pytest
from scipy.spatial import ConvexHull

from jointmesh.mesh import LabeledSurfaceMesh, signed_volume, subdivide_triangles
from jointmesh.template import build_template


def single(vertices, triangles) -> LabeledSurfaceMesh:
    n = len(triangles)
    return LabeledSurfaceMesh(vertices, triangles, np.zeros(n), np.tile([0, -1], (n, 1)), 1)


def hull_mesh(points):
    """Outward-oriented convex hull triangles."""
    points = np.asarray(points, dtype=np.float64)
    hull = ConvexHull(points)
    tris = hull.simplices.copy()
    c = points[hull.vertices].mean(axis=0)
    for i, t in enumerate(tris):
        n = np.cross(points[t[1]] - points[t[0]], points[t[2]] - points[t[0]])
        if np.dot(n, points[t[0]] - c) < 0:
            tris[i] = t[[0, 2, 1]]
    used, inv = np.unique(tris, return_inverse=True)
    return points[used], inv.reshape(-1, 3), hull


def icosphere(levels=2, radius=1.0):
    t = (1.0 + 5 ** 0.5) / 2
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=float,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    _, f, _ = hull_mesh(v)
    for _ in range(levels):
        v, f = subdivide_triangles(v, f)
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
    assert signed_volume(v, f) > 0
    return radius * v, f


def cube_mesh():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
        (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3),
    ]
    return corners, quads


@pytest.fixture(scope="session")
def templates():
    return {organ: build_template(organ) for organ in ("heart", "hippocampus", "lungs")}


# one line per acceptance criterion, printed again at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
