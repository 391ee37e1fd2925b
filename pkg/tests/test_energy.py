import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointmesh.energy import (
    Draw,
    EnergyError,
    EnergyWeights,
    MeshEnergy,
    chamfer_points,
    chamfer_region,
    edge_loss,
    edge_term,
    edge_unif_loss,
    edge_unif_term,
    laplacian_loss,
    match_loss,
    norm_loss,
    norm_term,
    normal_pairs,
    reg_loss,
    stage_loss,
)
from jointmesh.mesh import sample_surface, subdivide4
from jointmesh.template import make_rhombicuboctahedron

from conftest import icosphere, single


def brute_chamfer(p, q):
    d = ((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def perturbed(mesh, seed, scale=0.02):
    rng = np.random.default_rng(seed)
    return mesh.with_vertices(mesh.vertices + scale * rng.normal(size=mesh.vertices.shape))


def fd_check(fun, x, grad, coords, h=1e-5):
    """Max relative error of ``grad`` against central differences on ``coords``."""
    num, ana = [], []
    for i, d in coords:
        xp, xm = x.copy(), x.copy()
        xp[i, d] += h
        xm[i, d] -= h
        num.append((fun(xp) - fun(xm)) / (2 * h))
        ana.append(grad[i, d])
    num, ana = np.array(num), np.array(ana)
    return np.abs(num - ana).max() / max(np.abs(num).max(), 1e-12)


def random_coords(n_vertices, k, seed):
    rng = np.random.default_rng(seed)
    return list(zip(rng.integers(0, n_vertices, k).tolist(), rng.integers(0, 3, k).tolist()))


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------


def test_chamfer_identical_zero():
    p = np.random.default_rng(0).normal(size=(50, 3))
    value, g = chamfer_points(p, p.copy())
    assert value == 0.0
    assert not np.any(g)


def test_chamfer_two_points():
    value, _ = chamfer_points(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]))
    assert value == 2.0


def test_chamfer_matches_brute_force_500():
    rng = np.random.default_rng(1)
    p, q = rng.normal(size=(500, 3)), rng.normal(size=(500, 3))
    assert chamfer_points(p, q)[0] == pytest.approx(brute_chamfer(p, q), rel=1e-14, abs=0)


def test_chamfer_gradient_matches_fd_on_points():
    rng = np.random.default_rng(2)
    p, q = rng.normal(size=(40, 3)), rng.normal(size=(60, 3))
    _, g = chamfer_points(p, q)
    err = fd_check(lambda x: chamfer_points(x, q)[0], p, g, [(i, d) for i in range(40) for d in range(3)])
    assert err < 1e-6


def test_chamfer_tie_breaks_to_lowest_index():
    q = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    _, g = chamfer_points(np.array([[0.0, 0, 0]]), q)
    # pred term pulls toward q[0]; both targets pull back onto the single point
    assert np.allclose(g[0], 2 * (np.array([0, 0, 0]) - q[0]) + 2 * np.mean(np.zeros((2, 3)) - q, axis=0))


def test_chamfer_empty_names_region():
    with pytest.raises(EnergyError, match="region 5"):
        chamfer_points(np.zeros((3, 3)), np.zeros((0, 3)), name=5)
    with pytest.raises(EnergyError, match="prediction"):
        chamfer_points(np.zeros((0, 3)), np.zeros((3, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 40), st.integers(1, 40))
def test_chamfer_symmetric_and_brute(seed, n, m):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    a, b = chamfer_points(p, q)[0], chamfer_points(q, p)[0]
    assert a == pytest.approx(b, rel=1e-12)
    assert a == pytest.approx(brute_chamfer(p, q), rel=1e-12)
    assert a >= 0


def test_chamfer_region_chains_to_vertices(templates):
    mesh, _ = templates["hippocampus"]
    mesh = perturbed(mesh, 0)
    target = np.random.default_rng(3).normal(scale=0.7, size=(300, 3))
    s = sample_surface(mesh, 2, 200, seed=4)

    def fun(x):
        pts = np.einsum("nk,nkd->nd", s.bary, x[mesh.triangles[s.face]])
        return chamfer_points(pts, target)[0]

    _, g = chamfer_region(s, target, mesh)
    used = np.unique(mesh.triangles[s.face])
    coords = [(int(i), d) for i in used[:30] for d in range(3)]
    assert fd_check(fun, mesh.vertices.copy(), g, coords) < 1e-6


# ---------------------------------------------------------------------------
# regularizers: hand examples
# ---------------------------------------------------------------------------

LINE = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [4, 0, 0]])
LINE_EDGES = np.array([[0, 1], [1, 2], [2, 3]])


def test_edge_hand_examples():
    eq = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
    assert edge_loss(single(eq, [[0, 1, 2]]))[0] == pytest.approx(1.0)
    assert edge_term(LINE, LINE_EDGES)[0] == pytest.approx(4 / 3)


def test_edge_unif_hand_examples():
    assert edge_unif_term(LINE, LINE_EDGES)[0] == pytest.approx(np.sqrt(1 / 3))
    assert edge_unif_term(LINE, LINE_EDGES)[0] == pytest.approx(0.57735, abs=1e-5)
    tet = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    value, g = edge_unif_loss(single(tet, [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]))
    assert value == 0.0
    assert not np.any(g)
    with pytest.raises(EnergyError):
        edge_unif_term(LINE, LINE_EDGES[:1])


def test_edge_unif_zero_iff_equal():
    v, f = icosphere(1)
    m = single(v, f)
    assert edge_unif_loss(m)[0] > 1e-3  # icosphere edges are not all equal
    assert edge_unif_term(LINE[:2], np.array([[0, 1], [0, 1]]))[0] == 0.0


def test_norm_flat_patch_zero():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    value, _ = norm_term(v, np.array([[0, 1, 2], [1, 3, 2]]), np.array([[0, 1]]), np.array([1.0]))
    assert value == pytest.approx(0.0, abs=1e-15)


def test_norm_hinge_90_degrees():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    # shared edge (0, 1): one triangle in z = 0, the other in y = 0
    value, _ = norm_term(v, np.array([[0, 1, 2], [1, 0, 3]]), np.array([[0, 1]]), np.array([1.0]))
    assert value == pytest.approx(1.0)


def test_normal_pairs_single_component():
    m = make_rhombicuboctahedron()
    pairs, sign = normal_pairs(m)
    assert len(pairs) == 66  # one pair per edge
    assert np.all(sign == 1)


def test_normal_pairs_walls(templates):
    mesh, _ = templates["hippocampus"]
    pairs, sign = normal_pairs(mesh)
    # one pair per edge of each component surface, wall-interior edges shared
    per_comp = sum(3 * (mesh.owners == c).any(axis=1).sum() // 2 for c in range(2))
    wall = mesh.triangles[mesh.shared]
    wall_edges = {tuple(sorted((t[i], t[(i + 1) % 3]))) for t in wall for i in range(3)}
    ring = {e for e in wall_edges if sum(1 for t in wall for i in range(3) if tuple(sorted((t[i], t[(i + 1) % 3]))) == e) == 1}
    assert len(pairs) == per_comp - (len(wall_edges) - len(ring))
    assert np.any(sign < 0)
    assert len({tuple(p) for p in pairs.tolist()}) == len(pairs)


def test_norm_decreases_per_pair_under_subdivision():
    v, f = icosphere(1)
    m = single(v, f)
    s = subdivide4(m)
    a = norm_loss(m)[0] / len(normal_pairs(m)[0])
    b = norm_loss(s)[0] / len(normal_pairs(s)[0])
    assert b < a


def test_laplacian_grid_interior_zero_and_displacement():
    n = 7
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    idx = lambda i, j: i * n + j
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            tris += [[idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)], [idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]]
    m = single(v, tris)
    from jointmesh.energy import laplacian_operator

    lap = laplacian_operator(m.edges, m.n_vertices)
    u = lap @ v
    interior = [idx(i, j) for i in range(1, n - 1) for j in range(1, n - 1)]
    assert np.abs(u[interior]).max() < 1e-12

    base = laplacian_loss(m)[0]
    c = idx(3, 3)
    d = np.array([0.0, 0.0, 0.01])
    moved = v.copy()
    moved[c] += d
    after = laplacian_loss(m.with_vertices(moved))[0]
    # own term |d|/V plus |d|/(V deg_j) for each neighbour j
    nbrs = np.flatnonzero(np.asarray((lap[c] != 0).todense()).ravel())
    nbrs = nbrs[nbrs != c]
    deg = np.bincount(m.edges.ravel(), minlength=m.n_vertices)
    expected = np.linalg.norm(d) / m.n_vertices * (1 + np.sum(1.0 / deg[nbrs]))
    assert after - base == pytest.approx(expected, rel=1e-9)


def test_laplacian_isolated_vertex():
    v = np.vstack([icosphere(0)[0], [[3, 3, 3]]])
    with pytest.raises(EnergyError, match="no neighbors"):
        laplacian_loss(single(v, icosphere(0)[1]))


@pytest.mark.parametrize(
    "term, degree",
    [(edge_loss, 1), (edge_unif_loss, 1), (norm_loss, 0), (laplacian_loss, 1)],
)
def test_homogeneity(term, degree, templates):
    mesh = perturbed(templates["heart"][0], 5)
    a = term(mesh)[0]
    b = term(mesh.with_vertices(2.0 * mesh.vertices))[0]
    assert b == pytest.approx(2.0 ** degree * a, rel=1e-10)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("term", [edge_loss, edge_unif_loss, norm_loss, laplacian_loss])
@pytest.mark.parametrize("organ", ["heart", "hippocampus", "lungs"])
def test_term_gradients_fd(term, organ, templates):
    base = templates[organ][0]
    for seed in range(5):
        mesh = perturbed(base, seed)
        _, g = term(mesh)
        fun = lambda x: term(mesh.with_vertices(x))[0]
        err = fd_check(fun, mesh.vertices.copy(), g, random_coords(mesh.n_vertices, 12, seed))
        assert err < 1e-3, (term.__name__, organ, seed, err)


def test_reg_loss_composition(templates):
    mesh = perturbed(templates["lungs"][0], 7)
    rng = np.random.default_rng(0)
    lam = rng.uniform(0.1, 2.0, size=4)
    w = EnergyWeights(lambda_edge=lam[0], lambda_edgeunif=lam[1], lambda_norm=lam[2], lambda_lapl=lam[3])
    value, grad = reg_loss(mesh, w)
    parts = [edge_loss(mesh), edge_unif_loss(mesh), norm_loss(mesh), laplacian_loss(mesh)]
    assert value == pytest.approx(sum(l * p[0] for l, p in zip(lam, parts)), rel=1e-12)
    assert np.allclose(grad, sum(l * p[1] for l, p in zip(lam, parts)), rtol=1e-12, atol=1e-15)
    zero = EnergyWeights(lambda_edge=0, lambda_edgeunif=0, lambda_norm=0, lambda_lapl=0)
    assert reg_loss(mesh, zero)[0] == 0.0
    only_edge = EnergyWeights(lambda_edge=1, lambda_edgeunif=0, lambda_norm=0, lambda_lapl=0)
    assert reg_loss(mesh, only_edge)[0] == edge_loss(mesh)[0]


def _self_targets(mesh, spec, n=400, seed=0):
    return {lab: sample_surface(mesh, lab, n, seed + lab).points for lab in spec.supervised_regions()}


def test_stage_gradient_fd_small_mesh():
    from jointmesh.template import build_template

    mesh, spec = build_template("hippocampus", 0)
    assert mesh.n_vertices < 120
    mesh = perturbed(mesh, 1, 0.03)
    targets = _self_targets(*build_template("hippocampus", 0), n=300)
    w = EnergyWeights(chamfer_samples_per_region=300)
    energy = MeshEnergy(mesh, spec, targets, w)
    draw = energy.draw(mesh.vertices, 3)
    b = energy.evaluate(mesh.vertices, draw)
    fun = lambda x: energy.evaluate(x, draw).total
    coords = [(i, d) for i in range(mesh.n_vertices) for d in range(3)]
    assert fd_check(fun, mesh.vertices.copy(), b.gradient, coords) < 1e-3


@pytest.mark.parametrize("organ", ["heart", "hippocampus", "lungs"])
def test_match_gradient_fd(organ, templates):
    base, spec = templates[organ]
    targets = _self_targets(base, spec)
    w = EnergyWeights(lambda_reg=0, chamfer_samples_per_region=300)
    for seed in range(5):
        mesh = perturbed(base, 10 + seed)
        energy = MeshEnergy(mesh, spec, targets, w)
        draw = energy.draw(mesh.vertices, seed)
        b = energy.evaluate(mesh.vertices, draw)
        fun = lambda x: energy.evaluate(x, draw).total
        err = fd_check(fun, mesh.vertices.copy(), b.gradient, random_coords(mesh.n_vertices, 12, seed))
        assert err < 1e-3


# ---------------------------------------------------------------------------
# match / stage losses
# ---------------------------------------------------------------------------


def test_match_self_zero(templates):
    mesh, spec = templates["heart"]
    w = EnergyWeights(chamfer_samples_per_region=50)
    energy = MeshEnergy(mesh, spec, _self_targets(mesh, spec), w)
    draw = energy.draw(mesh.vertices, 0)
    own = {
        k: np.einsum("nk,nkd->nd", bary, mesh.vertices[mesh.triangles[face]])
        for k, (face, bary) in draw.pred.items()
    }
    per, value, grad = energy.match(mesh.vertices, Draw(draw.pred, own))
    assert value == 0.0
    assert not np.any(grad)


def test_match_skips_unsupervised(templates):
    mesh, spec = templates["heart"]
    targets = _self_targets(mesh, spec)
    value, _, per = match_loss(mesh, spec, targets, EnergyWeights(chamfer_samples_per_region=100))
    assert 7 not in per and len(per) == 7
    assert value == pytest.approx(sum(per.values()))
    # explicit mask also drops a supervised wall
    sub = EnergyWeights(chamfer_samples_per_region=100, supervised=(0, 1, 2, 3, 4, 5))
    _, _, per2 = match_loss(mesh, spec, targets, sub)
    assert sorted(per2) == [0, 1, 2, 3, 4, 5]


def test_match_missing_target(templates):
    mesh, spec = templates["heart"]
    targets = _self_targets(mesh, spec)
    del targets[4]
    with pytest.raises(EnergyError, match="region 4"):
        match_loss(mesh, spec, targets, EnergyWeights())


def test_match_trend_with_sample_count(templates):
    mesh, spec = templates["hippocampus"]
    dense = {lab: sample_surface(mesh, lab, 100_000, 99).points for lab in spec.supervised_regions()}
    values = [
        match_loss(mesh, spec, dense, EnergyWeights(chamfer_samples_per_region=n), seed=1)[0]
        for n in (1_000, 10_000, 100_000)
    ]
    assert values[0] > values[1] > values[2] > 0


def test_stage_loss_composition(templates):
    mesh, spec = templates["hippocampus"]
    mesh = perturbed(mesh, 2)
    targets = _self_targets(*templates["hippocampus"])
    w0 = EnergyWeights(lambda_reg=0, chamfer_samples_per_region=200)
    b = stage_loss(mesh, spec, targets, w0, seed=4)
    m, _, _ = match_loss(mesh, spec, targets, w0, seed=4)
    assert b.total == m
    w = EnergyWeights(lambda_match=0.5, lambda_reg=2.0, chamfer_samples_per_region=200)
    b2 = stage_loss(mesh, spec, targets, w, seed=4)
    assert b2.total == pytest.approx(0.5 * b2.match + 2.0 * b2.reg, rel=1e-14)
    assert b2.reg == pytest.approx(reg_loss(mesh, w)[0], rel=1e-12)
    assert np.all(np.isfinite(b2.gradient))


def test_stage_loss_perfect_fit_zero(templates):
    mesh, spec = templates["hippocampus"]
    w = EnergyWeights(lambda_reg=0, chamfer_samples_per_region=64)
    energy = MeshEnergy(mesh, spec, _self_targets(mesh, spec), w)
    draw = energy.draw(mesh.vertices, 0)
    own = {k: np.einsum("nk,nkd->nd", b, mesh.vertices[mesh.triangles[f]]) for k, (f, b) in draw.pred.items()}
    assert energy.evaluate(mesh.vertices, Draw(draw.pred, own)).total == 0.0


def test_energy_deterministic(templates):
    mesh, spec = templates["lungs"]
    targets = _self_targets(mesh, spec)
    w = EnergyWeights(chamfer_samples_per_region=300)
    a = stage_loss(perturbed(mesh, 1), spec, targets, w, seed=9)
    b = stage_loss(perturbed(mesh, 1), spec, targets, w, seed=9)
    assert a.total == b.total
    assert np.array_equal(a.gradient, b.gradient)


def test_weights_validation():
    with pytest.raises(EnergyError):
        EnergyWeights(lambda_edge=-1)
    with pytest.raises(EnergyError):
        EnergyWeights(lambda_norm=float("nan"))
    with pytest.raises(EnergyError):
        EnergyWeights(chamfer_samples_per_region=0)
