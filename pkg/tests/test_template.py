import numpy as np
import pytest

from jointmesh.mesh import (
    component_boundary,
    component_euler,
    euler_characteristic,
    is_closed_manifold,
    signed_volume,
    subdivide4,
    validate,
)
from jointmesh.template import (
    CIRCUMRADIUS,
    PRESETS,
    SQUARE_OFFSET,
    Adjacency,
    Component,
    TemplateError,
    TemplateSpec,
    build_template,
    fuse,
    glue,
    lens,
    make_rhombicuboctahedron,
    rhombicuboctahedron_assembly,
    rhombicuboctahedron_faces,
    spherify,
)

SUPERVISED_COUNTS = {"heart": 7, "hippocampus": 3, "lungs": 9}


def test_rhombicuboctahedron_raw_faces():
    verts, faces = rhombicuboctahedron_faces()
    sizes = sorted(len(f) for f in faces)
    assert len(verts) == 24
    assert sizes.count(3) == 8 and sizes.count(4) == 18
    edges = {tuple(sorted((f[i], f[(i + 1) % len(f)]))) for f in faces for i in range(len(f))}
    assert len(verts) - len(edges) + len(faces) == 2
    assert np.allclose(np.linalg.norm(verts, axis=1), 1.0)
    # all edges of equal length (uniform polyhedron)
    lengths = [np.linalg.norm(verts[a] - verts[b]) for a, b in edges]
    assert np.ptp(lengths) < 1e-12


def test_rhombicuboctahedron_triangulated():
    m = make_rhombicuboctahedron()
    assert (m.n_vertices, m.n_edges, m.n_faces) == (24, 66, 44)
    assert m.euler == 2
    validate(m)
    assert signed_volume(m.vertices, m.triangles) > 0


def test_square_offset_constant():
    a = 1 + np.sqrt(2)
    assert CIRCUMRADIUS == pytest.approx(np.sqrt(2 + a * a))
    verts, faces = rhombicuboctahedron_faces()
    axis_square = [f for f in faces if len(f) == 4 and np.allclose(verts[list(f)][:, 0], verts[f[0], 0])]
    assert any(np.isclose(verts[f[0], 0], SQUARE_OFFSET) for f in axis_square)


def _pair(size_b=1.0):
    a = rhombicuboctahedron_assembly()
    qa = a.find_face(0, np.array([SQUARE_OFFSET, 0, 0]))
    cb = SQUARE_OFFSET + size_b * SQUARE_OFFSET
    b = rhombicuboctahedron_assembly(center=(cb, 0, 0), circumradius=size_b)
    qb = b.find_face(0, np.array([SQUARE_OFFSET, 0, 0]), tol=1e-6) if size_b == 1.0 else None
    if qb is None:
        qb = b.find_face(0, np.array([cb - size_b * SQUARE_OFFSET, 0, 0]))
    return a, b, qa, qb


def test_glue_two_units_counts():
    a, b, qa, qb = _pair()
    g = glue(a, b, qa, qb, label=2)
    m = g.to_mesh()
    assert m.n_vertices == 44
    assert m.n_faces == 86
    assert int(m.shared.sum()) == 2
    assert set(m.region_label[m.shared].tolist()) == {2}
    for c in range(2):
        tris = component_boundary(m, c)
        assert len(tris) == 44
        assert euler_characteristic(tris) == 2
        assert is_closed_manifold(tris)
    validate(m)


def _canonical(asm, unit_of):
    """Faces as coordinate cycles with owners named by source unit."""
    out = set()
    for f, o in zip(asm.faces, asm.owners):
        pts = [tuple(np.round(asm.vertices[v], 9)) for v in f]
        owners = tuple(sorted(unit_of[c] for c in o if c >= 0))
        if o[1] >= 0 and unit_of[o[0]] != owners[0]:
            pts = pts[::-1]  # orient walls outward for unit "a"
        k = pts.index(min(pts))
        out.add((tuple(pts[k:] + pts[:k]), owners))
    return out


def test_glue_symmetric():
    a, b, qa, qb = _pair()
    ab = glue(a, b, qa, qb, label=2)
    ba = glue(b, a, qb, qa, label=2)
    assert _canonical(ab, {0: "a", 1: "b"}) == _canonical(ba, {0: "b", 1: "a"})


def test_glue_errors():
    a, b, qa, qb = _pair(size_b=1.3)
    with pytest.raises(TemplateError, match="sizes differ"):
        glue(a, b, qa, qb)
    a, b, qa, qb = _pair()
    tri = next(i for i, f in enumerate(b.faces) if len(f) == 3)
    with pytest.raises(TemplateError, match="square"):
        glue(a, b, qa, tri)
    other = b.find_face(0, np.array([SQUARE_OFFSET, 0, 0]) + np.array([2 * SQUARE_OFFSET, 0, 0]))
    with pytest.raises(TemplateError, match="coincident"):
        glue(a, b, qa, other)
    g = glue(a, b, qa, qb)
    wall = next(i for i, o in enumerate(g.owners) if o[1] >= 0)
    free = next(i for i, o in enumerate(g.owners) if o[1] < 0 and len(g.faces[i]) == 4)
    with pytest.raises(TemplateError, match="already glued"):
        fuse(g, wall, free)


@pytest.mark.parametrize("organ", sorted(PRESETS))
def test_preset_counts(organ, templates):
    mesh, spec = templates[organ]
    assert len(spec.supervised_regions()) == SUPERVISED_COUNTS[organ]
    assert component_euler(mesh) == [2] * spec.component_count
    assert set(mesh.region_label.tolist()) == {r.label for r in spec.regions()}


def test_preset_region_names():
    names = lambda organ: sorted(r.name for r in PRESETS[organ]().regions() if r.supervised)
    assert names("heart") == sorted(["LV", "RV", "LA", "RA", "LV-RV", "LV-LA", "RV-RA"])
    assert names("hippocampus") == ["anterior", "anterior-posterior", "posterior"]
    assert names("lungs") == sorted(["LR", "MR", "UR", "LL", "UL", "LR-MR", "LR-UR", "MR-UR", "LL-UL"])
    heart = PRESETS["heart"]()
    la_ra = [r for r in heart.regions() if r.name == "LA-RA"]
    assert len(la_ra) == 1 and not la_ra[0].supervised


def test_lungs_groups():
    assert PRESETS["lungs"]().groups() == [[0, 1, 2], [3, 4]]


@pytest.mark.parametrize("organ", sorted(PRESETS))
def test_presets_valid_at_all_levels(organ):
    for level in range(0, 4):
        mesh, spec = build_template(organ, level)
        validate(mesh)
        assert component_euler(mesh) == [2] * spec.component_count


def test_heart_level4_valid():
    mesh, spec = build_template("heart", 4)
    validate(mesh)
    assert len(spec.supervised_regions()) == 7


@pytest.mark.parametrize("organ", sorted(PRESETS))
def test_subdivision_rounds_preserve_counts(organ, templates):
    mesh, spec = templates[organ]
    for _ in range(3):
        mesh = subdivide4(mesh)
        assert component_euler(mesh) == [2] * spec.component_count
    assert len(spec.supervised_regions()) == SUPERVISED_COUNTS[organ]
    assert set(np.unique(mesh.region_label).tolist()) == {r.label for r in spec.regions()}


def test_single_component_is_sphere():
    spec = TemplateSpec((Component("ball", (0.1, -0.2, 0.3), 0.7),), (), 2)
    mesh, _ = build_template(spec)
    r = np.linalg.norm(mesh.vertices - [0.1, -0.2, 0.3], axis=1)
    assert np.abs(r - 0.7).max() < 1e-9


def test_lens_radius_oracle():
    r, d = 1.0, 1.2
    mesh, spec = build_template("hippocampus")
    L = lens(spec, 0, 1)
    assert L.radius == pytest.approx(np.sqrt(r * r - (d / 2) ** 2), abs=1e-12)
    wall_v = np.unique(mesh.triangles[mesh.shared])
    ext_v = np.unique(mesh.triangles[~mesh.shared])
    ring = np.intersect1d(wall_v, ext_v)
    p = mesh.vertices[ring]
    assert np.allclose(p[:, 0], d / 2, atol=1e-12)
    assert np.allclose(np.linalg.norm(p[:, 1:], axis=1), 0.8, atol=1e-9)
    # flat disk wall
    assert np.allclose(mesh.vertices[wall_v][:, 0], d / 2, atol=1e-12)


def test_lens_unequal_radii():
    spec = TemplateSpec(
        (Component("a", (0, 0, 0), 1.0), Component("b", (1.5, 0, 0), 0.8)), (Adjacency(0, 1, 2),)
    )
    L = lens(spec, 0, 1)
    h = (1.5 ** 2 + 1 - 0.64) / 3.0
    assert L.radius == pytest.approx(np.sqrt(1 - h * h))
    assert np.allclose(L.center, [h, 0, 0])
    mesh, _ = build_template(spec)
    validate(mesh)


@pytest.mark.parametrize("organ", sorted(PRESETS))
def test_exteriors_on_spheres(organ, templates):
    mesh, spec = templates[organ]
    for c, comp in enumerate(spec.components):
        ext = np.unique(mesh.triangles[(mesh.owners[:, 0] == c) & ~mesh.shared])
        r = np.linalg.norm(mesh.vertices[ext] - np.asarray(comp.center), axis=1)
        assert np.abs(r - comp.radius).max() < 1e-9


@pytest.mark.parametrize("organ", sorted(PRESETS))
def test_spherify_idempotent(organ, templates):
    mesh, spec = templates[organ]
    again = spherify(mesh, spec)
    assert np.abs(again.vertices - mesh.vertices).max() < 1e-9


def test_spec_rejects_non_overlapping():
    spec = TemplateSpec((Component("a", (0, 0, 0)), Component("b", (2.5, 0, 0))), (Adjacency(0, 1, 2),))
    with pytest.raises(TemplateError, match="overlap"):
        build_template(spec)


def test_spec_rejects_label_collision_and_duplicates():
    comps = (Component("a", (0, 0, 0)), Component("b", (1.2, 0, 0)))
    with pytest.raises(TemplateError, match="collides"):
        TemplateSpec(comps, (Adjacency(0, 1, 1),)).validate()
    with pytest.raises(TemplateError, match="duplicate"):
        TemplateSpec(comps, (Adjacency(0, 1, 2), Adjacency(1, 0, 3))).validate()


def test_unknown_organ():
    with pytest.raises(TemplateError, match="unknown organ"):
        build_template("liver")


def test_spec_dict_round_trip():
    for organ in PRESETS:
        spec = PRESETS[organ]()
        assert TemplateSpec.from_dict(spec.to_dict()) == spec
    data = PRESETS["heart"]().to_dict()
    data["colour"] = "red"
    with pytest.raises(TemplateError, match="unknown template keys"):
        TemplateSpec.from_dict(data)


def test_build_template_deterministic():
    a, _ = build_template("lungs")
    b, _ = build_template("lungs")
    assert a.topology_signature() == b.topology_signature()
    assert np.array_equal(a.vertices, b.vertices)
