import numpy as np
import pytest

from ecgipf.errors import (
    InvalidConductivityError,
    MeshFormatError,
    MeshValidationError,
    ResourceLimitError,
)
from ecgipf.mesh import (
    Anisotropic,
    ElectrodeSet,
    EuclideanBall,
    GeodesicBall,
    RegionScaled,
    Slab,
    TriMesh,
    Uniform,
    check,
    check_electrodes,
    load_mesh,
    make_test_mesh,
    save_off,
    set_conductivity,
    sphere_electrodes,
    transfer_vertex_field,
    validate,
    winding_number,
    write_vtk,
)

TETRA_OFF = """OFF
4 4 0
1 1 1
1 -1 -1
-1 1 -1
-1 -1 1
3 0 1 2
3 0 3 1
3 0 2 3
3 1 3 2
"""


def test_load_tetrahedron_off(tmp_path):
    p = tmp_path / "t.off"
    p.write_text(TETRA_OFF)
    m = load_mesh(p)
    assert m.n_vertices == 4 and m.n_triangles == 4
    assert validate(m) == []
    assert m.is_closed()


def test_load_obj_with_slashes_and_quads_rejected(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n"
                 "f 1/1 2/2 3/3\nf 1 2 4\nf 1 3 4\nf 2 3 4\n")
    m = load_mesh(p)
    assert m.n_triangles == 4
    np.testing.assert_array_equal(m.triangles[0], [0, 1, 2])


def test_index_out_of_range(tmp_path):
    p = tmp_path / "bad.off"
    lines = ["OFF", "10 1 0"] + [f"{i} {i * i} {i % 3}" for i in range(10)] + ["3 0 1 99"]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(MeshValidationError, match="out of range"):
        load_mesh(p)


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 zz\n0 1 0\n3 0 1 2\n")
    with pytest.raises(MeshFormatError) as exc:
        load_mesh(p)
    assert exc.value.line == 4


def test_unknown_extension(tmp_path):
    p = tmp_path / "x.stl"
    p.write_text("solid")
    with pytest.raises(MeshFormatError):
        load_mesh(p)


def test_off_roundtrip(tmp_path, sphere2):
    p = tmp_path / "s.off"
    save_off(p, sphere2)
    back = load_mesh(p)
    np.testing.assert_array_equal(back.vertices, sphere2.vertices)
    np.testing.assert_array_equal(back.triangles, sphere2.triangles)


def test_validate_lists_all_violations():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5]], float)
    f = np.array([[0, 1, 2], [3, 4, 4], [3, 4, 5]])
    problems = validate(TriMesh(v, f))
    text = " ".join(problems)
    assert "zero-area" in text or "area" in text
    assert "repeated" in text
    assert "connected" in text
    with pytest.raises(MeshValidationError):
        check(TriMesh(v, f))


def test_icosahedron_counts():
    m = make_test_mesh("sphere", 30.0, 0)
    assert (m.n_vertices, m.n_triangles) == (12, 20)


@pytest.mark.parametrize("s", [0, 1, 2, 3])
def test_icosphere_vertex_count(s):
    assert make_test_mesh("sphere", 30.0, s).n_vertices == 10 * 4 ** s + 2


def test_icosphere_nested_prefix():
    a = make_test_mesh("sphere", 30.0, 2)
    b = make_test_mesh("sphere", 30.0, 3)
    np.testing.assert_allclose(b.vertices[: a.n_vertices], a.vertices, atol=1e-12)


def test_subdivision_guard():
    with pytest.raises(ResourceLimitError):
        make_test_mesh("sphere", 30.0, 7)


def test_ellipsoid_extent():
    m = make_test_mesh("ellipsoid", 30.0, 2, axis_scales=(1, 0.7, 0.5))
    ext = np.abs(m.vertices).max(axis=0)
    np.testing.assert_allclose(ext[[0, 2]], [30.0, 15.0], rtol=0.02)


def test_normals_unit_and_outward(sphere3):
    n = sphere3.normals
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)
    c = sphere3.vertices.mean(axis=0)
    assert np.all(np.einsum("ij,ij->i", n, sphere3.vertices - c) > 0)


def test_vertex_areas_sum_to_surface(sphere3):
    assert sphere3.vertex_areas.sum() == pytest.approx(sphere3.triangle_areas.sum())
    assert sphere3.vertex_areas.sum() == pytest.approx(4 * np.pi * 30 ** 2, rel=0.01)


def test_arrays_read_only(sphere2):
    with pytest.raises(ValueError):
        sphere2.vertices[0, 0] = 1.0


def test_uniform_conductivity_identity(sphere2):
    m = set_conductivity(sphere2, 1.0)
    np.testing.assert_array_equal(m.tensors(), np.broadcast_to(np.eye(3), (m.n_vertices, 3, 3)))
    np.testing.assert_array_equal(set_conductivity(sphere2, Uniform(2.0)).tensors()[5], 2 * np.eye(3))


def test_unset_conductivity_is_identity(sphere2):
    np.testing.assert_array_equal(sphere2.tensors()[0], np.eye(3))


def test_region_scaled_ball(sphere2):
    ball = EuclideanBall((0, 0, 30), 8.0)
    m = set_conductivity(sphere2, RegionScaled(ball, 0.01))
    inside = np.linalg.norm(sphere2.vertices - [0, 0, 30], axis=1) <= 8.0
    assert inside.any() and (~inside).any()
    np.testing.assert_allclose(m.tensors()[inside], 0.01 * np.eye(3)[None])
    np.testing.assert_array_equal(m.tensors()[~inside], np.broadcast_to(np.eye(3), ((~inside).sum(), 3, 3)))


def test_geodesic_ball_region(sphere2):
    mask = GeodesicBall(0, 20.0).mask(sphere2)
    assert mask[0] and 1 < mask.sum() < sphere2.n_vertices


def test_anisotropic_eigenvalues(sphere2):
    m = set_conductivity(sphere2, Anisotropic((1, 0, 0), 3.0, 0.3))
    np.testing.assert_allclose(np.linalg.eigvalsh(m.tensors()[0]), [0.3, 0.3, 3.0], atol=1e-12)


@pytest.mark.parametrize("spec", [
    Uniform(0.0),
    Anisotropic((1, 0, 0), 3.0, 0.0),
    RegionScaled(EuclideanBall((0, 0, 30), 8.0), -1.0),
])
def test_non_spd_rejected(sphere2, spec):
    with pytest.raises(InvalidConductivityError):
        set_conductivity(sphere2, spec)


def test_set_conductivity_idempotent(sphere2):
    spec = RegionScaled(Slab((0, 0, 1), 10.0, 3.0), 0.1)
    once = set_conductivity(sphere2, spec)
    twice = set_conductivity(once, spec)
    np.testing.assert_array_equal(once.tensors(), twice.tensors())
    copy = TriMesh(sphere2.vertices.copy(), sphere2.triangles.copy())
    np.testing.assert_array_equal(set_conductivity(copy, spec).tensors(), once.tensors())


def test_slab_clip(sphere3):
    full = Slab((0, 0, 1), 15.0, 3.0).mask(sphere3)
    half = Slab((0, 0, 1), 15.0, 3.0, (((1, 0, 0), 0.0),)).mask(sphere3)
    assert half.sum() < full.sum() and np.all(full[half])
    assert np.all(sphere3.vertices[half, 0] >= 0)


def test_electrodes_outside(sphere2):
    el = sphere_electrodes(64, 45.0)
    assert el.count == 64
    np.testing.assert_allclose(np.linalg.norm(el.positions, axis=1), 45.0)
    check_electrodes(sphere2, el)


def test_electrode_inside_rejected(sphere2):
    with pytest.raises(ValueError):
        check_electrodes(sphere2, ElectrodeSet(np.array([[0.0, 0.0, 0.0]])))


def test_winding_number(sphere2):
    w = winding_number(sphere2, np.array([[0.0, 0, 0], [0, 0, 100]]))
    np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-9)


def test_checksum_tracks_conductivity(sphere2):
    m = set_conductivity(sphere2, 2.0)
    assert m.checksum != sphere2.checksum
    assert m.geometry_checksum == sphere2.geometry_checksum


def test_vtk_writer(tmp_path, ico0):
    p = tmp_path / "m.vtk"
    write_vtk(p, ico0, {"f": np.arange(12.0)}, title="hash=abc seed=1")
    text = p.read_text().splitlines()
    assert text[1] == "hash=abc seed=1"
    assert "POINTS 12 double" in text and "POLYGONS 20 80" in text
    assert "SCALARS f double 1" in text
    with pytest.raises(ValueError):
        write_vtk(p, ico0, {"bad": np.arange(3.0)})


def test_transfer_vertex_field_nested(sphere2, sphere3):
    vals = np.arange(sphere3.n_vertices, dtype=float)
    out = transfer_vertex_field(sphere3, sphere2, vals)
    np.testing.assert_array_equal(out, vals[: sphere2.n_vertices])
