import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Point

from coxmesh.geo import DomainPolygon, shoelace_area
from coxmesh.mesh import (
    MeshError,
    OutsideMeshError,
    build_mesh,
    dual_weights,
    grid_mesh,
    locate,
    projector,
    read_mesh,
    write_mesh,
)


@pytest.fixture(scope="module")
def square_mesh():
    return build_mesh(DomainPolygon.rectangle(0, 0, 1, 1), 0.25)


class TestBuildMesh:
    def test_interior_edge_band(self, square_mesh):
        m = square_mesh
        e = m.edges()
        length = np.linalg.norm(m.vertices[e[:, 0]] - m.vertices[e[:, 1]], axis=1)
        interior = ~(m.boundary[e[:, 0]] & m.boundary[e[:, 1]])
        assert length[interior].min() >= 0.12
        assert length[interior].max() <= 0.5

    def test_min_angle(self, square_mesh):
        assert square_mesh.min_angles().min() >= 20.0 - 1e-9

    def test_positive_orientation(self, square_mesh):
        assert np.all(square_mesh.triangle_areas() > 0)

    def test_no_duplicate_vertices(self, square_mesh):
        v = square_mesh.vertices
        d = np.linalg.norm(v[:, None] - v[None], axis=2) + np.eye(len(v))
        assert d.min() > 1e-9

    def test_hull_contains_convex_domain(self):
        dom = DomainPolygon(np.array([[0, 0], [3, 0], [4, 2], [1, 3]]))
        m = build_mesh(dom, 0.4, outer_extension=1.0)
        assert m.hull().buffer(1e-9).contains(dom.geom)

    def test_buffer_ring_coarser(self):
        dom = DomainPolygon.rectangle(0, 0, 2, 2)
        m = build_mesh(dom, 0.2, outer_extension=2.0, outer_res=0.8)
        areas = m.triangle_areas()
        cent = m.vertices[m.triangles].mean(axis=1)
        inside = dom.contains(cent[:, 0], cent[:, 1])
        assert np.median(areas[~inside]) > 3 * np.median(areas[inside])
        assert m.min_angles().min() >= 20.0 - 1e-9

    def test_deterministic(self):
        dom = DomainPolygon(np.array([[0, 0], [3, 0], [4, 2], [1, 3]]))
        a = build_mesh(dom, 0.3, 1.0)
        b = build_mesh(dom, 0.3, 1.0)
        assert a.vertices.tobytes() == b.vertices.tobytes()
        assert a.triangles.tobytes() == b.triangles.tobytes()

    def test_holes_respected(self):
        hole = np.array([[1, 1], [2, 1], [2, 2], [1, 2]])
        dom = DomainPolygon(np.array([[0, 0], [3, 0], [3, 3], [0, 3]]), (hole,))
        m = build_mesh(dom, 0.3)
        cent = m.vertices[m.triangles].mean(axis=1)
        assert not np.any((cent[:, 0] > 1) & (cent[:, 0] < 2) & (cent[:, 1] > 1) & (cent[:, 1] < 2))

    def test_bad_resolution(self):
        with pytest.raises(MeshError):
            build_mesh(DomainPolygon.rectangle(0, 0, 1, 1), 0.0)


class TestDualWeights:
    def test_grid_interior_cell(self):
        m = grid_mesh(0, 0, 1, 1, 10, 10)
        w = dual_weights(m, DomainPolygon.rectangle(0, 0, 1, 1))
        interior = ~m.boundary
        np.testing.assert_allclose(w[interior], 0.01, rtol=1e-9)
        np.testing.assert_allclose(w.sum(), 1.0, rtol=1e-9)

    def test_sum_is_shoelace_area(self):
        rng = np.random.default_rng(7)
        t = np.sort(rng.uniform(0, 2 * np.pi, 12))
        r = rng.uniform(2, 3, 12)
        ring = np.stack([r * np.cos(t), r * np.sin(t)], 1)
        dom = DomainPolygon(ring)
        m = build_mesh(dom, 0.4, outer_extension=1.0)
        w = dual_weights(m, dom)
        np.testing.assert_allclose(w.sum(), shoelace_area(ring), rtol=1e-6)
        assert np.all(w >= 0)

    def test_zero_only_outside(self):
        dom = DomainPolygon.rectangle(0, 0, 2, 2)
        m = build_mesh(dom, 0.3, outer_extension=1.5, outer_res=0.6)
        w = dual_weights(m, dom)
        assert np.all(w[m.inner] > 0)
        far = np.array([dom.geom.distance(Point(v)) > 0.7 for v in m.vertices])
        assert np.all(w[far] == 0)


class TestProjector:
    def test_vertex_and_centroid(self, square_mesh):
        m = square_mesh
        k = 5
        A = projector(m, [m.vertices[k, 0]], [m.vertices[k, 1]]).toarray()
        np.testing.assert_allclose(A[0], np.eye(m.n)[k], atol=1e-12)
        c = m.vertices[m.triangles[3]].mean(axis=0)
        row = projector(m, [c[0]], [c[1]]).toarray()[0]
        np.testing.assert_allclose(row[m.triangles[3]], [1 / 3] * 3, atol=1e-12)

    def test_affine_reproduction(self, square_mesh):
        m = square_mesh
        rng = np.random.default_rng(8)
        p = rng.uniform(0, 1, (300, 2))
        A = projector(m, p[:, 0], p[:, 1])
        g = 1.5 * m.vertices[:, 0] - 0.7 * m.vertices[:, 1] + 2.0
        np.testing.assert_allclose(A @ g, 1.5 * p[:, 0] - 0.7 * p[:, 1] + 2.0, atol=1e-10)
        np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel(), 1.0, atol=1e-12)
        assert np.diff(A.indptr).max() <= 3
        assert A.data.min() >= 0 and A.data.max() <= 1

    def test_outside_points_listed(self, square_mesh):
        with pytest.raises(OutsideMeshError) as err:
            projector(square_mesh, [0.5, 2.0, 0.2, -1.0], [0.5, 0.5, 0.2, 0.0])
        assert err.value.index == [1, 3]

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_affine_property(self, x, y, a, b):
        m = grid_mesh(0, 0, 1, 1, 4, 4)
        t, bc = locate(m, [x], [y])
        v = m.vertices[m.triangles[t[0]]]
        np.testing.assert_allclose(bc[0] @ (a * v[:, 0] + b * v[:, 1]), a * x + b * y, atol=1e-10)


class TestSerialization:
    def test_round_trip(self, tmp_path, square_mesh):
        w = dual_weights(square_mesh, DomainPolygon.rectangle(0, 0, 1, 1))
        write_mesh(square_mesh, tmp_path / "m", w)
        m2, w2 = read_mesh(tmp_path / "m.mesh.json")
        np.testing.assert_array_equal(m2.vertices, square_mesh.vertices)
        np.testing.assert_array_equal(m2.triangles, square_mesh.triangles)
        np.testing.assert_array_equal(m2.boundary, square_mesh.boundary)
        np.testing.assert_array_equal(w2, w)
