import numpy as np
import pytest

from src.errors import InvalidArgumentError
from src.mesh import (
    Triangulation,
    build_topology,
    edge_lengths,
    generate_lshape,
    generate_unit_square,
    mesh_from_text,
    mesh_to_text,
    minimum_angle,
    read_mesh,
    refine_nvb,
    write_mesh,
)


def _tag_lengths(tri, tag):
    x = tri.vertices
    bd = tri.boundary_edges[tri.boundary_tags == tag]
    return float(np.linalg.norm(x[bd[:, 1]] - x[bd[:, 0]], axis=1).sum())


def test_unit_square_counts():
    tri = generate_unit_square(2)
    assert tri.n_vertices == 9
    assert tri.n_triangles == 8
    assert len(tri.boundary_edges) == 8
    assert tri.area == pytest.approx(1.0)
    assert tri.h == pytest.approx(0.5)
    assert np.all(tri.signed_areas > 0)


def test_unit_square_tags_cover_each_side():
    tri = generate_unit_square(3)
    for tag in (1, 2, 3, 4):
        assert _tag_lengths(tri, tag) == pytest.approx(1.0)


def test_lshape_geometry():
    tri = generate_lshape(1)
    assert tri.n_triangles == 6
    assert len(tri.boundary_edges) == 8
    assert tri.area == pytest.approx(3.0)
    assert set(np.unique(tri.boundary_tags)) == {1, 2, 3, 4, 5, 6}
    assert _tag_lengths(tri, 6) == pytest.approx(2.0)
    # the reentrant corner is a vertex
    assert np.any(np.all(np.isclose(tri.vertices, 0.0), axis=1))


@pytest.mark.parametrize("n", [0, -1, 1.5, True])
def test_invalid_resolution(n):
    with pytest.raises(InvalidArgumentError):
        generate_unit_square(n)


def test_refinement_edge_is_longest():
    tri = generate_unit_square(4)
    lengths = edge_lengths(tri)
    assert np.allclose(lengths[:, 0], lengths.max(axis=1))


def test_topology_normals(square4):
    topo = build_topology(square4)
    x = square4.vertices
    centroids = x[square4.triangles].mean(axis=1)
    mid = 0.5 * (x[topo.edges[:, 0]] + x[topo.edges[:, 1]])
    plus = topo.triangles_of_edge[:, 0]
    outward = np.einsum("ij,ij->i", topo.normals, mid - centroids[plus])
    assert np.all(outward > 0)
    assert np.allclose(np.linalg.norm(topo.normals, axis=1), 1.0)

    interior = topo.interior_edge_ids
    minus = topo.triangles_of_edge[interior, 1]
    across = np.einsum("ij,ij->i", topo.normals[interior], centroids[minus] - centroids[plus[interior]])
    assert np.all(across > 0)
    assert len(topo.boundary_edge_ids) == 16
    assert topo.n_edges == 56


def test_topology_areas_and_gradients(square4):
    topo = build_topology(square4)
    assert topo.areas.sum() == pytest.approx(1.0)
    # barycentric gradients sum to zero
    assert np.allclose(topo.grad_lambda.sum(axis=1), 0.0)


def test_refine_nothing_returns_same_mesh(square2):
    assert refine_nvb(square2, []) is square2


def test_refine_out_of_range(square2):
    with pytest.raises(InvalidArgumentError):
        refine_nvb(square2, [square2.n_triangles])


def test_refine_all_bisects_each_triangle(square2):
    fine = refine_nvb(square2, range(square2.n_triangles))
    assert fine.n_triangles == 2 * square2.n_triangles
    assert fine.area == pytest.approx(1.0)
    assert np.all(fine.signed_areas > 0)
    build_topology(fine)
    for tag in (1, 2, 3, 4):
        assert _tag_lengths(fine, tag) == pytest.approx(1.0)


def test_refine_closure_stays_conforming(rng):
    tri = generate_lshape(2)
    for _ in range(6):
        marked = rng.choice(tri.n_triangles, size=max(1, tri.n_triangles // 5), replace=False)
        tri = refine_nvb(tri, marked)
        topo = build_topology(tri)
        assert np.count_nonzero(~topo.interior) == len(tri.boundary_edges)
    assert tri.area == pytest.approx(3.0)


def test_refine_keeps_minimum_angle():
    tri = generate_unit_square(2)
    initial = minimum_angle(tri)
    for _ in range(8):
        centroids = tri.vertices[tri.triangles].mean(axis=1)
        marked = [int(np.argmin(np.linalg.norm(centroids, axis=1)))]
        count = tri.n_triangles
        tri = refine_nvb(tri, marked)
        assert tri.n_triangles > count
    assert minimum_angle(tri) >= initial - 1e-12
    assert tri.reported_h is None
    assert tri.h == pytest.approx(tri.diameters.max())


def test_mesh_text_round_trip(tmp_path, rng):
    tri = refine_nvb(generate_unit_square(2), [0, 3])
    again = mesh_from_text(mesh_to_text(tri))
    np.testing.assert_array_equal(again.vertices, tri.vertices)
    np.testing.assert_array_equal(again.triangles, tri.triangles)
    np.testing.assert_array_equal(again.boundary_tags, tri.boundary_tags)

    path = tmp_path / "mesh.txt"
    write_mesh(tri, str(path))
    assert path.read_text().splitlines()[0] == f"{tri.n_vertices} {tri.n_triangles} {len(tri.boundary_edges)}"
    np.testing.assert_array_equal(read_mesh(str(path)).triangles, tri.triangles)


def test_mesh_from_text_malformed():
    with pytest.raises(InvalidArgumentError):
        mesh_from_text("3 1 3\n0 0\n1 0\n")


def test_degenerate_triangle_rejected():
    with pytest.raises(InvalidArgumentError):
        Triangulation.from_arrays(np.array([[0, 0], [1, 0], [2, 0]]), np.array([[0, 1, 2]]))


def test_from_arrays_orients_counterclockwise():
    tri = Triangulation.from_arrays(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), np.array([[0, 1, 2]]))
    assert tri.signed_areas[0] == pytest.approx(0.5)
    assert len(tri.boundary_edges) == 3


def test_refine_honours_stored_refinement_edge(square2):
    rolled = Triangulation(
        vertices=square2.vertices,
        triangles=np.roll(square2.triangles, -1, axis=1),
        refinement_edge=np.full(square2.n_triangles, 2),
        boundary_edges=square2.boundary_edges,
        boundary_tags=square2.boundary_tags,
        reported_h=square2.reported_h,
    )
    expected = refine_nvb(square2, [0, 5])
    refined = refine_nvb(rolled, [0, 5])
    np.testing.assert_array_equal(refined.vertices, expected.vertices)
    np.testing.assert_array_equal(refined.triangles, expected.triangles)
    np.testing.assert_array_equal(refined.boundary_edges, expected.boundary_edges)
