import numpy as np
import pytest

from noem import mesh as M


# -- 1D interval meshes ------------------------------------------------------


def test_interval_fe_noe_fe_layout():
    m = M.build_interval_mesh([0, 3], [1, 2], [1, "noe", 1])
    assert np.allclose(m.nodes[:, 0], [0, 1, 2, 3])
    assert len(m.noe_subdomains) == 1
    region = m.noe_subdomains[0]
    assert region.bounds == (1.0, 2.0)
    assert list(region.sensor_nodes) == [1, 2]
    assert m.fe_cells.tolist() == [[0, 1], [2, 3]]


def test_interval_uniform_refinement():
    m = M.build_interval_mesh([0, 1], [], [100])
    assert m.n_nodes == 101
    assert len(m.fe_cells) == 100
    assert np.allclose(np.diff(m.nodes[:, 0]), 0.01)


def test_interval_all_noe():
    breaks = [i / 8 for i in range(1, 8)]
    m = M.build_interval_mesh([0, 1], breaks, ["noe"] * 8)
    assert m.n_nodes == 9
    assert len(m.noe_subdomains) == 8
    assert len(m.fe_cells) == 0
    for i, r in enumerate(m.noe_subdomains):
        assert np.isclose(r.measure(), 1 / 8)
        assert list(r.sensor_nodes) == [i, i + 1]


def test_interval_rejects_unsorted_breakpoints():
    with pytest.raises(M.MeshError):
        M.build_interval_mesh([0, 3], [2, 1], [1, "noe", 1])


def test_interval_rejects_outside_breakpoints():
    with pytest.raises(M.MeshError):
        M.build_interval_mesh([0, 3], [3.5], [1, 1])


# -- 2D structured meshes ----------------------------------------------------


def test_structured_single_hole_layout():
    m = M.build_structured_mesh_2d(
        [0, 0, 1.6, 1.6], 0.1, [[0.4, 0.4, 1.2, 1.2]], holes=[((0.8, 0.8), 0.15)]
    )
    assert len(m.noe_subdomains) == 1
    region = m.noe_subdomains[0]
    assert region.kind == "box_minus_polygon"
    assert len(region.sensor_nodes) == 32
    # sensors ordered CCW from the lower-left corner of the box
    first = m.nodes[region.sensor_nodes[0]]
    assert np.allclose(first, [0.4, 0.4])
    second = m.nodes[region.sensor_nodes[1]]
    assert np.allclose(second, [0.5, 0.4])


def test_structured_darcy_layout():
    m = M.build_structured_mesh_2d([0, 0, 2, 2], 0.125, [[0.5, 0.5, 1.5, 1.5]])
    region = m.noe_subdomains[0]
    assert region.kind == "box"
    assert len(region.sensor_nodes) == 32


def test_structured_two_boxes_cell_count():
    m = M.build_structured_mesh_2d(
        [0, 0, 3, 3], 0.1, [[0.4, 0.4, 1.2, 1.2], [1.8, 1.8, 2.6, 2.6]]
    )
    # area bookkeeping oracle: each grid square not covered by a box holds
    # two triangles of area cell^2/2
    total_squares = 30 * 30
    box_squares = 2 * 8 * 8
    expected = 2 * (total_squares - box_squares)
    assert len(m.fe_cells) == expected
    assert len(m.noe_subdomains) == 2


def test_structured_rejects_nonconforming_box():
    with pytest.raises(M.MeshError):
        M.build_structured_mesh_2d([0, 0, 1, 1], 0.1, [[0.05, 0.1, 0.55, 0.6]])


def test_structured_rejects_overlapping_boxes():
    with pytest.raises(M.MeshError):
        M.build_structured_mesh_2d(
            [0, 0, 2, 2], 0.1, [[0.2, 0.2, 1.0, 1.0], [0.9, 0.9, 1.7, 1.7]]
        )


def test_structured_rejects_hole_outside_box():
    with pytest.raises(M.MeshError):
        M.build_structured_mesh_2d(
            [0, 0, 1.6, 1.6], 0.1, [[0.4, 0.4, 1.2, 1.2]], holes=[((1.4, 1.4), 0.15)]
        )


# -- partition / alignment invariants ----------------------------------------


def test_partition_measure_1d():
    m = M.build_interval_mesh([0, 3], [1, 2], [7, "noe", 13])
    assert abs(m.total_measure() - 3.0) < 1e-12 * 3.0


def test_partition_measure_2d_with_hole():
    m = M.build_structured_mesh_2d(
        [0, 0, 1.6, 1.6], 0.1, [[0.4, 0.4, 1.2, 1.2]], holes=[((0.8, 0.8), 0.15)]
    )
    poly = m.noe_subdomains[0].polygon
    expected = 1.6 * 1.6 - M.polygon_area(poly)
    assert abs(m.total_measure() - expected) < 1e-12 * expected


def test_sensor_nodes_are_fe_nodes_bitwise():
    m = M.build_structured_mesh_2d(
        [0, 0, 1.6, 1.6], 0.1, [[0.4, 0.4, 1.2, 1.2]], holes=[((0.8, 0.8), 0.15)]
    )
    fe_node_set = set(map(int, m.fe_cells.ravel()))
    for idx in m.noe_subdomains[0].sensor_nodes:
        assert int(idx) in fe_node_set


def test_mesh_determinism():
    a = M.build_structured_mesh_2d([0, 0, 2, 2], 0.125, [[0.5, 0.5, 1.5, 1.5]])
    b = M.build_structured_mesh_2d([0, 0, 2, 2], 0.125, [[0.5, 0.5, 1.5, 1.5]])
    assert np.array_equal(a.nodes, b.nodes)
    assert np.array_equal(a.fe_cells, b.fe_cells)
    assert np.array_equal(a.noe_subdomains[0].sensor_nodes, b.noe_subdomains[0].sensor_nodes)


# -- annulus triangulation ----------------------------------------------------


def test_annulus_orientation_and_no_interior_nodes():
    m = M.triangulate_annulus(
        [0, 0, 1, 1], ((0.5, 0.5), 0.15), n_polygon=32, n_rings=4, outer_refine=8
    )
    assert np.all(m.cell_measures() > 0)
    poly = M.regular_polygon((0.5, 0.5), 0.15, 32)
    inside = M.points_in_convex_polygon(m.nodes, poly, include_boundary=False)
    assert not inside.any()
    tags = set(m.boundary_tags.values())
    assert tags == {"outer", "hole"}


def test_polygon_area_formula():
    # oracle: area of the inscribed regular n-gon is n r^2 sin(2 pi / n) / 2
    r = 0.15
    for n in (8, 64):
        poly = M.regular_polygon((0.0, 0.0), r, n)
        exact = 0.5 * n * r * r * np.sin(2 * np.pi / n)
        assert abs(M.polygon_area(poly) - exact) < 1e-14
    area64 = 0.5 * 64 * r * r * np.sin(2 * np.pi / 64)
    assert abs(area64 - np.pi * r * r) / (np.pi * r * r) < 0.01
    area8 = 0.5 * 8 * r * r * np.sin(2 * np.pi / 8)
    assert abs(area8 - np.pi * r * r) / (np.pi * r * r) > 0.01


def test_annulus_min_angle_default_parameters():
    m = M.triangulate_annulus([0, 0, 1, 1], ((0.5, 0.5), 0.15), n_polygon=32, outer_refine=8)
    assert M.min_triangle_angle(m) >= 15.0


def test_annulus_fine_min_angle_and_area():
    m = M.triangulate_annulus(
        [0.4, 0.4, 1.2, 1.2], ((0.8, 0.8), 0.15), n_polygon=32, outer_refine=16
    )
    assert M.min_triangle_angle(m) >= 15.0
    poly = M.regular_polygon((0.8, 0.8), 0.15, 32)
    expected = 0.8 * 0.8 - M.polygon_area(poly)
    assert abs(m.cell_measures().sum() - expected) < 1e-10


def test_annulus_rejects_touching_hole():
    with pytest.raises(M.MeshError):
        M.triangulate_annulus([0, 0, 1, 1], ((0.9, 0.5), 0.15), n_polygon=32)


# -- dof map -------------------------------------------------------------------


def test_dof_map_partitions_indices():
    m = M.build_interval_mesh([0, 3], [1, 2], [1, "noe", 1])
    dm = M.build_dof_map(m, {0: 0.0})
    assert set(dm.free) | set(dm.constrained) == set(range(m.n_nodes))
    assert not set(dm.free) & set(dm.constrained)
    full = dm.full_vector(np.array([1.0, 2.0, 3.0]))
    assert full[0] == 0.0 and np.allclose(full[1:], [1, 2, 3])


# -- merge / serialization ----------------------------------------------------


def test_merge_meshes_dedups_shared_edge():
    a = M.triangulate_annulus([0, 0, 1.6, 1.6], ((0.8, 0.8), 0.15), outer_refine=16)
    b = M.Mesh(2, a.nodes + np.array([1.6, 0.0]), a.fe_cells.copy())
    merged = M.merge_meshes([a, b])
    assert merged.n_nodes == 2 * a.n_nodes - 17  # 17 shared edge nodes
    assert len(merged.fe_cells) == 2 * len(a.fe_cells)
    assert abs(merged.cell_measures().sum() - 2 * a.cell_measures().sum()) < 1e-9


def test_mesh_text_round_trip():
    m = M.build_structured_mesh_2d(
        [0, 0, 1.6, 1.6], 0.1, [[0.4, 0.4, 1.2, 1.2]], holes=[((0.8, 0.8), 0.15)]
    )
    text = M.mesh_to_text(m)
    back = M.mesh_from_text(text)
    assert np.array_equal(back.nodes, m.nodes)
    assert np.array_equal(back.fe_cells, m.fe_cells)
    assert back.boundary_tags == m.boundary_tags
    r0, r1 = m.noe_subdomains[0], back.noe_subdomains[0]
    assert r0.kind == r1.kind and r0.bounds == r1.bounds
    assert np.array_equal(r0.sensor_nodes, r1.sensor_nodes)
    assert np.array_equal(r0.polygon, r1.polygon)


def test_mesh_text_version_check():
    m = M.build_interval_mesh([0, 1], [], [4])
    text = M.mesh_to_text(m).replace("noem-mesh 1", "noem-mesh 99")
    with pytest.raises(M.MeshError):
        M.mesh_from_text(text)
