import math
import time

import numpy as np
import pytest

from tacgraph import graph as gr
from tacgraph import sensor_sim as ss

QUIET = ss.DeformationParams(noise_std=0.0)


def _undirected(edges):
    return {tuple(sorted(map(int, e))) for e in edges}


@pytest.mark.parametrize("kind,expected", [("hexagonal127", 762), ("round331", 1986)])
def test_knn_edge_counts(kind, expected):
    g = gr.knn_graph(ss.rest_frame(ss.build_layout(kind)), 6)
    assert g.edge_index.shape == (expected, 2)
    assert g.num_features == 2
    assert not np.any(g.edge_index[:, 0] == g.edge_index[:, 1])


def test_knn_two_nodes():
    g = gr.knn_graph(np.array([[0.0, 0.0], [1.0, 0.0]]), 1)
    assert {tuple(e) for e in g.edge_index.tolist()} == {(0, 1), (1, 0)}


def test_knn_ties_go_to_lower_id():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    e = gr.knn_edges(pts, 2)
    assert e[:2, 1].tolist() == [1, 2]


def test_knn_k_too_large():
    with pytest.raises(ValueError):
        gr.knn_graph(np.zeros((3, 2)) + np.arange(3)[:, None], 3)


def test_three_points_three_edges():
    assert len(gr.delaunay_triangulation([[0, 0], [1, 0], [0, 1]])) == 3


def test_collinear_is_degenerate():
    with pytest.raises(gr.DegenerateGeometryError):
        gr.delaunay_triangulation([[0, 0], [1, 1], [2, 2], [3, 3]])


def test_unit_square_diagonal_rule():
    edges = _undirected(gr.delaunay_triangulation([[0, 0], [1, 0], [1, 1], [0, 1]]))
    assert len(edges) == 5
    # both diagonals are Delaunay; the rule keeps the lexicographically smaller pair
    assert (0, 2) in edges and (1, 3) not in edges


@pytest.mark.parametrize("kind,directed", [("hexagonal127", 744), ("round331", 1860)])
def test_delaunay_counts_near_reference(kind, directed):
    g = gr.delaunay_graph(ss.rest_frame(ss.build_layout(kind)))
    assert abs(len(g.edge_index) - directed) <= 0.02 * directed


def _circumcircle(a, b, c):
    d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
    uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
    centre = np.array([ux, uy])
    return centre, np.linalg.norm(a - centre)


def test_empty_circumcircle_random_frames():
    rng = np.random.default_rng(7)
    for _ in range(200):
        pts = rng.uniform(-10, 10, size=(30, 2))
        tris = gr.delaunay_triangles(pts)
        assert len(_undirected(gr.delaunay_triangulation(pts))) <= 3 * 30 - 6
        for t in tris:
            c, r = _circumcircle(*pts[t])
            others = np.delete(pts, t, axis=0)
            assert np.all(np.linalg.norm(others - c, axis=1) >= r - 1e-9)


@pytest.mark.parametrize("kind", ["hexagonal127", "round331"])
def test_planarity_on_deformed_frames(kind):
    layout = ss.build_layout(kind)
    for i, y in enumerate(np.linspace(0, 4, 5)):
        f = ss.deform(layout, ss.ContactPose(y, 20 * i - 40, 3.0, -3.0), seed=i)
        assert len(gr.delaunay_triangulation(f.positions)) <= 3 * len(layout) - 6


def test_voronoi_graph_shapes():
    hexf = ss.rest_frame(ss.build_layout("hexagonal127"))
    g = gr.build_graph(hexf, "voronoi")
    assert g.node_features.shape == (127, 3)
    assert abs(len(g.edge_index) - 744) <= 0.02 * 744
    g = gr.build_graph(ss.rest_frame(ss.build_layout("round331")), "voronoi")
    assert g.node_features.shape == (331, 3)
    assert np.all(g.node_features[:, 2] > 0) and np.all(np.isfinite(g.node_features))


def test_hexagonal_takes_virtual_node_branch():
    res = gr.voronoi_features(ss.rest_frame(ss.build_layout("hexagonal127")))
    assert not res.convex
    assert len(res.virtual_nodes) == 36
    res = gr.voronoi_features(ss.rest_frame(ss.build_layout("round331")))
    assert res.convex and len(res.virtual_nodes) == 0


def test_interior_lattice_cell_is_regular_hexagon():
    a = 2.0
    layout = ss.build_layout("hexagonal127", pitch=a, lens_k=0.0)
    res = gr.voronoi_features(ss.rest_frame(layout))
    expected = math.sqrt(3) / 2 * a * a
    interior = np.flatnonzero(layout.rings <= 4)
    for i in interior:
        cell = res.cells[i]
        assert len(cell.polygon) == 6
        assert cell.area == pytest.approx(expected, rel=1e-6)


def test_square_corners_equal_areas():
    res = gr.voronoi_features(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), l_scale=2.0)
    assert np.ptp(res.areas) < 1e-12
    assert res.areas[0] > 0


def test_cells_match_shoelace_and_are_convex():
    layout = ss.build_layout("round331")
    res = gr.voronoi_features(ss.deform(layout, ss.ContactPose(3.0, 10.0, 2.0, 2.0), seed=2))
    for cell in res.cells:
        assert cell.area == pytest.approx(gr.shoelace(cell.polygon), rel=1e-9)
        rel = np.roll(cell.polygon, -1, axis=0) - cell.polygon
        turn = rel[:, 0] * np.roll(rel, -1, axis=0)[:, 1] - rel[:, 1] * np.roll(rel, -1, axis=0)[:, 0]
        assert np.all(turn > -1e-12)


def _inside_convex(poly, p):
    e = np.roll(poly, -1, axis=0) - poly
    w = p - poly
    return np.all(e[:, 0] * w[:, 1] - e[:, 1] * w[:, 0] >= -1e-12)


def test_interior_cells_partition_the_plane():
    layout = ss.build_layout("round331")
    pts = layout.markers
    res = gr.voronoi_features(ss.rest_frame(layout))
    interior = np.flatnonzero(layout.rings <= 8)
    # every interior cell vertex is equidistant to its owner and the nearest site
    for i in interior:
        for v in res.cells[i].polygon:
            d = np.linalg.norm(pts - v, axis=1)
            assert d[i] == pytest.approx(d.min(), abs=1e-9)
    # points inside the region tiled by interior cells fall in exactly one cell, the nearest site's
    rng = np.random.default_rng(0)
    probe = rng.uniform(-6.5, 6.5, size=(1500, 2))
    probe = probe[np.linalg.norm(probe, axis=1) < 6.5]
    for p in probe:
        hits = [i for i in interior if _inside_convex(res.cells[i].polygon, p)]
        assert len(hits) >= 1
        owner = int(np.argmin(np.linalg.norm(pts - p, axis=1)))
        assert owner in hits and len(hits) <= 3     # >1 only on shared edges
    assert res.areas[interior].sum() == pytest.approx(
        sum(gr.shoelace(res.cells[i].polygon) for i in interior), rel=1e-12)


def test_contact_centre_area_grows():
    layout = ss.build_layout("round331")
    rest = gr.voronoi_features(ss.rest_frame(layout)).areas
    pressed = gr.voronoi_features(ss.deform(layout, ss.ContactPose(4.0, 0.0, 0.0, 0.0), QUIET)).areas
    assert pressed[0] > rest[0]


def test_monotone_depth_response():
    layout = ss.build_layout("round331")
    for theta in (-20.0, 0.0, 20.0):
        c = np.array([QUIET.roll_offset_gain * math.radians(theta), 0.0])
        near = np.linalg.norm(layout.markers - c, axis=1) <= QUIET.contact_sigma
        means = [gr.voronoi_features(ss.deform(layout, ss.ContactPose(y, theta, 0, 0), QUIET)).areas[near].mean()
                 for y in np.linspace(0, 5, 11)]
        assert np.all(np.diff(means) >= 0)


def test_small_l_scale_rejected():
    with pytest.raises(ValueError):
        gr.voronoi_features(ss.rest_frame(ss.build_layout("round331")), l_scale=1.0)


def test_graph_json_round_trip():
    g = gr.build_graph(ss.rest_frame(ss.build_layout("hexagonal127")), "voronoi")
    back = gr.TactileGraph.from_json(g.to_json())
    assert back.kind is gr.GraphKind.VORONOI
    assert np.array_equal(back.edge_index, g.edge_index)
    assert np.allclose(back.node_features, g.node_features)


def test_timings_are_recorded():
    gr.collect_timings(reset=True)
    f = ss.rest_frame(ss.build_layout("hexagonal127"))
    for kind in ("knn", "delaunay", "voronoi"):
        gr.build_graph(f, kind)
    t = gr.collect_timings(reset=True)
    assert all(len(t[k]) == 1 for k in ("knn", "delaunay", "voronoi"))
    assert gr.collect_timings() == {} or all(len(v) == 0 for v in gr.collect_timings().values())


def test_voronoi_latency():
    layout = ss.build_layout("round331")
    frames = [ss.deform(layout, ss.ContactPose(2 + i % 3, 5.0 * (i % 7) - 15, 1.0, 1.0), seed=i) for i in range(20)]
    gr.build_graph(frames[0], "voronoi")
    t0 = time.perf_counter()
    for f in frames:
        gr.build_graph(f, "voronoi")
    assert (time.perf_counter() - t0) / len(frames) < 0.05
