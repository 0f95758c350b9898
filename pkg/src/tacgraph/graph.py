"""Tactile graph construction: kNN, Delaunay and Voronoi-augmented graphs.

Triangulations and Voronoi diagrams come from Qhull (scipy.spatial). Qhull
resolves cocircular ties arbitrarily, so the triangulation is post-processed
with edge flips until every cocircular quadrilateral carries the
lexicographically smaller diagonal. That makes edge sets a function of the
input alone.
"""

from __future__ import annotations

import enum
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, Voronoi

from .sensor_sim import MarkerFrame

DEFAULT_K = 6
DEFAULT_L_SCALE = 1.3
_COCIRCULAR_TOL = 1e-10


class DegenerateGeometryError(ValueError):
    pass


class UnboundedCellError(RuntimeError):
    def __init__(self, node: int):
        super().__init__(f"Voronoi region of node {node} is unbounded after filtering; "
                         "increase l_scale")
        self.node = node


class GraphKind(str, enum.Enum):
    KNN = "knn"
    DELAUNAY = "delaunay"
    VORONOI = "voronoi"

    @classmethod
    def parse(cls, value: "str | GraphKind") -> "GraphKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown graph kind {value!r}") from None


@dataclass
class TactileGraph:
    node_features: np.ndarray       # (N, F): x, y [, area]
    edge_index: np.ndarray          # (E, 2) directed pairs
    kind: GraphKind
    build_seconds: float = field(default=0.0, compare=False)

    @property
    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.node_features.shape[1])

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "num_nodes": self.num_nodes,
            "node_features": self.node_features.tolist(),
            "edge_index": self.edge_index.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "TactileGraph":
        n = int(data["num_nodes"])
        feats = np.asarray(data["node_features"], dtype=float)
        if feats.size == 0:
            feats = feats.reshape(n, 2)
        if feats.shape[0] != n:
            raise ValueError(f"num_nodes={n} but {feats.shape[0]} feature rows")
        edges = np.asarray(data["edge_index"], dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValueError("edge_index references a node outside the graph")
        return cls(feats, edges, GraphKind.parse(data["kind"]))


@dataclass
class VoronoiCell:
    owner: int
    polygon: np.ndarray     # (M, 2), counter-clockwise
    area: float


@dataclass
class VoronoiResult:
    areas: np.ndarray
    cells: list[VoronoiCell]
    convex: bool                        # outer ring coincides with strict hull vertices
    outermost: np.ndarray               # node ids of the outer ring
    virtual_nodes: np.ndarray           # (V, 2), empty on the convex branch
    boundary_nodes: np.ndarray          # enlarged boundary sites
    convex_edges: np.ndarray | None     # edges among nodes from the augmented triangulation


# -- timing ---------------------------------------------------------------

_timing_lock = threading.Lock()
_timing_buckets: list[dict] = []
_timing_local = threading.local()


def _record(kind: GraphKind, seconds: float) -> None:
    bucket = getattr(_timing_local, "bucket", None)
    if bucket is None:
        bucket = _timing_local.bucket = {}
        with _timing_lock:
            _timing_buckets.append(bucket)
    bucket.setdefault(kind.value, []).append(seconds)


def collect_timings(reset: bool = False) -> dict[str, list[float]]:
    """Merge the per-thread build timings recorded by build_graph."""
    merged: dict[str, list[float]] = {}
    with _timing_lock:
        for bucket in _timing_buckets:
            for kind, vals in bucket.items():
                merged.setdefault(kind, []).extend(vals)
            if reset:
                bucket.clear()
    return merged


# -- kNN -------------------------------------------------------------------

def _positions(frame_or_points) -> np.ndarray:
    if isinstance(frame_or_points, MarkerFrame):
        return frame_or_points.positions
    return np.asarray(frame_or_points, dtype=float).reshape(-1, 2)


def knn_edges(points, k: int = DEFAULT_K) -> np.ndarray:
    pts = _positions(points)
    n = len(pts)
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < N (k={k}, N={n})")
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    # rounding makes lattice ties exact so the stable sort breaks them by id
    d = np.round(d, 9)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    return np.stack([src, nbrs.ravel()], axis=1)


def knn_graph(frame, k: int = DEFAULT_K) -> TactileGraph:
    """Each node points at its k nearest neighbours; N*k directed edges."""
    pts = _positions(frame)
    return TactileGraph(pts.copy(), knn_edges(pts, k), GraphKind.KNN)


# -- Delaunay ----------------------------------------------------------------

def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _incircle(a, b, c, d) -> float:
    """Positive if d is inside the circle through a, b, c (ccw), scale-free."""
    rows = []
    for p in (a, b, c):
        dx, dy = p[0] - d[0], p[1] - d[1]
        rows.append((dx, dy, dx * dx + dy * dy))
    (a0, a1, a2), (b0, b1, b2), (c0, c1, c2) = rows
    det = (a0 * (b1 * c2 - b2 * c1) - a1 * (b0 * c2 - b2 * c0) + a2 * (b0 * c1 - b1 * c0))
    scale = max(a2, b2, c2) ** 2
    det = det / scale if scale > 0 else 0.0
    return det if _orient(a, b, c) > 0 else -det


def _check_triangulable(pts: np.ndarray) -> None:
    if len(pts) < 3:
        raise DegenerateGeometryError(f"need at least 3 points, got {len(pts)}")
    centred = pts - pts.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("all points are collinear")


def _incircle_many(a, b, c, d) -> np.ndarray:
    """Vectorised ``_incircle`` for ccw triangles (a, b, c)."""
    ad, bd, cd = a - d, b - d, c - d
    a2, b2, c2 = (ad ** 2).sum(1), (bd ** 2).sum(1), (cd ** 2).sum(1)
    det = (ad[:, 0] * (bd[:, 1] * c2 - b2 * cd[:, 1])
           - ad[:, 1] * (bd[:, 0] * c2 - b2 * cd[:, 0])
           + a2 * (bd[:, 0] * cd[:, 1] - bd[:, 1] * cd[:, 0]))
    scale = np.maximum(np.maximum(a2, b2), c2) ** 2
    return det / np.where(scale > 0, scale, 1.0)


def delaunay_triangles(points) -> np.ndarray:
    """Delaunay triangles (T, 3) with the lexicographic diagonal rule on cocircular quads."""
    pts = _positions(points)
    _check_triangulable(pts)
    dt = Delaunay(pts)
    simp, nbr = dt.simplices, dt.neighbors
    p0, p1, p2 = pts[simp[:, 0]], pts[simp[:, 1]], pts[simp[:, 2]]
    area2 = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    ccw = np.where((area2 < 0)[:, None], simp[:, [0, 2, 1]], simp)

    # screen interior edges for cocircular quads whose other diagonal sorts first
    t_idx, local = np.nonzero(nbr >= 0)
    other = nbr[t_idx, local]
    keep = t_idx < other
    t_idx, local, other = t_idx[keep], local[keep], other[keep]
    c = simp[t_idx, local]
    ea, eb = simp[t_idx, (local + 1) % 3], simp[t_idx, (local + 2) % 3]
    d = simp[other, np.argmax(nbr[other] == t_idx[:, None], axis=1)]
    t = ccw[t_idx]
    ic = _incircle_many(pts[t[:, 0]], pts[t[:, 1]], pts[t[:, 2]], pts[d])
    edge_lo, alt_lo = np.minimum(ea, eb), np.minimum(c, d)
    alt_first = (alt_lo < edge_lo) | ((alt_lo == edge_lo) & (np.maximum(c, d) < np.maximum(ea, eb)))
    candidates = np.abs(ic) <= _COCIRCULAR_TOL
    valid = np.abs(area2) > 0
    if not (candidates & alt_first).any() and valid.all():
        return np.sort(simp, axis=1)

    tris = [tuple(sorted(t)) for t, ok in zip(simp.tolist(), valid) if ok]
    edge_tris: dict[tuple[int, int], set[tuple[int, int, int]]] = {}
    for t in tris:
        for e in ((t[0], t[1]), (t[0], t[2]), (t[1], t[2])):
            edge_tris.setdefault(e, set()).add(t)

    def flip_target(e):
        owners = edge_tris.get(e)
        if owners is None or len(owners) != 2:
            return None
        t1, t2 = owners
        a, b = e
        c = next(v for v in t1 if v not in e)
        d = next(v for v in t2 if v not in e)
        alt = (min(c, d), max(c, d))
        if alt >= e or alt in edge_tris:
            return None
        pa, pb, pc, pd = pts[a], pts[b], pts[c], pts[d]
        if abs(_incircle(pa, pb, pc, pd)) > _COCIRCULAR_TOL:
            return None
        # the quad must be strictly convex for the flip to be valid
        if _orient(pc, pd, pa) * _orient(pc, pd, pb) >= 0:
            return None
        return t1, t2, a, b, c, d

    queue = sorted((int(min(a, b)), int(max(a, b))) for a, b in zip(ea[candidates], eb[candidates]))
    while queue:
        e = queue.pop()
        hit = flip_target(e)
        if hit is None:
            continue
        t1, t2, a, b, c, d = hit
        for t in (t1, t2):
            for f in ((t[0], t[1]), (t[0], t[2]), (t[1], t[2])):
                edge_tris[f].discard(t)
        del edge_tris[e]
        for t in (tuple(sorted((a, c, d))), tuple(sorted((b, c, d)))):
            for f in ((t[0], t[1]), (t[0], t[2]), (t[1], t[2])):
                edge_tris.setdefault(f, set()).add(t)
        for f in ((a, c), (a, d), (b, c), (b, d)):
            queue.append((min(f), max(f)))

    out = {t for owners in edge_tris.values() for t in owners}
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 3)


def _triangle_edges(tris: np.ndarray) -> np.ndarray:
    if len(tris) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([tris[:, [0, 1]], tris[:, [0, 2]], tris[:, [1, 2]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def delaunay_triangulation(points) -> np.ndarray:
    """Undirected Delaunay edges (i < j), sorted."""
    return _triangle_edges(delaunay_triangles(points))


def symmetrize(edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    both = np.concatenate([edges, edges[:, ::-1]])
    return np.unique(both, axis=0)


def delaunay_graph(frame) -> TactileGraph:
    pts = _positions(frame)
    return TactileGraph(pts.copy(), symmetrize(delaunay_triangulation(pts)), GraphKind.DELAUNAY)


# -- Voronoi features --------------------------------------------------------

def shoelace(polygon: np.ndarray) -> float:
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _hull_boundary(pts: np.ndarray, hull: ConvexHull) -> np.ndarray:
    # hull vertices plus points lying on hull edges
    scale = float(np.ptp(pts, axis=0).max())
    dist = pts @ hull.equations[:, :2].T + hull.equations[:, 2]
    return np.flatnonzero(dist.max(axis=1) >= -1e-9 * scale)


def _angle_order(pts: np.ndarray, centre: np.ndarray) -> np.ndarray:
    rel = pts - centre
    return np.argsort(np.arctan2(rel[:, 1], rel[:, 0]), kind="stable")


def voronoi_features(frame, l_scale: float = DEFAULT_L_SCALE) -> VoronoiResult:
    """Bounded Voronoi cell area per node.

    The outer ring is tested against the strict convex-hull vertices. If they
    differ, virtual nodes (the outer ring rotated about the centroid by half
    its mean angular spacing) complete the boundary. The boundary set is then
    scaled by ``l_scale`` about the centroid and added as extra sites so that
    every real node owns a bounded region.
    """
    if l_scale <= 1:
        raise ValueError("l_scale must exceed 1")
    pts = _positions(frame)
    _check_triangulable(pts)
    layout = frame.layout if isinstance(frame, MarkerFrame) else None
    centre = layout.markers.mean(axis=0) if layout is not None else pts.mean(axis=0)

    hull = ConvexHull(pts)
    strict = np.sort(hull.vertices)
    outer = layout.outer_ring if layout is not None else None
    if outer is None:
        outer = _hull_boundary(pts, hull)
    convex = np.array_equal(np.sort(outer), strict)

    virtual = np.zeros((0, 2))
    convex_edges = None
    if convex:
        outermost = pts[strict]
    else:
        ring = pts[outer][_angle_order(pts[outer], centre)]
        half = math.pi / len(ring)
        rot = np.array([[math.cos(half), -math.sin(half)], [math.sin(half), math.cos(half)]])
        virtual = (ring - centre) @ rot.T + centre
        aug_edges = delaunay_triangulation(np.vstack([pts, virtual]))
        n = len(pts)
        convex_edges = aug_edges[(aug_edges < n).all(axis=1)]
        outermost = np.vstack([ring, virtual])

    bound = centre + l_scale * (outermost - centre)
    vor = Voronoi(np.vstack([pts, bound]))
    regions = [vor.regions[r] for r in vor.point_region[:len(pts)]]
    for i, region in enumerate(regions):
        if not region or -1 in region:
            raise UnboundedCellError(i)
    sizes = np.array([len(r) for r in regions])
    owner = np.repeat(np.arange(len(pts)), sizes)
    verts = vor.vertices[np.concatenate(regions)]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    mid = np.add.reduceat(verts, starts, axis=0) / sizes[:, None]
    rel = verts - mid[owner]
    order = np.lexsort((np.arctan2(rel[:, 1], rel[:, 0]), owner))
    verts, rel = verts[order], rel[order]
    nxt = np.arange(len(verts)) + 1
    nxt[starts + sizes - 1] = starts
    cross = rel[:, 0] * rel[nxt, 1] - rel[:, 1] * rel[nxt, 0]
    areas = 0.5 * np.abs(np.add.reduceat(cross, starts))
    bad = np.flatnonzero(~(np.isfinite(areas) & (areas > 0)))
    if len(bad):
        raise UnboundedCellError(int(bad[0]))
    cells = [VoronoiCell(i, verts[s:s + m], float(a))
             for i, (s, m, a) in enumerate(zip(starts, sizes, areas))]
    return VoronoiResult(areas, cells, bool(convex), np.asarray(outer), virtual, bound, convex_edges)


# -- entry point -------------------------------------------------------------

def build_graph(frame, kind: "GraphKind | str" = GraphKind.VORONOI, k: int = DEFAULT_K,
                l_scale: float = DEFAULT_L_SCALE) -> TactileGraph:
    """Graph for one frame. Voronoi graphs carry (x, y, area) on Delaunay edges."""
    kind = GraphKind.parse(kind)
    t0 = time.perf_counter()
    if kind is GraphKind.KNN:
        g = knn_graph(frame, k)
    elif kind is GraphKind.DELAUNAY:
        g = delaunay_graph(frame)
    else:
        pts = _positions(frame)
        vr = voronoi_features(frame, l_scale)
        edges = symmetrize(delaunay_triangulation(pts))
        g = TactileGraph(np.column_stack([pts, vr.areas]), edges, GraphKind.VORONOI)
    g.build_seconds = time.perf_counter() - t0
    _record(kind, g.build_seconds)
    return g
