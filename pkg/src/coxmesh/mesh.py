"""Constrained triangular meshes, dual-cell quadrature weights and projectors."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import shapely
import triangle as tr
from matplotlib.tri import Triangulation
from shapely.geometry import MultiPoint, Polygon, box

from .geo import DomainPolygon
from .io import atomic_write

MIN_ANGLE_DEG = 20.0


class MeshError(ValueError):
    pass


class OutsideMeshError(MeshError):
    def __init__(self, index):
        self.index = [int(i) for i in np.atleast_1d(index)]
        preview = ", ".join(map(str, self.index[:10]))
        super().__init__(f"{len(self.index)} point(s) outside the mesh: {preview}")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulation with counter-clockwise triangles.

    ``boundary`` flags vertices on the outer mesh boundary; ``inner`` flags
    vertices inside (or on) the study domain.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    inner: np.ndarray

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def m(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def min_angles(self) -> np.ndarray:
        """Smallest interior angle of each triangle in degrees."""
        p = self.vertices[self.triangles]
        ang = []
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            ang.append(np.degrees(np.arccos(np.clip(cos, -1, 1))))
        return np.min(ang, axis=0)

    def hull(self) -> Polygon:
        tris = shapely.polygons(self.vertices[self.triangles])
        return shapely.union_all(tris)


def _segmentize(geom, length):
    return shapely.segmentize(geom, max_segment_length=length) if length > 0 else geom


def _ring_pslg(coords, offset):
    pts = np.asarray(coords)[:-1]
    k = len(pts)
    segs = np.stack([np.arange(k), (np.arange(k) + 1) % k], axis=1) + offset
    return pts, segs


def build_mesh(
    domain: DomainPolygon,
    inner_res: float,
    outer_extension: float = 0.0,
    outer_res: float | None = None,
    min_angle: float = MIN_ANGLE_DEG,
) -> Mesh:
    """Quality-constrained Delaunay mesh of ``domain`` plus a buffer ring.

    The domain boundary is a constraint. When ``outer_extension > 0`` the
    mesh extends to the convex hull of the domain dilated by that many km,
    with maximal edge length ``outer_res`` (default ``4 * inner_res``) in
    the ring. Triangle sizes grade smoothly between the two regions.
    The construction has no random component, so it is deterministic.
    """
    if not inner_res > 0:
        raise MeshError("inner_res must be positive")
    if outer_extension < 0:
        raise MeshError("outer_extension must be non-negative")
    if outer_res is None:
        outer_res = 4.0 * inner_res
    geom = domain.geom
    if geom.area < 1e-12:
        raise MeshError("degenerate domain polygon")

    dom = _segmentize(geom, inner_res)
    pts, segs = [], []
    off = 0
    for ring in (dom.exterior, *dom.interiors):
        p, s = _ring_pslg(ring.coords, off)
        pts.append(p)
        segs.append(s)
        off += len(p)
    holes = [np.asarray(Polygon(r).representative_point().coords[0]) for r in dom.interiors]
    inner_area = np.sqrt(3) / 4 * inner_res**2
    outer_area = np.sqrt(3) / 4 * outer_res**2
    regions = [[*geom.representative_point().coords[0], 1, inner_area]]
    if outer_extension > 0:
        outer = geom.convex_hull.buffer(outer_extension, quad_segs=8)
        outer = shapely.simplify(outer, outer_res / 20.0)
        outer = _segmentize(outer, outer_res)
        p, s = _ring_pslg(outer.exterior.coords, off)
        pts.append(p)
        segs.append(s)
        ring_region = outer.difference(geom)
        for part in getattr(ring_region, "geoms", [ring_region]):
            if part.area > 0:
                regions.append([*part.representative_point().coords[0], 2, outer_area])
    pslg = dict(vertices=np.concatenate(pts), segments=np.concatenate(segs), regions=np.array(regions))
    if holes:
        pslg["holes"] = np.array(holes)
    flags = f"pq{min_angle:g}aAQ"
    out = tr.triangulate(pslg, flags)
    verts = np.asarray(out["vertices"], dtype=float)
    tris = np.asarray(out["triangles"], dtype=np.int64)
    # orient counter-clockwise
    p = verts[tris]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    tris[cross < 0] = tris[cross < 0][:, [0, 2, 1]]
    boundary = _boundary_vertices(len(verts), tris)
    inner = domain.contains(verts[:, 0], verts[:, 1], tol=1e-9)
    mesh = Mesh(verts, tris, boundary, inner)
    if np.any(mesh.triangle_areas() < 1e-12):
        raise MeshError("degenerate triangle produced")
    return mesh


def _boundary_vertices(n, tris):
    e = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    flags = np.zeros(n, bool)
    flags[uniq[counts == 1].ravel()] = True
    return flags


def grid_mesh(x0, y0, x1, y1, nx, ny) -> Mesh:
    """Structured mesh of a rectangle split into right triangles (tests, examples)."""
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    boundary = _boundary_vertices(len(verts), tris)
    return Mesh(verts, tris, boundary, np.ones(len(verts), bool))


# ---------------------------------------------------------------------------
# dual weights
# ---------------------------------------------------------------------------


def dual_weights(mesh: Mesh, domain: DomainPolygon) -> np.ndarray:
    """Voronoi cell area of every vertex clipped to the domain (km^2)."""
    geom = domain.geom
    xmin, ymin, xmax, ymax = mesh.hull().bounds
    pad = max(xmax - xmin, ymax - ymin) + 1.0
    env = box(xmin - pad, ymin - pad, xmax + pad, ymax + pad)
    pts = shapely.points(mesh.vertices)
    cells = shapely.voronoi_polygons(MultiPoint(mesh.vertices), extend_to=env, ordered=True)
    cells = np.asarray(shapely.get_parts(cells))
    if len(cells) != mesh.n or not np.all(shapely.covers(cells, pts)):
        cells = _match_cells(cells, pts)
    shapely.prepare(geom)
    w = np.zeros(mesh.n)
    hit = shapely.intersects(geom, cells)
    w[hit] = shapely.area(shapely.intersection(cells[hit], geom))
    return w


def _match_cells(cells, pts):
    tree = shapely.STRtree(cells)
    pi, ci = tree.query(pts, predicate="within")
    out = np.empty(len(pts), dtype=object)
    out[pi] = cells[ci]
    return out


# ---------------------------------------------------------------------------
# projector
# ---------------------------------------------------------------------------


def locate(mesh: Mesh, x, y, tol: float = 1e-9):
    """Containing triangle and barycentric coordinates for each point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    tri = Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles)
    finder = tri.get_trifinder()
    t = np.asarray(finder(x, y), dtype=np.int64)
    miss = np.flatnonzero(t < 0)
    if miss.size:
        # points on the hull boundary: nearest triangle by barycentric slack
        cent = mesh.vertices[mesh.triangles].mean(axis=1)
        from scipy.spatial import cKDTree

        tree = cKDTree(cent)
        k = min(16, mesh.m)
        _, cand = tree.query(np.stack([x[miss], y[miss]], 1), k=k)
        cand = np.atleast_2d(cand)
        for row, i in enumerate(miss):
            bc = _bary(mesh, cand[row], np.repeat(x[i], k), np.repeat(y[i], k))
            slack = bc.min(axis=1)
            best = int(np.argmax(slack))
            if slack[best] >= -tol:
                t[i] = cand[row, best]
        bad = np.flatnonzero(t < 0)
        if bad.size:
            raise OutsideMeshError(bad)
    bc = _bary(mesh, t, x, y)
    bc = np.clip(bc, 0.0, 1.0)
    bc /= bc.sum(axis=1, keepdims=True)
    return t, bc


def _bary(mesh, t, x, y):
    p = mesh.vertices[mesh.triangles[t]]
    x0, y0 = p[:, 0, 0], p[:, 0, 1]
    x1, y1 = p[:, 1, 0], p[:, 1, 1]
    x2, y2 = p[:, 2, 0], p[:, 2, 1]
    det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
    l0 = ((y1 - y2) * (x - x2) + (x2 - x1) * (y - y2)) / det
    l1 = ((y2 - y0) * (x - x2) + (x0 - x2) * (y - y2)) / det
    return np.stack([l0, l1, 1.0 - l0 - l1], axis=1)


def projector(mesh: Mesh, x, y) -> sp.csr_matrix:
    """Sparse piecewise-linear interpolation matrix (points x vertices)."""
    t, bc = locate(mesh, x, y)
    k = len(t)
    rows = np.repeat(np.arange(k), 3)
    cols = mesh.triangles[t].ravel()
    A = sp.csr_matrix((bc.ravel(), (rows, cols)), shape=(k, mesh.n))
    A.eliminate_zeros()
    return A


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_mesh(mesh: Mesh, stem, weights=None) -> tuple[Path, Path]:
    """Write ``<stem>.mesh.json`` (header) and ``<stem>.mesh.bin`` (arrays).

    The binary payload is little-endian: vertices as float64 ``(n, 2)``,
    triangles as int64 ``(m, 3)``, boundary and inner flags as uint8, and
    optionally the dual weights as float64.
    """
    stem = str(stem)
    for suffix in (".mesh.json", ".mesh.bin"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    header = {
        "n_vertices": mesh.n,
        "n_triangles": mesh.m,
        "has_weights": weights is not None,
        "layout": ["vertices<f8(n,2)", "triangles<i8(m,3)", "boundary|u1(n)", "inner|u1(n)", "weights<f8(n)?"],
    }
    payload = [
        mesh.vertices.astype("<f8").tobytes(),
        mesh.triangles.astype("<i8").tobytes(),
        mesh.boundary.astype("u1").tobytes(),
        mesh.inner.astype("u1").tobytes(),
    ]
    if weights is not None:
        payload.append(np.asarray(weights).astype("<f8").tobytes())
    jpath, bpath = Path(stem + ".mesh.json"), Path(stem + ".mesh.bin")
    atomic_write(bpath, b"".join(payload))
    atomic_write(jpath, json.dumps(header, indent=2, sort_keys=True) + "\n")
    return jpath, bpath


def read_mesh(path):
    """Read a mesh written by :func:`write_mesh`. Returns ``(mesh, weights)``."""
    stem = str(path)
    for suffix in (".mesh.json", ".mesh.bin"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    header = json.loads(Path(stem + ".mesh.json").read_text())
    n, m = int(header["n_vertices"]), int(header["n_triangles"])
    raw = Path(stem + ".mesh.bin").read_bytes()
    o = 0
    verts = np.frombuffer(raw, "<f8", 2 * n, o).reshape(n, 2).copy()
    o += 16 * n
    tris = np.frombuffer(raw, "<i8", 3 * m, o).reshape(m, 3).copy()
    o += 24 * m
    boundary = np.frombuffer(raw, "u1", n, o).astype(bool)
    o += n
    inner = np.frombuffer(raw, "u1", n, o).astype(bool)
    o += n
    weights = np.frombuffer(raw, "<f8", n, o).copy() if header.get("has_weights") else None
    return Mesh(verts, tris, boundary, inner), weights
