"""Geographic plumbing: projection, domain polygons, covariate grids."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
SNAP_TOLERANCE_KM = 2.0


class GeoError(ValueError):
    """Invalid geographic input. ``index`` lists offending records when known."""

    def __init__(self, message, index=None):
        self.index = None if index is None else [int(i) for i in np.atleast_1d(index)]
        super().__init__(message)


class ExtrapolationError(GeoError):
    pass


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project(lon, lat, center):
    """Azimuthal equidistant projection about ``center = (lon0, lat0)``.

    Returns planar ``(x, y)`` in km east/north of the centre on a sphere of
    mean Earth radius.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    bad = ~(np.isfinite(lon) & np.isfinite(lat) & (np.abs(lat) <= 89.9) & (np.abs(lon) <= 180.0))
    if np.any(bad):
        raise GeoError("coordinates out of range", np.flatnonzero(bad))
    lam0, phi0 = np.radians(center[0]), np.radians(center[1])
    lam, phi = np.radians(lon), np.radians(lat)
    dlam = lam - lam0
    cos_c = np.sin(phi0) * np.sin(phi) + np.cos(phi0) * np.cos(phi) * np.cos(dlam)
    cos_c = np.clip(cos_c, -1.0, 1.0)
    c = np.arccos(cos_c)
    sin_c = np.sin(c)
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(c < 1e-12, 1.0, c / np.where(sin_c == 0, 1.0, sin_c))
    x = EARTH_RADIUS_KM * k * np.cos(phi) * np.sin(dlam)
    y = EARTH_RADIUS_KM * k * (np.cos(phi0) * np.sin(phi) - np.sin(phi0) * np.cos(phi) * np.cos(dlam))
    return x, y


def inverse_project(x, y, center):
    """Inverse of :func:`project`; returns ``(lon, lat)`` in degrees."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lam0, phi0 = np.radians(center[0]), np.radians(center[1])
    rho = np.hypot(x, y)
    c = rho / EARTH_RADIUS_KM
    sin_c, cos_c = np.sin(c), np.cos(c)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rho > 0, y * sin_c / np.where(rho > 0, rho, 1.0), 0.0)
    phi = np.arcsin(np.clip(cos_c * np.sin(phi0) + ratio * np.cos(phi0), -1.0, 1.0))
    lam = lam0 + np.arctan2(x * sin_c, rho * np.cos(phi0) * cos_c - y * np.sin(phi0) * sin_c)
    lon = (np.degrees(lam) + 180.0) % 360.0 - 180.0
    return lon, np.degrees(phi)


def great_circle_km(lon1, lat1, lon2, lat2):
    """Great-circle distance via the spherical law of cosines."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    cosd = np.sin(p1) * np.sin(p2) + np.cos(p1) * np.cos(p2) * np.cos(dl)
    return EARTH_RADIUS_KM * np.arccos(np.clip(cosd, -1.0, 1.0))


# ---------------------------------------------------------------------------
# domain polygon
# ---------------------------------------------------------------------------


def _close(ring):
    ring = np.asarray(ring, dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 3:
        raise GeoError("polygon ring needs at least 3 (x, y) vertices")
    if not np.allclose(ring[0], ring[-1]):
        ring = np.vstack([ring, ring[:1]])
    return ring


@dataclass(frozen=True, eq=False)
class DomainPolygon:
    """Study window in planar km: one outer ring and optional holes.

    Rings are stored closed (first vertex repeated last).
    """

    outer: np.ndarray
    holes: tuple = ()
    geom: Polygon = field(init=False, repr=False)

    def __post_init__(self):
        outer = _close(self.outer)
        holes = tuple(_close(h) for h in self.holes)
        geom = Polygon(outer, [h for h in holes])
        if not geom.is_valid:
            raise GeoError(f"invalid polygon: {shapely.is_valid_reason(geom)}")
        if geom.area <= 0:
            raise GeoError("polygon has zero area")
        object.__setattr__(self, "outer", outer)
        object.__setattr__(self, "holes", holes)
        object.__setattr__(self, "geom", geom)

    @classmethod
    def from_shapely(cls, geom: Polygon) -> "DomainPolygon":
        geom = shapely.geometry.polygon.orient(geom, 1.0)
        return cls(np.asarray(geom.exterior.coords), tuple(np.asarray(r.coords) for r in geom.interiors))

    @classmethod
    def rectangle(cls, x0, y0, x1, y1) -> "DomainPolygon":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))

    @property
    def area(self) -> float:
        return float(self.geom.area)

    @property
    def bounds(self):
        return self.geom.bounds

    def segments(self) -> np.ndarray:
        """All boundary segments as an ``(k, 2, 2)`` array."""
        segs = []
        for ring in (self.outer, *self.holes):
            segs.append(np.stack([ring[:-1], ring[1:]], axis=1))
        return np.concatenate(segs, axis=0)

    def contains(self, x, y, tol=0.0) -> np.ndarray:
        """Points inside or within ``tol`` km of the polygon."""
        pts = shapely.points(np.asarray(x, float), np.asarray(y, float))
        g = self.geom if tol <= 0 else self.geom.buffer(tol)
        return np.asarray(shapely.covers(g, pts))


def shoelace_area(ring) -> float:
    ring = _close(ring)
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * abs(float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1])))


def distance_to_coast(x, y, coast: DomainPolygon, chunk: int = 4096) -> np.ndarray:
    """Minimum Euclidean distance (km) from each point to the polygon boundary."""
    segs = coast.segments()
    if len(segs) == 0:
        raise GeoError("empty coastline polygon")
    px = np.atleast_1d(np.asarray(x, dtype=float))
    py = np.atleast_1d(np.asarray(y, dtype=float))
    a = segs[:, 0]
    ab = segs[:, 1] - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ab2 = np.where(ab2 > 0, ab2, 1.0)
    out = np.empty(px.size)
    for s in range(0, px.size, chunk):
        p = np.stack([px[s : s + chunk], py[s : s + chunk]], axis=1)
        ap = p[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("pkj,kj->pk", ap, ab) / ab2, 0.0, 1.0)
        d = ap - t[..., None] * ab[None]
        out[s : s + chunk] = np.sqrt(np.min(np.einsum("pkj,pkj->pk", d, d), axis=1))
    return out


def snap_to_domain(x, y, domain: DomainPolygon, tolerance: float = SNAP_TOLERANCE_KM):
    """Move points lying just outside the domain onto its boundary.

    Points outside by at most ``tolerance`` km are snapped to the nearest
    boundary point; points further out are rejected.

    Returns
    -------
    x, y : ndarray
        Coordinates of the kept points.
    keep : ndarray of bool
        Mask over the input points.
    snapped : ndarray of bool
        Mask over the kept points flagging snapped ones.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = domain.contains(x, y)
    out_idx = np.flatnonzero(~inside)
    x2, y2 = x.copy(), y.copy()
    keep = inside.copy()
    snapped = np.zeros(x.size, bool)
    if out_idx.size:
        d = distance_to_coast(x[out_idx], y[out_idx], domain)
        near = out_idx[d <= tolerance]
        boundary = domain.geom.boundary
        for i in near:
            q = boundary.interpolate(boundary.project(shapely.Point(x[i], y[i])))
            x2[i], y2[i] = q.x, q.y
        keep[near] = True
        snapped[near] = True
        rejected = out_idx[d > tolerance]
        if rejected.size:
            logger.warning("rejected %d points on land beyond %.1f km", rejected.size, tolerance)
    return x2[keep], y2[keep], keep, snapped[keep]


# ---------------------------------------------------------------------------
# covariate grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CovariateGrid:
    """Node-registered raster: ``values[j, i]`` sits at ``(x0 + i dx, y0 + j dy)``."""

    x0: float
    y0: float
    dx: float
    dy: float
    values: np.ndarray
    month: int | None = None
    year: int | None = None
    missing: float = float("nan")

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise GeoError("grid values must be a 2-D matrix")
        if not (self.dx > 0 and self.dy > 0):
            raise GeoError("grid spacing must be positive")
        object.__setattr__(self, "values", v)

    @property
    def ny(self) -> int:
        return self.values.shape[0]

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    def node_coords(self):
        xs = self.x0 + self.dx * np.arange(self.nx)
        ys = self.y0 + self.dy * np.arange(self.ny)
        return xs, ys

    def missing_mask(self) -> np.ndarray:
        v = self.values
        if np.isnan(self.missing):
            return ~np.isfinite(v)
        return (v == self.missing) | ~np.isfinite(v)

    def geometry(self) -> dict:
        return dict(x0=self.x0, y0=self.y0, dx=self.dx, dy=self.dy, nx=self.nx, ny=self.ny)


def bilinear(grid: CovariateGrid, x, y, return_flags: bool = False):
    """Bilinear interpolation of a node-registered grid.

    Points outside the grid hull raise :class:`ExtrapolationError`. When one
    of the four surrounding nodes is missing, the nearest non-missing node
    value is used and the point is flagged.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    fx = (x - grid.x0) / grid.dx
    fy = (y - grid.y0) / grid.dy
    eps = 1e-9
    outside = (fx < -eps) | (fy < -eps) | (fx > grid.nx - 1 + eps) | (fy > grid.ny - 1 + eps)
    if np.any(outside):
        raise ExtrapolationError("points outside the covariate grid", np.flatnonzero(outside))
    fx = np.clip(fx, 0, grid.nx - 1)
    fy = np.clip(fy, 0, grid.ny - 1)
    i0 = np.minimum(np.floor(fx).astype(int), max(grid.nx - 2, 0))
    j0 = np.minimum(np.floor(fy).astype(int), max(grid.ny - 2, 0))
    i1 = np.minimum(i0 + 1, grid.nx - 1)
    j1 = np.minimum(j0 + 1, grid.ny - 1)
    tx = fx - i0
    ty = fy - j0
    v = grid.values
    miss = grid.missing_mask()
    out = (
        (1 - tx) * (1 - ty) * v[j0, i0]
        + tx * (1 - ty) * v[j0, i1]
        + (1 - tx) * ty * v[j1, i0]
        + tx * ty * v[j1, i1]
    )
    flagged = miss[j0, i0] | miss[j0, i1] | miss[j1, i0] | miss[j1, i1]
    if np.any(flagged):
        good = np.argwhere(~miss)
        if good.size == 0:
            raise GeoError("covariate grid has no valid cells")
        from scipy.spatial import cKDTree

        tree = cKDTree(good[:, ::-1] * np.array([grid.dx, grid.dy]))
        q = np.stack([fx[flagged] * grid.dx, fy[flagged] * grid.dy], axis=1)
        _, k = tree.query(q)
        out[flagged] = v[good[k, 0], good[k, 1]]
    if return_flags:
        return out, flagged
    return out


def write_grid(grid: CovariateGrid, stem) -> tuple[Path, Path]:
    """Write ``<stem>.grid.json`` and ``<stem>.grid.bin`` (little-endian float64)."""
    stem = str(stem)
    for suffix in (".grid.json", ".grid.bin"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    meta = grid.geometry()
    meta.update(month=grid.month, year=grid.year, missing=None if np.isnan(grid.missing) else grid.missing)
    jpath, bpath = Path(stem + ".grid.json"), Path(stem + ".grid.bin")
    from .io import atomic_write

    atomic_write(jpath, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    atomic_write(bpath, grid.values.astype("<f8").tobytes())
    return jpath, bpath


def read_grid(path) -> CovariateGrid:
    path = str(path)
    stem = path[: -len(".grid.json")] if path.endswith(".grid.json") else path
    stem = stem[: -len(".grid.bin")] if stem.endswith(".grid.bin") else stem
    meta = json.loads(Path(stem + ".grid.json").read_text())
    raw = np.fromfile(stem + ".grid.bin", dtype="<f8")
    nx, ny = int(meta["nx"]), int(meta["ny"])
    if raw.size != nx * ny:
        raise GeoError(f"{stem}.grid.bin holds {raw.size} values, expected {nx * ny}")
    missing = meta.get("missing")
    return CovariateGrid(
        float(meta["x0"]),
        float(meta["y0"]),
        float(meta["dx"]),
        float(meta["dy"]),
        raw.reshape(ny, nx),
        month=meta.get("month"),
        year=meta.get("year"),
        missing=float("nan") if missing is None else float(missing),
    )


def read_domain(path, center=None):
    """Read a GeoJSON-subset ``Polygon``.

    The ``crs`` member is ``"km"`` (planar, default) or ``"lonlat"``. Lon/lat
    rings are projected about ``center`` (default: mean of the outer ring).

    Returns the polygon and the projection centre (``None`` for planar input).
    """
    obj = json.loads(Path(path).read_text())
    if obj.get("type") == "Feature":
        obj = {**obj["geometry"], **{k: v for k, v in obj.items() if k == "crs"}}
    if obj.get("type") != "Polygon":
        raise GeoError(f"{path}: expected a GeoJSON Polygon, got {obj.get('type')!r}")
    rings = [np.asarray(r, dtype=float) for r in obj["coordinates"]]
    crs = obj.get("crs", "km")
    if isinstance(crs, dict):
        crs = crs.get("name", "km")
    if crs == "lonlat":
        if center is None:
            center = obj.get("center") or tuple(rings[0][:-1].mean(axis=0))
        rings = [np.stack(project(r[:, 0], r[:, 1], center), axis=1) for r in rings]
    elif crs != "km":
        raise GeoError(f"{path}: unknown crs {crs!r}")
    else:
        center = obj.get("center", center)
    poly = DomainPolygon.from_shapely(Polygon(rings[0], rings[1:]))
    return poly, (None if center is None else tuple(float(c) for c in center))


def domain_to_geojson(domain: DomainPolygon, center=None) -> dict:
    obj = {
        "type": "Polygon",
        "crs": "km",
        "coordinates": [r.tolist() for r in (domain.outer, *domain.holes)],
    }
    if center is not None:
        obj["center"] = list(center)
    return obj


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    mean: float
    sd: float

    def apply(self, values):
        return (np.asarray(values, dtype=float) - self.mean) / self.sd

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.sd + self.mean


def standardize(values):
    """Centre and scale to sample sd 1. Returns ``(z, mean, sd)``."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise ValueError("standardize needs at least two values")
    mean = float(np.mean(v))
    sd = float(np.std(v, ddof=1))
    if not sd > 0 or sd < 1e-300:
        raise ValueError("zero variance covariate")
    return (v - mean) / sd, mean, sd
