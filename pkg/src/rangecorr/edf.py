"""Euclidean distance field cost maps built from route waypoints.

Pipeline: waypoints -> cubic-spline densification -> binary occupancy grid on
a latitude/longitude lattice -> exact Euclidean distance transform (meters)
-> 5x5 Gaussian smoothing -> bilinear sampling with analytic gradients.

Grid convention: row ``i`` is latitude, column ``j`` is longitude, and cell
``(i, j)`` is centered at ``origin + (i * dlat, j * dlon)`` (degrees).
"""
from __future__ import annotations

import csv
import math
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy.interpolate import CubicSpline

from .geo import WGS84_A, WGS84_E2

MAP_MAGIC = b"EDFMAP\x00\x00"
MAP_VERSION = 1
# little-endian: magic, version, origin lat/lon, dlat/dlon (deg), rows, cols, smoothed
_HEADER = struct.Struct("<8sI4d2IB")


@dataclass
class RoutePolyline:
    """Ordered route waypoints as ``(K, 2)`` radians ``(lat, lon)``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] < 2:
            raise ValueError("route points must be (K, 2) lat/lon")
        self.points = pts[:, :2].copy()
        if len(self.points) < 1:
            raise ValueError("empty route")

    @classmethod
    def from_degrees(cls, latlon_deg):
        return cls(np.radians(np.asarray(latlon_deg, dtype=float)))

    def __len__(self):
        return len(self.points)


@dataclass
class EdfCostMap:
    origin: tuple  # (lat_deg, lon_deg) of cell (0, 0)
    resolution: tuple  # (dlat_deg, dlon_deg)
    grid: np.ndarray  # potentials in meters
    smoothed: bool = False

    @property
    def shape(self):
        return self.grid.shape

    def cell_of(self, lat, lon):
        """Fractional cell coordinates of radian lat/lon."""
        fi = (np.degrees(lat) - self.origin[0]) / self.resolution[0]
        fj = (np.degrees(lon) - self.origin[1]) / self.resolution[1]
        return fi, fj

    def cell_center(self, i, j):
        """Radian lat/lon of cell center(s)."""
        return (
            np.radians(self.origin[0] + np.asarray(i) * self.resolution[0]),
            np.radians(self.origin[1] + np.asarray(j) * self.resolution[1]),
        )


def meters_per_degree(lat_rad: float) -> tuple[float, float]:
    """Local (north, east) meters per degree of latitude/longitude on WGS-84."""
    s = math.sin(lat_rad)
    w = 1.0 - WGS84_E2 * s * s
    m = WGS84_A * (1.0 - WGS84_E2) / w**1.5
    n = WGS84_A / math.sqrt(w)
    return m * math.pi / 180.0, n * math.cos(lat_rad) * math.pi / 180.0


def _local_xy(points: np.ndarray, lat0: float) -> np.ndarray:
    my, mx = meters_per_degree(lat0)
    deg = np.degrees(points)
    return np.column_stack([deg[:, 0] * my, deg[:, 1] * mx])


def interpolate_route(route: RoutePolyline, spacing: float) -> RoutePolyline:
    """Densify ``route`` with a natural cubic spline at most ``spacing`` m apart.

    The spline is parameterized by cumulative chord length (local meters) and
    every original waypoint is kept exactly.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    pts = route.points
    if len(pts) < 2:
        raise ValueError("route needs at least two waypoints")
    xy = _local_xy(pts, float(pts[:, 0].mean()))
    chord = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    if np.any(chord == 0.0):
        raise ValueError("duplicate consecutive waypoints")
    s = np.concatenate([[0.0], np.cumsum(chord)])
    spline = CubicSpline(s, pts, bc_type="natural", axis=0)

    lat0 = float(pts[:, 0].mean())
    params = [s[:1]]
    for a, b, c in zip(s[:-1], s[1:], chord):
        k = max(1, int(math.ceil(c / spacing)))
        while True:
            # the curve between knots is longer than the chord; refine until every gap fits
            seg = a + (b - a) * np.arange(0, k + 1) / k
            gaps = np.linalg.norm(np.diff(_local_xy(spline(seg), lat0), axis=0), axis=1)
            if gaps.max() <= spacing:
                break
            k = int(math.ceil(k * gaps.max() / spacing)) + 1
        params.append(seg[1:])
    t = np.concatenate(params)
    dense = spline(t)
    # pin the knots exactly
    knot_idx = np.searchsorted(t, s)
    dense[knot_idx] = pts
    return RoutePolyline(dense)


@dataclass
class Raster:
    occupancy: np.ndarray  # uint8, 1 on route cells
    origin: tuple
    resolution: tuple


def resolution_for(lat_rad: float, cell_m: float = 1.0) -> tuple[float, float]:
    """Degrees per cell giving ``cell_m`` meter cells at latitude ``lat_rad``."""
    my, mx = meters_per_degree(lat_rad)
    return cell_m / my, cell_m / mx


def rasterize(route: RoutePolyline, resolution, margin: float) -> Raster:
    """Mark every cell containing a route sample; bounding box = extent + margin (m)."""
    pts = np.degrees(route.points)
    if len(pts) == 0:
        raise ValueError("empty route")
    dlat, dlon = float(resolution[0]), float(resolution[1])
    my, mx = meters_per_degree(math.radians(pts[:, 0].mean()))
    mlat, mlon = margin / my, margin / mx
    lat0 = pts[:, 0].min() - mlat
    lon0 = pts[:, 1].min() - mlon
    rows = int(math.floor((pts[:, 0].max() + mlat - lat0) / dlat + 0.5)) + 1
    cols = int(math.floor((pts[:, 1].max() + mlon - lon0) / dlon + 0.5)) + 1
    grid = np.zeros((rows, cols), dtype=np.uint8)
    i = np.floor((pts[:, 0] - lat0) / dlat + 0.5).astype(int)
    j = np.floor((pts[:, 1] - lon0) / dlon + 0.5).astype(int)
    grid[i, j] = 1
    return Raster(grid, (lat0, lon0), (dlat, dlon))


_INF = 1e20


@njit(cache=True)
def _dt1d(f, spacing, out, v, z):
    # lower envelope of parabolas (Felzenszwalb & Huttenlocher)
    n = f.shape[0]
    s2 = spacing * spacing
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        while True:
            p = v[k]
            s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = spacing * (q - v[k])
        out[q] = d * d + f[v[k]]


@njit(cache=True)
def _edt_sq(occ, sy, sx):
    rows, cols = occ.shape
    tmp = np.empty((rows, cols))
    out = np.empty((rows, cols))
    n = max(rows, cols)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    f = np.empty(rows)
    col_out = np.empty(rows)
    for j in range(cols):
        for i in range(rows):
            f[i] = 0.0 if occ[i, j] else _INF
        _dt1d(f, sy, col_out, v, z)
        tmp[:, j] = col_out
    row_out = np.empty(cols)
    for i in range(rows):
        _dt1d(tmp[i].copy(), sx, row_out, v, z)
        out[i] = row_out
    return out


def edt(grid, spacing=(1.0, 1.0)) -> np.ndarray:
    """Exact Euclidean distance from every cell to the nearest occupied cell.

    ``spacing`` is the (row, column) cell size; the default returns cell units.
    """
    occ = np.asarray(grid) != 0
    if not occ.any():
        raise ValueError("grid has no occupied cells")
    d2 = _edt_sq(occ, float(spacing[0]), float(spacing[1]))
    return np.sqrt(d2)


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def smooth(cost_map: EdfCostMap) -> EdfCostMap:
    """5x5 Gaussian (sigma 1) lowpass with replicate borders."""
    if cost_map.smoothed:
        raise ValueError("map is already smoothed")
    k = gaussian_kernel()
    r = k.shape[0] // 2
    g = np.pad(cost_map.grid, r, mode="edge")
    rows, cols = cost_map.grid.shape
    out = np.zeros((rows, cols))
    for a in range(k.shape[0]):
        for b in range(k.shape[1]):
            out += k[a, b] * g[a : a + rows, b : b + cols]
    return EdfCostMap(cost_map.origin, cost_map.resolution, out, smoothed=True)


def sample_cost(cost_map: EdfCostMap, lat, lon):
    """Bilinear cost and its gradient w.r.t. radian ``(lat, lon)``.

    Returns ``(cost, grad)`` where ``grad[..., 0]`` is d cost / d lat and
    ``grad[..., 1]`` is d cost / d lon. Points outside the grid clamp to the
    border and get zero gradient along each clamped axis.
    """
    grid = cost_map.grid
    rows, cols = grid.shape
    fi, fj = cost_map.cell_of(np.asarray(lat, dtype=float), np.asarray(lon, dtype=float))
    fi = np.atleast_1d(fi)
    fj = np.atleast_1d(fj)
    in_i = (fi >= 0) & (fi <= rows - 1)
    in_j = (fj >= 0) & (fj <= cols - 1)
    fi = np.clip(fi, 0, rows - 1)
    fj = np.clip(fj, 0, cols - 1)
    i0 = np.clip(np.floor(fi).astype(int), 0, rows - 2)
    j0 = np.clip(np.floor(fj).astype(int), 0, cols - 2)
    ti = fi - i0
    tj = fj - j0
    v00 = grid[i0, j0]
    v01 = grid[i0, j0 + 1]
    v10 = grid[i0 + 1, j0]
    v11 = grid[i0 + 1, j0 + 1]
    cost = (1 - ti) * (1 - tj) * v00 + (1 - ti) * tj * v01 + ti * (1 - tj) * v10 + ti * tj * v11
    d_fi = (1 - tj) * (v10 - v00) + tj * (v11 - v01)
    d_fj = (1 - ti) * (v01 - v00) + ti * (v11 - v10)
    d_fi = np.where(in_i, d_fi, 0.0)
    d_fj = np.where(in_j, d_fj, 0.0)
    grad = np.stack(
        [
            d_fi * (180.0 / math.pi) / cost_map.resolution[0],
            d_fj * (180.0 / math.pi) / cost_map.resolution[1],
        ],
        axis=-1,
    )
    shape = np.shape(lat)
    return cost.reshape(shape), grad.reshape(shape + (2,))


def build_cost_map(route: RoutePolyline, cell_m: float = 1.0, margin: float = 150.0, smoothed: bool = True):
    """Full pipeline from sparse waypoints to a (smoothed) cost map."""
    lat_mid = float(route.points[:, 0].mean())
    res = resolution_for(lat_mid, cell_m)
    dense = interpolate_route(route, 0.5 * cell_m)
    raster = rasterize(dense, res, margin)
    lat_c = math.radians(raster.origin[0] + 0.5 * (raster.occupancy.shape[0] - 1) * res[0])
    my, mx = meters_per_degree(lat_c)
    dist = edt(raster.occupancy, spacing=(res[0] * my, res[1] * mx))
    cmap = EdfCostMap(raster.origin, raster.resolution, dist, smoothed=False)
    return smooth(cmap) if smoothed else cmap


def save_map(cost_map: EdfCostMap, path) -> None:
    """Write the map: fixed little-endian header, then row-major float64 grid."""
    rows, cols = cost_map.grid.shape
    header = _HEADER.pack(
        MAP_MAGIC,
        MAP_VERSION,
        float(cost_map.origin[0]),
        float(cost_map.origin[1]),
        float(cost_map.resolution[0]),
        float(cost_map.resolution[1]),
        rows,
        cols,
        int(cost_map.smoothed),
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cost_map.grid, dtype="<f8").tobytes())
    tmp.replace(path)


def load_map(path) -> EdfCostMap:
    data = Path(path).read_bytes()
    magic, version, lat0, lon0, dlat, dlon, rows, cols, smoothed = _HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise ValueError(f"{path}: not an EDF map file")
    if version != MAP_VERSION:
        raise ValueError(f"{path}: unsupported map version {version}")
    grid = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=rows * cols).reshape(rows, cols)
    return EdfCostMap((lat0, lon0), (dlat, dlon), grid.astype(float), bool(smoothed))


def read_route(path) -> RoutePolyline:
    """Read waypoints from a ``lat_deg,lon_deg`` CSV or a KML LineString."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".kml" or text.lstrip().startswith("<"):
        return _parse_kml(text)
    rows = []
    for rec in csv.reader(text.splitlines()):
        if not rec or rec[0].strip().startswith("#"):
            continue
        try:
            rows.append((float(rec[0]), float(rec[1])))
        except ValueError:
            if rows:
                raise
            continue  # header line
    return RoutePolyline.from_degrees(rows)


def _parse_kml(text: str) -> RoutePolyline:
    root = ET.fromstring(text)
    pts = []
    for el in root.iter():
        if el.tag.split("}")[-1] != "LineString":
            continue
        for child in el.iter():
            if child.tag.split("}")[-1] == "coordinates" and child.text:
                for tup in child.text.split():
                    vals = [float(v) for v in tup.split(",")]
                    pts.append((vals[1], vals[0]))
    if not pts:
        raise ValueError("no LineString coordinates found in KML")
    return RoutePolyline.from_degrees(pts)


def route_distance(route: RoutePolyline, lat, lon) -> np.ndarray:
    """Exact distance (m) from radian ``lat``/``lon`` points to the route polyline.

    Uses the same local equirectangular plane as the map builder, centered at
    the route's mean latitude.
    """
    lat0 = float(route.points[:, 0].mean())
    my, mx = meters_per_degree(lat0)
    pts = np.column_stack([np.degrees(route.points[:, 0]) * my, np.degrees(route.points[:, 1]) * mx])
    q = np.column_stack([np.degrees(np.ravel(lat)) * my, np.degrees(np.ravel(lon)) * mx])
    a = pts[:-1]
    d = pts[1:] - a
    seg_len2 = np.einsum("ij,ij->i", d, d)
    t = np.einsum("qij,ij->qi", q[:, None, :] - a[None], d) / np.where(seg_len2 > 0, seg_len2, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(q[:, None, :] - closest, axis=-1).min(axis=1)
    return dist.reshape(np.shape(lat))
