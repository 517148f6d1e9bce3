"""Coordinate systems, affine geotransforms and planar polygon geometry.

Only two coordinate reference systems exist here: geographic WGS84 and UTM
(any zone, either hemisphere). Projection uses the Krueger series to sixth
order in the third flattening, which is good to well under a millimetre
inside a zone.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

# WGS84 ellipsoid
WGS84_A = 6378137.0
WGS84_F = 1 / 298.257223563

UTM_K0 = 0.9996
UTM_FALSE_EASTING = 500000.0
UTM_FALSE_NORTHING_SOUTH = 10000000.0
UTM_MAX_LAT = 84.0

FULL_COVER_EPS = 1e-9


class GeoError(ValueError):
    pass


class CrsKind(str, Enum):
    GEOGRAPHIC = "geographic"
    UTM = "utm"


class Hemisphere(str, Enum):
    NORTH = "N"
    SOUTH = "S"


@dataclass(frozen=True)
class Crs:
    kind: CrsKind
    zone: int | None = None
    hemisphere: Hemisphere | None = None

    def __post_init__(self):
        if self.kind is CrsKind.UTM:
            if self.zone is None or self.hemisphere is None:
                raise GeoError("UTM crs requires zone and hemisphere")
            if not 1 <= self.zone <= 60:
                raise GeoError(f"UTM zone out of range: {self.zone}")
        elif self.zone is not None or self.hemisphere is not None:
            raise GeoError("geographic crs takes no zone/hemisphere")

    @classmethod
    def wgs84(cls) -> "Crs":
        return cls(CrsKind.GEOGRAPHIC)

    @classmethod
    def utm(cls, zone: int, hemisphere: Hemisphere | str = Hemisphere.NORTH) -> "Crs":
        return cls(CrsKind.UTM, int(zone), Hemisphere(hemisphere))

    @property
    def is_planar(self) -> bool:
        return self.kind is CrsKind.UTM

    @property
    def central_meridian(self) -> float:
        if self.zone is None:
            raise GeoError("geographic crs has no central meridian")
        return 6.0 * self.zone - 183.0

    @property
    def epsg(self) -> int:
        if self.kind is CrsKind.GEOGRAPHIC:
            return 4326
        return (32600 if self.hemisphere is Hemisphere.NORTH else 32700) + self.zone

    @classmethod
    def from_epsg(cls, code: int) -> "Crs":
        if code == 4326:
            return cls.wgs84()
        if 32601 <= code <= 32660:
            return cls.utm(code - 32600, Hemisphere.NORTH)
        if 32701 <= code <= 32760:
            return cls.utm(code - 32700, Hemisphere.SOUTH)
        raise GeoError(f"unsupported EPSG code: {code}")

    @classmethod
    def parse(cls, name: str) -> "Crs":
        """Accept 'EPSG:32633', 'urn:ogc:def:crs:EPSG::4326', 'OGC:CRS84' and friends."""
        if re.search(r"CRS84$", name, re.I):
            return cls.wgs84()
        m = re.search(r"EPSG:+(\d+)$", name, re.I)
        if not m:
            raise GeoError(f"unrecognised crs name: {name!r}")
        return cls.from_epsg(int(m.group(1)))

    def to_dict(self) -> dict:
        if self.kind is CrsKind.GEOGRAPHIC:
            return {"kind": "geographic"}
        return {"kind": "utm", "zone": self.zone, "hemisphere": self.hemisphere.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Crs":
        kind = CrsKind(str(d["kind"]).lower())
        if kind is CrsKind.GEOGRAPHIC:
            return cls.wgs84()
        return cls.utm(int(d["zone"]), d["hemisphere"])


@dataclass(frozen=True)
class GeoPoint:
    x: float
    y: float


Ring = Sequence[tuple[float, float]]


@dataclass(frozen=True)
class GeoPolygon:
    exterior: tuple[tuple[float, float], ...]
    crs: Crs
    holes: tuple[tuple[tuple[float, float], ...], ...] = ()

    def __post_init__(self):
        ext = _normalise_ring(self.exterior)
        if len(ext) < 3:
            raise GeoError("polygon ring needs at least 3 distinct vertices")
        object.__setattr__(self, "exterior", ext)
        object.__setattr__(self, "holes", tuple(_normalise_ring(h) for h in self.holes))
        pts = [p for r in (ext, *self.holes) for p in r]
        if not all(math.isfinite(c) for p in pts for c in p):
            raise GeoError("non-finite polygon coordinate")
        if self.crs.kind is CrsKind.GEOGRAPHIC:
            for lon, lat in pts:
                if not (-180 <= lon <= 180 and -90 <= lat <= 90):
                    raise GeoError(f"geographic coordinate out of range: ({lon}, {lat})")

    @property
    def rings(self) -> tuple[tuple[tuple[float, float], ...], ...]:
        return (self.exterior, *self.holes)

    def bounds(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.exterior]
        ys = [p[1] for p in self.exterior]
        return min(xs), min(ys), max(xs), max(ys)

    def centroid(self) -> GeoPoint:
        """Area-weighted centroid of the exterior ring."""
        a = cx = cy = 0.0
        ring = self.exterior
        for (x0, y0), (x1, y1) in zip(ring, ring[1:] + ring[:1]):
            c = x0 * y1 - x1 * y0
            a += c
            cx += (x0 + x1) * c
            cy += (y0 + y1) * c
        if a == 0:
            return GeoPoint(sum(p[0] for p in ring) / len(ring), sum(p[1] for p in ring) / len(ring))
        return GeoPoint(cx / (3 * a), cy / (3 * a))

    def to(self, crs: Crs) -> "GeoPolygon":
        if crs == self.crs:
            return self

        def conv(ring):
            return tuple(_xy(project(GeoPoint(*p), self.crs, crs)) for p in ring)

        return GeoPolygon(conv(self.exterior), crs, tuple(conv(h) for h in self.holes))

    def to_wkt(self) -> str:
        def ring_txt(r):
            pts = list(r) + [r[0]]
            return "(" + ", ".join(f"{x!r} {y!r}" for x, y in pts) + ")"

        return "POLYGON (" + ", ".join(ring_txt(r) for r in self.rings) + ")"

    @classmethod
    def from_wkt(cls, text: str, crs: Crs | None = None) -> "GeoPolygon":
        m = re.fullmatch(r"\s*POLYGON\s*\((.*)\)\s*", text, re.I | re.S)
        if not m:
            raise GeoError(f"only POLYGON WKT is supported: {text[:40]!r}")
        rings = []
        for body in re.findall(r"\(([^()]*)\)", m.group(1)):
            ring = []
            for pair in body.split(","):
                parts = pair.split()
                if len(parts) < 2:
                    raise GeoError(f"bad WKT coordinate: {pair!r}")
                ring.append((float(parts[0]), float(parts[1])))
            rings.append(ring)
        if not rings:
            raise GeoError("empty POLYGON WKT")
        return cls(tuple(rings[0]), crs or Crs.wgs84(), tuple(tuple(r) for r in rings[1:]))

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float, crs: Crs) -> "GeoPolygon":
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)), crs)


def _normalise_ring(ring: Iterable) -> tuple[tuple[float, float], ...]:
    pts = [(float(p[0]), float(p[1])) for p in ring]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts.pop()
    return tuple(pts)


def _xy(p: GeoPoint) -> tuple[float, float]:
    return (p.x, p.y)


# ---------------------------------------------------------------------------
# Planar polygon measures


def ring_signed_area(ring: Ring) -> float:
    """Shoelace sum; positive for counter-clockwise rings in a y-up frame."""
    if len(ring) < 3:
        return 0.0
    a = np.asarray(ring, dtype=float)
    x, y = a[:, 0], a[:, 1]
    # centring keeps large UTM coordinates from cancelling
    x = x - x.mean()
    y = y - y.mean()
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly: GeoPolygon) -> float:
    """Area in square metres; holes are subtracted."""
    if not poly.crs.is_planar:
        raise GeoError("polygon_area requires projected coordinates")
    area = abs(ring_signed_area(poly.exterior)) - sum(abs(ring_signed_area(h)) for h in poly.holes)
    return max(area, 0.0)


def point_in_ring(x: float, y: float, ring: Ring) -> bool:
    inside = False
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xc:
                inside = not inside
    return inside


def is_convex(ring: Ring) -> bool:
    n = len(ring)
    sign = 0
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        x2, y2 = ring[(i + 2) % n]
        cross = (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1)
        if cross != 0:
            s = 1 if cross > 0 else -1
            if sign == 0:
                sign = s
            elif s != sign:
                return False
    return True


def clip_ring_convex(subject: Ring, clip: Ring) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of ``subject`` against the convex ring ``clip``.

    The subject may be concave; the result may then contain zero-width
    bridges, which do not change its shoelace area.
    """
    if ring_signed_area(clip) < 0:
        clip = list(reversed(clip))
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cut(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cut(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out if len(out) >= 3 else []


def _cut(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def clip_polygon_to_rect(ring: Ring, rect: tuple[float, float, float, float]) -> list[tuple[float, float]]:
    """Clip a planar ring to the rectangle ``(xmin, ymin, xmax, ymax)``."""
    xmin, ymin, xmax, ymax = rect
    if not (xmax > xmin and ymax > ymin):
        raise GeoError("clip rectangle must have positive extent")
    out = list(ring)
    # one pass per rectangle edge, inside test against a single coordinate
    for axis, bound, keep_ge in ((0, xmin, True), (0, xmax, False), (1, ymin, True), (1, ymax, False)):
        if not out:
            break
        inp, out = out, []
        prev = inp[-1]
        for cur in inp:
            cin = cur[axis] >= bound if keep_ge else cur[axis] <= bound
            pin = prev[axis] >= bound if keep_ge else prev[axis] <= bound
            if cin:
                if not pin:
                    out.append(_axis_cut(prev, cur, axis, bound))
                out.append(cur)
            elif pin:
                out.append(_axis_cut(prev, cur, axis, bound))
            prev = cur
    return out if len(out) >= 3 else []


def _axis_cut(p, q, axis, bound):
    t = (bound - p[axis]) / (q[axis] - p[axis])
    if axis == 0:
        return (bound, p[1] + t * (q[1] - p[1]))
    return (p[0] + t * (q[0] - p[0]), bound)


def polygon_intersection_area(a: GeoPolygon, b: GeoPolygon) -> float:
    """Area of a ∩ b for planar polygons where at least one exterior is convex
    and that one has no holes."""
    if not (a.crs.is_planar and b.crs == a.crs):
        raise GeoError("intersection requires both polygons in one projected crs")
    if b.holes or not is_convex(b.exterior):
        a, b = b, a
    if b.holes or not is_convex(b.exterior):
        raise GeoError("intersection needs one convex, hole-free operand")
    area = abs(ring_signed_area(clip_ring_convex(a.exterior, b.exterior)))
    for h in a.holes:
        area -= abs(ring_signed_area(clip_ring_convex(h, b.exterior)))
    return max(area, 0.0)


# ---------------------------------------------------------------------------
# Geotransforms


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine transform. ``pixel_height`` is stored positive; rows run south."""

    origin_x: float
    origin_y: float
    pixel_width: float
    pixel_height: float
    row_rotation: float = 0.0
    col_rotation: float = 0.0

    def __post_init__(self):
        if not (self.pixel_width > 0 and self.pixel_height > 0):
            raise GeoError("pixel sizes must be positive")
        if self.row_rotation != 0 or self.col_rotation != 0:
            raise GeoError("rotated geotransforms are not supported")

    def to_gdal(self) -> list[float]:
        return [self.origin_x, self.pixel_width, 0.0, self.origin_y, 0.0, -self.pixel_height]

    @classmethod
    def from_gdal(cls, gt: Sequence[float]) -> "GeoTransform":
        if len(gt) != 6:
            raise GeoError("geotransform needs 6 coefficients")
        if gt[5] >= 0:
            raise GeoError("geotransform must be north-up (negative row step)")
        return cls(float(gt[0]), float(gt[3]), float(gt[1]), float(-gt[5]), float(gt[2]), float(gt[4]))

    def pixel_area(self) -> float:
        return self.pixel_width * self.pixel_height

    def pixel_rect(self, col: int, row: int) -> tuple[float, float, float, float]:
        x0 = self.origin_x + col * self.pixel_width
        y1 = self.origin_y - row * self.pixel_height
        return (x0, y1 - self.pixel_height, x0 + self.pixel_width, y1)

    def shifted(self, col: int, row: int) -> "GeoTransform":
        """Transform of a sub-grid whose (0, 0) is this grid's (col, row)."""
        return GeoTransform(
            self.origin_x + col * self.pixel_width,
            self.origin_y - row * self.pixel_height,
            self.pixel_width,
            self.pixel_height,
        )


def geo_to_pixel(point: GeoPoint, gt: GeoTransform) -> tuple[float, float]:
    return ((point.x - gt.origin_x) / gt.pixel_width, (gt.origin_y - point.y) / gt.pixel_height)


def pixel_to_geo(col: float, row: float, gt: GeoTransform) -> GeoPoint:
    return GeoPoint(gt.origin_x + col * gt.pixel_width, gt.origin_y - row * gt.pixel_height)


@dataclass(frozen=True)
class PixelRect:
    col: int
    row: int
    gt: GeoTransform = field(repr=False)

    def bounds(self) -> tuple[float, float, float, float]:
        return self.gt.pixel_rect(self.col, self.row)


def pixel_coverage_fraction(poly: GeoPolygon, pixel: PixelRect, gt: GeoTransform | None = None) -> float:
    """Share of one pixel's area covered by ``poly`` (holes excluded)."""
    gt = gt or pixel.gt
    if gt is None:
        raise GeoError("pixel has no geotransform")
    if not poly.crs.is_planar:
        raise GeoError("coverage requires projected coordinates")
    pa = gt.pixel_area()
    if pa <= 0:
        raise GeoError("degenerate pixel")
    rect = gt.pixel_rect(pixel.col, pixel.row)
    area = abs(ring_signed_area(clip_polygon_to_rect(poly.exterior, rect)))
    for h in poly.holes:
        area -= abs(ring_signed_area(clip_polygon_to_rect(h, rect)))
    return min(max(area / pa, 0.0), 1.0)


def coverage_grid(
    poly: GeoPolygon, gt: GeoTransform, window: tuple[int, int, int, int]
) -> np.ndarray:
    """Per-pixel coverage fractions of ``poly`` over a block of the grid.

    ``window`` is ``(col0, row0, ncols, nrows)``. Works in pixel units and
    integrates each edge's horizontal extent strip by strip, so every value
    is the exact covered area (up to rounding) without per-pixel clipping.
    """
    col0, row0, ncols, nrows = window
    out = np.zeros((nrows, ncols), dtype=np.float64)
    for k, ring in enumerate(poly.rings):
        pts = np.asarray(ring, dtype=np.float64)
        px = (pts[:, 0] - gt.origin_x) / gt.pixel_width - col0
        py = (gt.origin_y - pts[:, 1]) / gt.pixel_height - row0
        part = _ring_cover(px, py, ncols, nrows)
        # _ring_cover is signed by ring orientation in the pixel frame
        s = _shoelace(px, py)
        if s == 0:
            continue
        sign = 1.0 if (s > 0) == (k == 0) else -1.0
        out += sign * part
    np.clip(out, 0.0, 1.0, out=out)
    return out


def _shoelace(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    return 0.5 * float(np.dot(xc, np.roll(yc, -1)) - np.dot(np.roll(xc, -1), yc))


def _ring_cover(px: np.ndarray, py: np.ndarray, ncols: int, nrows: int) -> np.ndarray:
    """Signed area of the ring inside each unit cell of an ``nrows`` x ``ncols`` grid.

    For a horizontal line, the covered length inside column c is the sum over
    crossing edges of ``sign(dy) * (clamp(x, c, c+1) - c)``. Integrating over
    a row strip gives ``G(c) - G(c+1)`` with ``G(X) = ∫ max(x - X, 0) dy``,
    which is closed-form for a straight segment.
    """
    out = np.zeros((nrows, ncols), dtype=np.float64)
    if ncols <= 0 or nrows <= 0:
        return out
    x0 = px
    y0 = py
    x1 = np.roll(px, -1)
    y1 = np.roll(py, -1)
    keep = y0 != y1
    x0, y0, x1, y1 = x0[keep], y0[keep], x1[keep], y1[keep]
    if x0.size == 0:
        return out

    # split every edge at integer row boundaries inside [0, nrows]
    seg_rows, sx0, sx1, sdy = [], [], [], []
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        lo, hi = (ay, by) if ay < by else (by, ay)
        lo_c = max(lo, 0.0)
        hi_c = min(hi, float(nrows))
        if lo_c >= hi_c:
            continue
        r0 = int(math.floor(lo_c))
        r1 = int(math.ceil(hi_c))
        cuts = np.arange(r0, r1 + 1, dtype=np.float64)
        cuts[0] = lo_c
        cuts[-1] = hi_c
        ya, yb = cuts[:-1], cuts[1:]
        if by < ay:
            ya, yb = yb[::-1], ya[::-1]
        slope = (bx - ax) / (by - ay)
        seg_rows.append(np.minimum(np.floor(np.minimum(ya, yb)).astype(np.int64), nrows - 1))
        sx0.append(ax + (ya - ay) * slope)
        sx1.append(ax + (yb - ay) * slope)
        sdy.append(yb - ya)
    if not seg_rows:
        return out
    rows = np.concatenate(seg_rows)
    xa = np.concatenate(sx0)
    xb = np.concatenate(sx1)
    dy = np.concatenate(sdy)

    lo = np.minimum(xa, xb)[:, None]
    hi = np.maximum(xa, xb)[:, None]
    width = hi - lo
    X = np.arange(ncols + 1, dtype=np.float64)[None, :]
    mid = 0.5 * (lo + hi) - X
    # outside (lo, hi) a tiny width can overflow; those entries are discarded below
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        part = np.where(width > 0, (hi - X) ** 2 / (2 * width), 0.0)
    G = np.where(X <= lo, mid, np.where(X >= hi, 0.0, part))
    # everything left of column 0 is outside the window; G(0) already accounts for it
    cells = (G[:, :-1] - G[:, 1:]) * dy[:, None]
    np.add.at(out, rows, cells)
    return out


# ---------------------------------------------------------------------------
# Transverse Mercator (Krueger series)


def _tm_coefficients(f: float):
    n = f / (2 - f)
    n2, n3, n4, n5, n6 = n**2, n**3, n**4, n**5, n**6
    A = 1 / (1 + n) * (1 + n2 / 4 + n4 / 64 + n6 / 256)
    alpha = (
        n / 2 - 2 * n2 / 3 + 5 * n3 / 16 + 41 * n4 / 180 - 127 * n5 / 288 + 7891 * n6 / 37800,
        13 * n2 / 48 - 3 * n3 / 5 + 557 * n4 / 1440 + 281 * n5 / 630 - 1983433 * n6 / 1935360,
        61 * n3 / 240 - 103 * n4 / 140 + 15061 * n5 / 26880 + 167603 * n6 / 181440,
        49561 * n4 / 161280 - 179 * n5 / 168 + 6601661 * n6 / 7257600,
        34729 * n5 / 80640 - 3418889 * n6 / 1995840,
        212378941 * n6 / 319334400,
    )
    beta = (
        n / 2 - 2 * n2 / 3 + 37 * n3 / 96 - n4 / 360 - 81 * n5 / 512 + 96199 * n6 / 604800,
        n2 / 48 + n3 / 15 - 437 * n4 / 1440 + 46 * n5 / 105 - 1118711 * n6 / 3870720,
        17 * n3 / 480 - 37 * n4 / 840 - 209 * n5 / 4480 + 5569 * n6 / 90720,
        4397 * n4 / 161280 - 11 * n5 / 504 - 830251 * n6 / 7257600,
        4583 * n5 / 161280 - 108847 * n6 / 3991680,
        20648693 * n6 / 638668800,
    )
    e = math.sqrt(f * (2 - f))
    return A, alpha, beta, e


_A, _ALPHA, _BETA, _E = _tm_coefficients(WGS84_F)
_E2 = _E * _E


def _conformal_tau(tau: float) -> float:
    sigma = math.sinh(_E * math.atanh(_E * tau / math.hypot(1.0, tau)))
    return tau * math.hypot(1.0, sigma) - sigma * math.hypot(1.0, tau)


def _geodetic_tau(taup: float) -> float:
    # Newton on tau' (tau); converges in 2-3 steps
    tau = taup / (1 - _E2)
    for _ in range(8):
        tp = _conformal_tau(tau)
        dtau = (taup - tp) * (1 + (1 - _E2) * tau * tau) / ((1 - _E2) * math.hypot(1.0, tau) * math.hypot(1.0, tp))
        tau += dtau
        if abs(dtau) < 1e-15 * max(1.0, abs(tau)):
            break
    return tau


def utm_forward(lat: float, lon: float, zone: int, south: bool) -> tuple[float, float]:
    if abs(lat) > UTM_MAX_LAT:
        raise GeoError(f"latitude {lat} outside UTM validity band")
    lam = math.radians(lon - (6.0 * zone - 183.0))
    lam = math.atan2(math.sin(lam), math.cos(lam))
    phi = math.radians(lat)
    taup = _conformal_tau(math.tan(phi))
    xip = math.atan2(taup, math.cos(lam))
    etap = math.asinh(math.sin(lam) / math.hypot(taup, math.cos(lam)))
    xi, eta = xip, etap
    for j, a in enumerate(_ALPHA, start=1):
        xi += a * math.sin(2 * j * xip) * math.cosh(2 * j * etap)
        eta += a * math.cos(2 * j * xip) * math.sinh(2 * j * etap)
    k = UTM_K0 * WGS84_A * _A
    easting = UTM_FALSE_EASTING + k * eta
    northing = k * xi + (UTM_FALSE_NORTHING_SOUTH if south else 0.0)
    return easting, northing


def utm_inverse(easting: float, northing: float, zone: int, south: bool) -> tuple[float, float]:
    k = UTM_K0 * WGS84_A * _A
    xi = (northing - (UTM_FALSE_NORTHING_SOUTH if south else 0.0)) / k
    eta = (easting - UTM_FALSE_EASTING) / k
    xip, etap = xi, eta
    for j, b in enumerate(_BETA, start=1):
        xip -= b * math.sin(2 * j * xi) * math.cosh(2 * j * eta)
        etap -= b * math.cos(2 * j * xi) * math.sinh(2 * j * eta)
    taup = math.sin(xip) / math.hypot(math.sinh(etap), math.cos(xip))
    lam = math.atan2(math.sinh(etap), math.cos(xip))
    lat = math.degrees(math.atan(_geodetic_tau(taup)))
    lon = (6.0 * zone - 183.0) + math.degrees(lam)
    return lat, lon


def project(point: GeoPoint, src: Crs, dst: Crs) -> GeoPoint:
    """Convert between WGS84 (x=lon, y=lat) and UTM (x=easting, y=northing)."""
    if not (math.isfinite(point.x) and math.isfinite(point.y)):
        raise GeoError("non-finite coordinate")
    if src == dst:
        return point
    if src.kind is CrsKind.UTM:
        lat, lon = utm_inverse(point.x, point.y, src.zone, src.hemisphere is Hemisphere.SOUTH)
    else:
        lon, lat = point.x, point.y
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise GeoError(f"invalid geographic coordinate ({lon}, {lat})")
    if dst.kind is CrsKind.GEOGRAPHIC:
        return GeoPoint(lon, lat)
    if abs(lat) > UTM_MAX_LAT:
        raise GeoError(f"latitude {lat} outside UTM validity band")
    e, n = utm_forward(lat, lon, dst.zone, dst.hemisphere is Hemisphere.SOUTH)
    return GeoPoint(e, n)


def utm_zone_for(lon: float, lat: float) -> Crs:
    zone = int(math.floor((lon + 180.0) / 6.0)) % 60 + 1
    return Crs.utm(zone, Hemisphere.NORTH if lat >= 0 else Hemisphere.SOUTH)
