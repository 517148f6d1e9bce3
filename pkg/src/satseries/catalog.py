"""Product queries, ranking and temporal subsampling.

Candidates are filtered by the selection thresholds and then ordered by
AOI overlap (desc), cloud cover (asc), data coverage (desc) and sensing
time (asc); product_id breaks any remaining tie so the order never
depends on input order.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence
from urllib.parse import urlencode

from .geo import GeoPolygon, polygon_area, polygon_intersection_area, utm_zone_for
from .timefmt import format_utc, parse_utc, to_micros


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class ProductMeta:
    product_id: str
    tile_id: str
    sensing_time: datetime
    cloud_cover_pct: float
    footprint: GeoPolygon
    data_coverage_pct: float | None = None
    online: bool = False
    size_bytes: int = 0
    md5: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "sensing_time", parse_utc(self.sensing_time))
        if not 0 <= self.cloud_cover_pct <= 100:
            raise CatalogError(f"{self.product_id}: cloud cover out of range")
        if self.data_coverage_pct is not None and not 0 <= self.data_coverage_pct <= 100:
            raise CatalogError(f"{self.product_id}: data coverage out of range")
        if self.footprint.crs.is_planar:
            raise CatalogError(f"{self.product_id}: footprint must be WGS84")


@dataclass(frozen=True)
class Aoi:
    polygon: GeoPolygon

    def __post_init__(self):
        if self.polygon.crs.is_planar:
            raise CatalogError("AOI must be given in WGS84")
        if self.planar().area == 0:
            raise CatalogError("AOI has zero area")

    def planar(self):
        c = self.polygon.centroid()
        crs = utm_zone_for(c.x, c.y)
        poly = self.polygon.to(crs)
        return _Planar(poly, polygon_area(poly))

    def bbox(self) -> tuple[float, float, float, float]:
        return self.polygon.bounds()


@dataclass(frozen=True)
class _Planar:
    polygon: GeoPolygon
    area: float


@dataclass(frozen=True)
class Poi:
    start: datetime
    end: datetime

    def __post_init__(self):
        object.__setattr__(self, "start", parse_utc(self.start))
        object.__setattr__(self, "end", parse_utc(self.end))
        if not self.start < self.end:
            raise CatalogError("period of interest must have start < end")

    @property
    def midpoint(self) -> datetime:
        return self.start + (self.end - self.start) / 2


@dataclass(frozen=True)
class SelectionConfig:
    cloud_max_pct: float = 5.0
    min_aoi_overlap: float = 0.0
    min_data_coverage_pct: float = 0.0
    target_date_count: int = 10

    def __post_init__(self):
        if not 0 <= self.cloud_max_pct <= 100:
            raise CatalogError("cloud_max_pct must be within [0, 100]")
        if not 0 <= self.min_aoi_overlap <= 1:
            raise CatalogError("min_aoi_overlap must be within [0, 1]")
        if not 0 <= self.min_data_coverage_pct <= 100:
            raise CatalogError("min_data_coverage_pct must be within [0, 100]")
        if self.target_date_count < 1:
            raise CatalogError("target_date_count must be >= 1")


@dataclass(frozen=True)
class QuerySpec:
    bbox: tuple[float, float, float, float]
    start: datetime
    end: datetime
    cloud_max_pct: float

    def params(self) -> dict[str, str]:
        return {
            "bbox": ",".join(repr(float(v)) for v in self.bbox),
            "start": format_utc(self.start),
            "end": format_utc(self.end),
            "cloudmax": repr(float(self.cloud_max_pct)),
        }

    def to_request(self) -> str:
        """Path and query string for the hub search endpoint."""
        return "/search?" + urlencode(self.params(), safe=",:")


def build_query(aoi: Aoi, poi: Poi, cfg: SelectionConfig) -> QuerySpec:
    """Search over the AOI bounding box, end-exclusive POI, cloud ceiling from ``cfg``."""
    return QuerySpec(aoi.bbox(), poi.start, poi.end, cfg.cloud_max_pct)


def aoi_overlap_fraction(product: ProductMeta, aoi: Aoi) -> float:
    """Share of the AOI area covered by the product footprint, in the AOI's UTM zone."""
    planar = aoi.planar()
    foot = product.footprint.to(planar.polygon.crs)
    inter = polygon_intersection_area(planar.polygon, foot)
    return min(max(inter / planar.area, 0.0), 1.0)


@dataclass(frozen=True)
class RankedProduct:
    rank: int
    product: ProductMeta
    overlap: float
    cloud_pct: float
    data_coverage_pct: float
    data_coverage_known: bool


@dataclass(frozen=True)
class NoCandidates:
    """No product survived the thresholds."""

    considered: int
    reasons: dict[str, int] = field(default_factory=dict)

    def __bool__(self):
        return False

    def __iter__(self):
        return iter(())

    def __len__(self):
        return 0


def rank_products(
    candidates: Sequence[ProductMeta], aoi: Aoi, cfg: SelectionConfig
) -> list[RankedProduct] | NoCandidates:
    if not candidates:
        raise CatalogError("rank_products needs at least one candidate")
    scored, reasons = [], {}
    for p in candidates:
        overlap = aoi_overlap_fraction(p, aoi)
        known = p.data_coverage_pct is not None
        cov = p.data_coverage_pct if known else 100.0
        if p.cloud_cover_pct > cfg.cloud_max_pct:
            reasons["cloud"] = reasons.get("cloud", 0) + 1
        elif overlap < cfg.min_aoi_overlap or overlap == 0:
            reasons["overlap"] = reasons.get("overlap", 0) + 1
        elif cov < cfg.min_data_coverage_pct:
            reasons["data_coverage"] = reasons.get("data_coverage", 0) + 1
        else:
            scored.append((p, overlap, cov, known))
    if not scored:
        return NoCandidates(len(candidates), reasons)
    scored.sort(key=lambda s: (-s[1], s[0].cloud_cover_pct, -s[2], s[0].sensing_time, s[0].product_id))
    return [
        RankedProduct(i + 1, p, overlap, p.cloud_cover_pct, cov, known)
        for i, (p, overlap, cov, known) in enumerate(scored)
    ]


def uniform_spread_cost(dates: Sequence[datetime], chosen: Sequence[int], poi: Poi | None = None) -> int:
    """Objective minimised by :func:`select_uniform_dates`, scaled to an exact integer."""
    t = [to_micros(d) for d in dates]
    k = len(chosen)
    if k == 1:
        mid = to_micros(poi.midpoint) if poi else None
        if mid is None:
            return (2 * t[chosen[0]] - t[0] - t[-1]) ** 2
        return (t[chosen[0]] - mid) ** 2 * 4
    first, last = t[0], t[-1]
    return sum(((k - 1) * t[j] - ((k - 1 - i) * first + i * last)) ** 2 for i, j in enumerate(chosen))


def select_uniform_dates(dates: Sequence[datetime], k: int, poi: Poi | None = None) -> list[int]:
    """Indices of ``k`` dates closest (least squares) to an evenly spaced grid.

    The grid runs from the first to the last date. With ``k == 1`` the target
    is the POI midpoint (or the midpoint of the dates). Exact dynamic
    programme; ties resolve to the lexicographically smallest index list.
    """
    n = len(dates)
    if n < 1:
        raise CatalogError("no dates to select from")
    if not 1 <= k <= n:
        raise CatalogError(f"cannot select {k} of {n} dates")
    t = [to_micros(d) for d in dates]
    if any(a >= b for a, b in zip(t, t[1:])):
        raise CatalogError("dates must be strictly increasing")
    if k == n:
        return list(range(n))
    if k == 1:
        costs = [uniform_spread_cost(dates, [j], poi) for j in range(n)]
        return [costs.index(min(costs))]

    first, last = t[0], t[-1]

    def cost(slot, j):
        # all terms scaled by (k-1) so they stay integers
        return ((k - 1) * t[j] - ((k - 1 - slot) * first + slot * last)) ** 2

    INF = None
    # best[s][j]: min cost of slots s..k-1 with slot s at index j
    best = [[INF] * n for _ in range(k)]
    for j in range(k - 1, n):
        best[k - 1][j] = cost(k - 1, j)
    for s in range(k - 2, -1, -1):
        # suffix minimum of best[s+1][j'] over j' > j
        suffix = INF
        for j in range(n - (k - s), s - 1, -1):
            nxt = best[s + 1][j + 1]
            if nxt is not None and (suffix is None or nxt < suffix):
                suffix = nxt
            best[s][j] = cost(s, j) + suffix

    chosen, lo, remaining = [], 0, None
    for s in range(k):
        cands = [(best[s][j], j) for j in range(lo, n) if best[s][j] is not None]
        if remaining is not None:
            cands = [(v, j) for v, j in cands if v == remaining]
        target = min(v for v, _ in cands)
        j = min(j for v, j in cands if v == target)
        chosen.append(j)
        remaining = target - cost(s, j)
        lo = j + 1
    return chosen


def select_products(ranked: Sequence[RankedProduct], k: int, poi: Poi | None = None) -> list[RankedProduct]:
    """Default selection: the best-ranked product of each of ``k`` uniformly spread days."""
    by_day: dict = {}
    for r in ranked:
        day = r.product.sensing_time.date()
        if day not in by_day or r.rank < by_day[day].rank:
            by_day[day] = r
    days = sorted(by_day)
    if not days:
        return []
    picks = [by_day[d] for d in days]
    if len(picks) > k:
        stamps = [p.product.sensing_time for p in picks]
        picks = [picks[i] for i in select_uniform_dates(stamps, k, poi)]
    return picks


# ---------------------------------------------------------------------------
# selection and report files


@dataclass(frozen=True)
class SelectionEntry:
    product_id: str
    tile_id: str
    sensing_time: datetime


def format_selection(entries: Sequence[SelectionEntry], header: str | None = None) -> str:
    lines = []
    if header:
        lines += [f"# {h}" for h in header.splitlines()]
    lines += [f"{e.product_id}\t{e.tile_id}\t{format_utc(e.sensing_time)}" for e in entries]
    return "".join(line + "\n" for line in lines)


def write_selection(path: str | os.PathLike, entries: Sequence[SelectionEntry], header: str | None = None):
    Path(path).write_text(format_selection(entries, header))


def read_selection(path: str | os.PathLike) -> list[SelectionEntry]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise CatalogError(f"{path}:{lineno}: expected product_id<TAB>tile_id<TAB>sensing_time")
        try:
            when = parse_utc(parts[2])
        except ValueError:
            raise CatalogError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from None
        out.append(SelectionEntry(parts[0].strip(), parts[1].strip(), when))
    return out


REPORT_COLUMNS = ("product_id", "sensing_time", "overlap", "cloud_pct", "data_coverage_pct", "rank")


def format_report(ranked: Sequence[RankedProduct]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in ranked:
        w.writerow([
            r.product.product_id,
            format_utc(r.product.sensing_time),
            f"{r.overlap:.6f}",
            f"{r.cloud_pct:.2f}",
            f"{r.data_coverage_pct:.2f}" if r.data_coverage_known else "",
            r.rank,
        ])
    return buf.getvalue()
