"""Vector parcels to label rasters with double-assignment masks.

Every pixel touched by a parcel polygon is claimed by that parcel. The
pixel takes the class of the claimant covering most of it, and two masks
record disagreements: ``mask_partial`` where two or more parcels claim the
pixel at all, ``mask_full`` where two or more parcels each cover it fully.
The second case can only come from overlapping polygons, i.e. a geocoding
error in the source data.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geo import FULL_COVER_EPS, Crs, CrsKind, GeoError, GeoPolygon, GeoTransform, coverage_grid
from .ingest import read_grid, write_grid

log = logging.getLogger(__name__)

CLAIM_EPS = 1e-12
BASE_RESOLUTION_M = 10.0
BLOCK = 1024
LAYERS = ("labels", "parcels", "mask_partial", "mask_full")


class RasterizeError(ValueError):
    pass


@dataclass(frozen=True)
class ParcelRecord:
    parcel_id: int
    geometry: GeoPolygon
    ground_truth: int | float
    year: int

    def __post_init__(self):
        if int(self.parcel_id) != self.parcel_id or self.parcel_id < 1:
            raise RasterizeError(f"parcel_id must be a positive integer, got {self.parcel_id!r}")

    @property
    def crs(self) -> Crs:
        return self.geometry.crs


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    geotransform: GeoTransform
    crs: Crs
    scale: int = 1

    def __post_init__(self):
        if self.crs.kind is not CrsKind.UTM:
            raise RasterizeError("label grids must be in a UTM crs")
        if self.scale < 1 or int(self.scale) != self.scale:
            raise RasterizeError("scale must be a positive integer")
        want = BASE_RESOLUTION_M / self.scale
        if self.geotransform.pixel_width != want or self.geotransform.pixel_height != want:
            raise RasterizeError(f"scale {self.scale} needs {want} m pixels")
        if self.rows < 0 or self.cols < 0:
            raise RasterizeError("negative grid size")

    @classmethod
    def from_base(cls, rows: int, cols: int, geotransform: GeoTransform, crs: Crs, scale: int = 1) -> "GridSpec":
        """Super-resolve a 10 m base grid by an integer ``scale``."""
        if geotransform.pixel_width != BASE_RESOLUTION_M:
            raise RasterizeError("base grid must have 10 m pixels")
        px = BASE_RESOLUTION_M / scale
        gt = GeoTransform(geotransform.origin_x, geotransform.origin_y, px, px)
        return cls(rows * scale, cols * scale, gt, crs, scale)

    @property
    def resolution_m(self) -> float:
        return self.geotransform.pixel_width


@dataclass
class LabelProduct:
    class_grid: np.ndarray
    parcel_grid: np.ndarray
    partial_conflict_mask: np.ndarray
    full_conflict_mask: np.ndarray
    grid_spec: GridSpec
    year: int | None = None
    background: int = 0
    value_grid: np.ndarray | None = field(default=None, repr=False)

    def layers(self) -> dict[str, np.ndarray]:
        out = {
            "labels": self.class_grid,
            "parcels": self.parcel_grid,
            "mask_partial": self.partial_conflict_mask,
            "mask_full": self.full_conflict_mask,
        }
        if self.value_grid is not None:
            out["values"] = self.value_grid
        return out


def filter_by_year(records: Iterable[ParcelRecord], year: int) -> list[ParcelRecord]:
    return [r for r in records if r.year == year]


def _pixel_bbox(poly: GeoPolygon, spec: GridSpec) -> tuple[int, int, int, int] | None:
    gt = spec.geotransform
    xmin, ymin, xmax, ymax = poly.bounds()
    c0 = max(int(math.floor((xmin - gt.origin_x) / gt.pixel_width)), 0)
    c1 = min(int(math.ceil((xmax - gt.origin_x) / gt.pixel_width)), spec.cols)
    r0 = max(int(math.floor((gt.origin_y - ymax) / gt.pixel_height)), 0)
    r1 = min(int(math.ceil((gt.origin_y - ymin) / gt.pixel_height)), spec.rows)
    if c0 >= c1 or r0 >= r1:
        return None
    return c0, r0, c1, r1


def _prepare(records: Sequence[ParcelRecord], spec: GridSpec):
    ids = [r.parcel_id for r in records]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise RasterizeError(f"duplicate parcel_id: {dup[0]}")
    items = []
    for rec in sorted(records, key=lambda r: r.parcel_id):
        try:
            poly = rec.geometry.to(spec.crs)
        except GeoError as exc:
            raise RasterizeError(f"parcel {rec.parcel_id}: {exc}") from None
        bbox = _pixel_bbox(poly, spec)
        if bbox is None:
            log.info("parcel %d lies outside the label grid", rec.parcel_id)
            continue
        items.append((rec, poly, bbox))
    return items


def _rasterize_block(items, spec: GridSpec, block, background, regression):
    bc0, br0, bc1, br1 = block
    h, w = br1 - br0, bc1 - bc0
    best = np.zeros((h, w), dtype=np.float64)
    pid = np.zeros((h, w), dtype=np.uint32)
    cls = np.full((h, w), background, dtype=np.uint32)
    val = np.full((h, w), np.nan, dtype=np.float64) if regression else None
    claims = np.zeros((h, w), dtype=np.uint16)
    fulls = np.zeros((h, w), dtype=np.uint16)
    for rec, poly, (c0, r0, c1, r1) in items:
        c0, r0, c1, r1 = max(c0, bc0), max(r0, br0), min(c1, bc1), min(r1, br1)
        if c0 >= c1 or r0 >= r1:
            continue
        frac = coverage_grid(poly, spec.geotransform, (c0, r0, c1 - c0, r1 - r0))
        sl = (slice(r0 - br0, r1 - br0), slice(c0 - bc0, c1 - bc0))
        claimed = frac > CLAIM_EPS
        claims[sl] += claimed
        fulls[sl] += frac >= 1.0 - FULL_COVER_EPS
        # ascending parcel order plus strict '>' resolves ties to the lowest id
        win = frac > best[sl]
        best[sl][win] = frac[win]
        pid[sl][win] = rec.parcel_id
        cls[sl][win] = 1 if regression else int(rec.ground_truth)
        if regression:
            val[sl][win] = float(rec.ground_truth)
    return block, cls, pid, claims >= 2, fulls >= 2, val


def _blocks(spec: GridSpec, block_size: int):
    for r in range(0, spec.rows, block_size):
        for c in range(0, spec.cols, block_size):
            yield c, r, min(c + block_size, spec.cols), min(r + block_size, spec.rows)


def _run_blocks(items, spec, background, regression, jobs, block_size, sink):
    buckets = []
    for block in _blocks(spec, block_size):
        bc0, br0, bc1, br1 = block
        mine = [it for it in items if it[2][0] < bc1 and it[2][2] > bc0 and it[2][1] < br1 and it[2][3] > br0]
        buckets.append((block, mine))

    def work(arg):
        block, mine = arg
        return _rasterize_block(mine, spec, block, background, regression)

    if jobs > 1 and len(buckets) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(work, buckets):
                sink(*res)
    else:
        for arg in buckets:
            sink(*work(arg))


def _is_regression(records: Sequence[ParcelRecord]) -> bool:
    return any(isinstance(r.ground_truth, float) and not float(r.ground_truth).is_integer() for r in records)


def rasterize_parcels(
    records: Sequence[ParcelRecord],
    spec: GridSpec,
    background: int = 0,
    *,
    year: int | None = None,
    regression: bool | None = None,
    jobs: int = 1,
    block_size: int = BLOCK,
) -> LabelProduct:
    """Burn ``records`` into a fresh label product on ``spec``'s grid."""
    if regression is None:
        regression = _is_regression(records)
    items = _prepare(records, spec)
    label = LabelProduct(
        class_grid=np.full((spec.rows, spec.cols), background, dtype=np.uint32),
        parcel_grid=np.zeros((spec.rows, spec.cols), dtype=np.uint32),
        partial_conflict_mask=np.zeros((spec.rows, spec.cols), dtype=bool),
        full_conflict_mask=np.zeros((spec.rows, spec.cols), dtype=bool),
        grid_spec=spec,
        year=year,
        background=background,
        value_grid=np.full((spec.rows, spec.cols), np.nan) if regression else None,
    )

    def sink(block, cls, pid, partial, full, val):
        c0, r0, c1, r1 = block
        sl = (slice(r0, r1), slice(c0, c1))
        label.class_grid[sl] = cls
        label.parcel_grid[sl] = pid
        label.partial_conflict_mask[sl] = partial
        label.full_conflict_mask[sl] = full
        if val is not None:
            label.value_grid[sl] = val

    _run_blocks(items, spec, background, regression, jobs, block_size, sink)
    return label


def conflict_ratio(label: LabelProduct) -> tuple[float, float]:
    """(partial, full) mask counts over the number of labelled pixels."""
    labelled = np.count_nonzero(
        (label.parcel_grid != 0) | label.partial_conflict_mask | label.full_conflict_mask
    )
    if labelled == 0:
        return 0.0, 0.0
    return (
        np.count_nonzero(label.partial_conflict_mask) / labelled,
        np.count_nonzero(label.full_conflict_mask) / labelled,
    )


# ---------------------------------------------------------------------------
# files


_LAYER_DTYPES = {"labels": "u32le", "parcels": "u32le", "mask_partial": "u8", "mask_full": "u8", "values": "f64le"}


def write_label_product(label: LabelProduct, directory: str | os.PathLike) -> dict[str, Path]:
    directory = Path(directory)
    spec = label.grid_spec
    extra = {"scale": spec.scale, "year": label.year, "background": label.background}
    out = {}
    for name, arr in label.layers().items():
        path = directory / f"{name}.grid"
        write_grid(
            path, arr, name=name, dtype=_LAYER_DTYPES[name], geotransform=spec.geotransform,
            crs=spec.crs, nodata=label.background if name == "labels" else 0, extra=extra,
        )
        out[name] = path
    return out


def read_label_product(directory: str | os.PathLike) -> LabelProduct:
    directory = Path(directory)
    arrays, meta = {}, None
    for name in (*LAYERS, "values"):
        path = directory / f"{name}.grid"
        if name == "values" and not path.exists():
            continue
        arr, meta_i = read_grid(path)
        arrays[name] = arr
        meta = meta or meta_i
    spec = GridSpec(
        int(meta["rows"]), int(meta["cols"]), GeoTransform.from_gdal(meta["geotransform"]),
        Crs.from_dict(meta["crs"]), int(meta.get("scale", 1)),
    )
    return LabelProduct(
        class_grid=arrays["labels"],
        parcel_grid=arrays["parcels"],
        partial_conflict_mask=arrays["mask_partial"].astype(bool),
        full_conflict_mask=arrays["mask_full"].astype(bool),
        grid_spec=spec,
        year=meta.get("year"),
        background=int(meta.get("background", 0)),
        value_grid=arrays.get("values"),
    )


class ParcelFileError(ValueError):
    pass


def read_parcels(path: str | os.PathLike) -> list[ParcelRecord]:
    """Load a GeoJSON FeatureCollection of parcel polygons.

    The collection-level ``crs`` member names the coordinate system
    (``EPSG:4326`` when absent). Each feature needs ``parcel_id``,
    ``ground_truth`` and ``year`` properties.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParcelFileError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if doc.get("type") != "FeatureCollection":
        raise ParcelFileError(f"{path}: expected a FeatureCollection")
    crs = Crs.wgs84()
    if "crs" in doc:
        try:
            crs = Crs.parse(doc["crs"]["properties"]["name"])
        except (KeyError, TypeError, GeoError) as exc:
            raise ParcelFileError(f"{path}: bad crs member: {exc}") from None
    records = []
    for i, feat in enumerate(doc.get("features", [])):
        where = f"{path}: feature {i}"
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if geom.get("type") != "Polygon":
            raise ParcelFileError(f"{where}: geometry must be a Polygon, got {geom.get('type')}")
        for key in ("parcel_id", "ground_truth", "year"):
            if key not in props:
                raise ParcelFileError(f"{where}: missing property {key}")
        try:
            rings = geom["coordinates"]
            poly = GeoPolygon(tuple(map(tuple, rings[0])), crs, tuple(tuple(map(tuple, h)) for h in rings[1:]))
            records.append(
                ParcelRecord(int(props["parcel_id"]), poly, props["ground_truth"], int(props["year"]))
            )
        except (GeoError, RasterizeError, TypeError, IndexError, ValueError) as exc:
            raise ParcelFileError(f"{where}: {exc}") from None
    return records


def write_parcels(path: str | os.PathLike, records: Sequence[ParcelRecord]):
    if not records:
        crs = Crs.wgs84()
    else:
        crs = records[0].crs
    feats = []
    for r in records:
        if r.crs != crs:
            raise ParcelFileError("all parcels in one file must share a crs")
        rings = [[list(p) + [] for p in ring] + [list(ring[0])] for ring in r.geometry.rings]
        feats.append({
            "type": "Feature",
            "properties": {"parcel_id": r.parcel_id, "ground_truth": r.ground_truth, "year": r.year},
            "geometry": {"type": "Polygon", "coordinates": rings},
        })
    doc = {
        "type": "FeatureCollection",
        "crs": {"type": "name", "properties": {"name": f"EPSG:{crs.epsg}"}},
        "features": feats,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
