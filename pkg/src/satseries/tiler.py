"""Striding windows over a tile and aligned multi-resolution crops."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from .geo import GeoTransform
from .ingest import BandGrid, ProductBundle, write_grid
from .rasterize import BASE_RESOLUTION_M, GridSpec, LabelProduct
from .timefmt import format_basic, format_utc

ALIGN_M = 60


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    window_m: int = 480
    stride_m: int = 480
    labeled_only: bool = False
    min_labeled_fraction: float = 0.0

    def __post_init__(self):
        for name in ("window_m", "stride_m"):
            v = getattr(self, name)
            if v <= 0:
                raise TilingError(f"{name} must be positive")
            if v % ALIGN_M:
                raise TilingError(f"{name} must be divisible by {ALIGN_M}")
        if not 0.0 <= self.min_labeled_fraction <= 1.0:
            raise TilingError("min_labeled_fraction must be within [0, 1]")


def _tile_tag(tile_id: str) -> str:
    return "T" + (tile_id[1:] if tile_id[:1] in ("T", "t") else tile_id)


@dataclass(frozen=True, slots=True)
class Window:
    """One window, positioned in 10 m pixels of the tile grid."""

    tile_id: str
    col0: int
    row0: int
    size10: int
    base: GeoTransform

    @property
    def location_key(self) -> str:
        return f"{_tile_tag(self.tile_id)}_{self.col0}_{self.row0}"

    @property
    def window_m(self) -> int:
        return int(self.size10 * BASE_RESOLUTION_M)

    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in the tile crs."""
        x0 = self.base.origin_x + self.col0 * BASE_RESOLUTION_M
        y1 = self.base.origin_y - self.row0 * BASE_RESOLUTION_M
        return (x0, y1 - self.window_m, x0 + self.window_m, y1)

    def pixel_rect(self, resolution_m: float) -> tuple[int, int, int, int]:
        """(col0, row0, cols, rows) of this window in a grid of the given pixel size."""
        f = BASE_RESOLUTION_M / resolution_m
        c, r, n = self.col0 * f, self.row0 * f, self.size10 * f
        if not (float(c).is_integer() and float(r).is_integer() and float(n).is_integer()):
            raise TilingError(f"window {self.location_key} does not align to {resolution_m} m pixels")
        return int(c), int(r), int(n), int(n)


def plan_windows(
    extent: GridSpec, spec: WindowSpec, label: LabelProduct | None = None, tile_id: str = "T"
) -> list[Window]:
    """Row-major windows over a 10 m ``extent``; edge windows that would overhang are dropped."""
    if extent.geotransform.pixel_width != BASE_RESOLUTION_M:
        raise TilingError("window planning needs the 10 m base grid")
    size = spec.window_m // int(BASE_RESOLUTION_M)
    step = spec.stride_m // int(BASE_RESOLUTION_M)
    if extent.cols < size or extent.rows < size:
        return []
    cols = np.arange(0, extent.cols - size + 1, step)
    rows = np.arange(0, extent.rows - size + 1, step)
    keep = None
    if spec.labeled_only:
        if label is None:
            raise TilingError("labeled_only planning needs a label product")
        keep = _labelled_windows(extent, label, cols, rows, size, spec.min_labeled_fraction)
    gt = extent.geotransform
    out = []
    for i, r in enumerate(rows.tolist()):
        for j, c in enumerate(cols.tolist()):
            if keep is None or keep[i, j]:
                out.append(Window(tile_id, c, r, size, gt))
    return out


def _labelled_windows(extent, label, cols, rows, size, min_fraction):
    lspec = label.grid_spec
    s = lspec.scale
    lgt, egt = lspec.geotransform, extent.geotransform
    if (
        lgt.origin_x != egt.origin_x
        or lgt.origin_y != egt.origin_y
        or lspec.crs != extent.crs
        or lspec.rows != extent.rows * s
        or lspec.cols != extent.cols * s
    ):
        raise TilingError("label grid is not aligned with the tile extent")
    fg = (label.class_grid != label.background).astype(np.int64)
    # summed-area table: O(1) labelled-pixel count per window
    sat = np.zeros((fg.shape[0] + 1, fg.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(fg, axis=0), axis=1, out=sat[1:, 1:])
    r0 = (rows * s)[:, None]
    c0 = (cols * s)[None, :]
    n = size * s
    counts = sat[r0 + n, c0 + n] - sat[r0, c0 + n] - sat[r0 + n, c0] + sat[r0, c0]
    keep = counts >= 1
    if min_fraction > 0:
        keep &= counts >= min_fraction * n * n
    return keep


@dataclass(frozen=True)
class Patch:
    location_key: str
    band_id: str
    sensing_time: datetime | None
    values: np.ndarray
    geotransform: GeoTransform
    resolution_m: float


def extract_patch(band: BandGrid, window: Window, sensing_time: datetime | None = None) -> Patch:
    c, r, n, _ = window.pixel_rect(band.resolution_m)
    if c < 0 or r < 0 or c + n > band.cols or r + n > band.rows:
        raise TilingError(f"window {window.location_key} exceeds band {band.band_id} bounds")
    _check_same_origin(band.geotransform, window)
    return Patch(
        window.location_key,
        band.band_id,
        sensing_time,
        band.values[r:r + n, c:c + n],
        band.geotransform.shifted(c, r),
        band.resolution_m,
    )


def _check_same_origin(gt: GeoTransform, window: Window):
    if (gt.origin_x, gt.origin_y) != (window.base.origin_x, window.base.origin_y):
        raise TilingError("grid origin differs from the planning grid")


def extract_label_patch(label: LabelProduct, window: Window) -> dict[str, np.ndarray]:
    spec = label.grid_spec
    c, r, n, _ = window.pixel_rect(spec.resolution_m)
    if c < 0 or r < 0 or c + n > spec.cols or r + n > spec.rows:
        raise TilingError(f"label grid does not cover window {window.location_key}")
    _check_same_origin(spec.geotransform, window)
    return {name: arr[r:r + n, c:c + n] for name, arr in label.layers().items()}


# ---------------------------------------------------------------------------
# patch store


def patch_date_dir(root: str | os.PathLike, sensing_time: datetime) -> Path:
    return Path(root) / "patches" / format_basic(sensing_time)


def write_product_patches(
    bundle: ProductBundle, windows: list[Window], store: str | os.PathLike, *, skip_valid: bool = True
) -> int:
    """Write every band patch of every window for one product; returns patches written."""
    from .ingest import grid_is_valid

    date_dir = patch_date_dir(store, bundle.sensing_time)
    date_dir.mkdir(parents=True, exist_ok=True)
    info = {
        "product_id": bundle.product_id,
        "tile_id": bundle.tile_id,
        "sensing_time": format_utc(bundle.sensing_time),
        "cloud_cover_pct": bundle.cloud_cover_pct,
    }
    info_path = date_dir / f"product.{_tile_tag(bundle.tile_id)}.json"
    info_path.write_text(json.dumps(info) + "\n")
    written = 0
    for w in windows:
        for bid, band in bundle.bands.items():
            path = date_dir / w.location_key / f"{bid}.grid"
            if skip_valid and grid_is_valid(path):
                continue
            p = extract_patch(band, w, bundle.sensing_time)
            write_grid(
                path, p.values, name=bid, dtype="u16le", geotransform=p.geotransform, crs=band.crs,
                resolution_m=band.resolution_m, nodata=band.nodata_value,
            )
            written += 1
    return written


def write_label_patches(
    label: LabelProduct, windows: list[Window], store: str | os.PathLike, *, skip_valid: bool = True
) -> int:
    from .ingest import grid_is_valid
    from .rasterize import _LAYER_DTYPES

    spec = label.grid_spec
    written = 0
    for w in windows:
        c, r, _, _ = w.pixel_rect(spec.resolution_m)
        gt = spec.geotransform.shifted(c, r)
        for name, arr in extract_label_patch(label, w).items():
            path = Path(store) / "labels" / w.location_key / f"{name}.grid"
            if skip_valid and grid_is_valid(path):
                continue
            write_grid(
                path, arr, name=name, dtype=_LAYER_DTYPES[name], geotransform=gt, crs=spec.crs,
                nodata=label.background if name == "labels" else 0,
                extra={"scale": spec.scale, "year": label.year, "background": label.background},
            )
            written += 1
    return written
