"""Synthetic products, parcels and a mock-hub catalogue for demos and tests.

Everything here is seeded, so the same call always yields byte-identical
files.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np
import yaml

from .geo import Crs, GeoPoint, GeoPolygon, GeoTransform, project
from .ingest import BAND_RESOLUTION, BandGrid, ProductBundle, write_manifest
from .rasterize import ParcelRecord, write_parcels
from .timefmt import parse_utc

MINI_TILE = dict(zone=33, origin_x=399960.0, origin_y=5300040.0, size10=600)


def synthetic_bundle(
    product_id: str,
    tile_id: str,
    sensing_time: str | datetime,
    *,
    crs: Crs,
    origin: tuple[float, float],
    size10: int,
    seed: int,
    cloud_cover_pct: float | None = None,
    zero_left_fraction: float = 0.0,
) -> ProductBundle:
    """All 13 bands over one square extent, with an optional no-data strip on the left."""
    rng = np.random.default_rng(seed)
    extent_m = size10 * 10
    bands = {}
    for bid, res in BAND_RESOLUTION.items():
        n = extent_m // res
        vals = rng.integers(1, 10000, size=(n, n), dtype=np.uint16)
        if zero_left_fraction:
            vals[:, : int(round(n * zero_left_fraction))] = 0
        bands[bid] = BandGrid(bid, res, vals, GeoTransform(origin[0], origin[1], res, res), crs)
    return ProductBundle(product_id, tile_id, parse_utc(sensing_time), bands, cloud_cover_pct)


def zip_directory(directory: Path) -> bytes:
    """Deterministic zip of a directory (fixed timestamps, sorted members)."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for path in sorted(p for p in directory.rglob("*") if p.is_file()):
            info = zipfile.ZipInfo(path.relative_to(directory).as_posix(), date_time=(2020, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, path.read_bytes())
    return buf.getvalue()


def footprint_wgs84(crs: Crs, x0: float, y0: float, x1: float, y1: float) -> GeoPolygon:
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    ll = [project(GeoPoint(x, y), crs, Crs.wgs84()) for x, y in corners]
    return GeoPolygon(tuple((p.x, p.y) for p in ll), Crs.wgs84())


@dataclass
class EndToEndFixture:
    root: Path
    catalog: Path
    parcels: Path
    config: Path
    aoi: list[list[float]]


def build_end_to_end(root: str | Path, hub_url: str = "http://127.0.0.1:8765") -> EndToEndFixture:
    """Two clear dates plus one cloudy product over a 600x600 (10 m) mini tile, three parcels."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    t = MINI_TILE
    crs = Crs.utm(t["zone"], "N")
    ox, oy, size = t["origin_x"], t["origin_y"], t["size10"]
    x1, y0 = ox + size * 10, oy - size * 10

    products = [
        ("S2A_MSIL2A_20180412_T33TUN", "2018-04-12T10:10:21Z", 1.5, 11, 0.0),
        ("S2B_MSIL2A_20180821_T33TUN", "2018-08-21T10:10:19Z", 0.8, 12, 0.0),
        ("S2A_MSIL2A_20180605_T33TUN", "2018-06-05T10:10:21Z", 62.0, 13, 0.0),
    ]
    foot = footprint_wgs84(crs, ox, y0, x1, oy)
    entries = []
    payload_dir = root / "hub"
    payload_dir.mkdir(exist_ok=True)
    for pid, when, cloud, seed, zero in products:
        bundle = synthetic_bundle(
            pid, "T33TUN", when, crs=crs, origin=(ox, oy), size10=size, seed=seed,
            cloud_cover_pct=cloud, zero_left_fraction=zero,
        )
        staging = root / "staging" / pid
        write_manifest(staging, bundle)
        (payload_dir / f"{pid}.zip").write_bytes(zip_directory(staging))
        entries.append({
            "id": pid, "tile": "T33TUN", "sensing_time": when, "cloud_pct": cloud,
            "footprint_wkt": foot.to_wkt(), "payload_file": f"{pid}.zip", "online": True,
        })
    catalog = payload_dir / "catalog.json"
    catalog.write_text(json.dumps({"products": entries}, indent=1) + "\n")

    # parcels, in the tile's UTM zone: two fields sharing an edge that falls
    # mid-pixel, one on its own, and one from another year
    def rect(c0, r0, c1, r1):
        return GeoPolygon.rectangle(ox + c0 * 10, oy - r1 * 10, ox + c1 * 10, oy - r0 * 10, crs)

    parcels = [
        ParcelRecord(1, rect(100.0, 100.0, 180.5, 190.0), 3, 2018),
        ParcelRecord(2, rect(180.5, 100.0, 260.0, 190.0), 7, 2018),
        ParcelRecord(3, rect(400.25, 380.0, 470.0, 452.75), 5, 2018),
        ParcelRecord(4, rect(300.0, 300.0, 340.0, 340.0), 9, 2017),
    ]
    parcels_path = root / "parcels.geojson"
    write_parcels(parcels_path, parcels)

    aoi_poly = footprint_wgs84(crs, ox + 500, y0 + 500, x1 - 500, oy - 500)
    aoi = [[x, y] for x, y in aoi_poly.exterior]
    cfg = {
        "aoi": aoi,
        "poi": {"start": "2018-01-01T00:00:00Z", "end": "2019-01-01T00:00:00Z"},
        "selection": {"cloud_max_pct": 5.0, "min_aoi_overlap": 0.5, "min_data_coverage_pct": 50.0, "target_date_count": 2},
        "hub": {
            "url": hub_url,
            "throttle": {"min_request_interval_s": 0.05, "lta_availability_window_s": 60.0, "poll_interval_s": 0.05,
                         "max_concurrent_downloads": 2, "max_attempts": 3},
        },
        "labels": {"parcels": "parcels.geojson", "year": 2018, "scale": 1, "background": 0},
        "tiling": {"window_m": 480, "stride_m": 480, "labeled_only": True},
        "assembly": {"min_t": 1, "split_ratios": [0.8, 0.1, 0.1], "seed": 12},
        "output": "out",
    }
    config = root / "config.yaml"
    config.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return EndToEndFixture(root, catalog, parcels_path, config, aoi)
