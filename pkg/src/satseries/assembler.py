"""Group per-date patches by location into timeseries samples.

Patches are written per product first and grouped here, one location at a
time, so no step ever holds more than a single location's timeseries.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geo import Crs, GeoTransform
from .ingest import band_sort_key, grid_is_valid, read_grid, write_grid
from .timefmt import format_utc, parse_utc

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
INDEX_COLUMNS = ("location_key", "T", "labeled", "path", "split")


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    """One product's patches for one location."""

    product_id: str
    sensing_time: datetime
    cloud_cover_pct: float | None
    directory: Path


@dataclass(frozen=True)
class IndexRow:
    location_key: str
    T: int
    labeled: bool
    path: str
    split: str = ""


@dataclass
class DatasetIndex:
    rows: list[IndexRow]

    def __post_init__(self):
        keys = [r.location_key for r in self.rows]
        if len(keys) != len(set(keys)):
            raise AssemblyError("duplicate location_key in index")

    def write_csv(self, path: str | os.PathLike):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(INDEX_COLUMNS)
            for r in self.rows:
                w.writerow([r.location_key, r.T, int(r.labeled), r.path, r.split])

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "DatasetIndex":
        with open(path, newline="") as fh:
            rows = [
                IndexRow(d["location_key"], int(d["T"]), d["labeled"] == "1", d["path"], d["split"])
                for d in csv.DictReader(fh)
            ]
        return cls(rows)


def dedupe_same_day(candidates: Sequence[Candidate]) -> Candidate:
    """Keep the least cloudy candidate; ties go to the smallest product_id."""
    if not candidates:
        raise AssemblyError("dedupe needs at least one candidate")

    def key(c):
        cloud = c.cloud_cover_pct if c.cloud_cover_pct is not None else float("inf")
        return (cloud, c.product_id)

    return min(candidates, key=key)


def _bucket(key: str, seed: int) -> float:
    h = hashlib.blake2b(f"{seed}\x00{key}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") / 2.0**64


def split_assign(index: DatasetIndex, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DatasetIndex:
    if len(ratios) > len(SPLIT_NAMES) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise AssemblyError("split ratios must be up to three non-negative numbers summing to 1")
    bounds = np.cumsum(ratios)
    rows = []
    for r in index.rows:
        u = _bucket(r.location_key, seed)
        i = int(np.searchsorted(bounds, u, side="right"))
        # guard u just under 1 with rounding in the cumulative sum
        i = min(i, len(ratios) - 1)
        while ratios[i] == 0 and i > 0:
            i -= 1
        rows.append(replace(r, split=SPLIT_NAMES[i]))
    return DatasetIndex(rows)


def scan_patch_store(store: str | os.PathLike) -> dict[str, list[Candidate]]:
    """Map location_key to the products that produced patches for it (paths only)."""
    root = Path(store) / "patches"
    out: dict[str, list[Candidate]] = {}
    if not root.is_dir():
        raise AssemblyError(f"no patch store at {root}")
    for date_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        infos = {}
        for info_path in date_dir.glob("product.*.json"):
            info = json.loads(info_path.read_text())
            infos[info_path.name[len("product."):-len(".json")]] = info
        for loc in sorted(p for p in date_dir.iterdir() if p.is_dir()):
            tag = loc.name.split("_", 1)[0]
            if tag not in infos:
                raise AssemblyError(f"{loc}: no product info for tile {tag}")
            info = infos[tag]
            out.setdefault(loc.name, []).append(
                Candidate(info["product_id"], parse_utc(info["sensing_time"]), info.get("cloud_cover_pct"), loc)
            )
    return out


def select_frames(candidates: Iterable[Candidate]) -> list[Candidate]:
    """One candidate per calendar day (UTC), in ascending sensing time."""
    by_day: dict = {}
    for c in candidates:
        by_day.setdefault(c.sensing_time.date(), []).append(c)
    kept = [dedupe_same_day(v) for v in by_day.values()]
    kept.sort(key=lambda c: c.sensing_time)
    times = [c.sensing_time for c in kept]
    if any(a >= b for a, b in zip(times, times[1:])):
        raise AssemblyError("timestamps not strictly ascending after dedupe")
    return kept


def _sample_is_current(sample_dir: Path, frames: list[Candidate]) -> dict | None:
    meta_path = sample_dir / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if meta.get("provenance") != [c.product_id for c in frames]:
        return None
    names = list(meta.get("bands", [])) + list(meta.get("label_layers", []))
    if not all(grid_is_valid(sample_dir / f"{n}.grid") for n in names):
        return None
    return meta


def assemble_location(
    key: str, candidates: list[Candidate], labels_root: Path | None, out: Path, min_t: int = 1
) -> tuple[IndexRow | None, bool]:
    """Write one sample directory; returns (index row, regenerated?)."""
    frames = select_frames(candidates)
    if len(frames) < min_t:
        return None, False
    sample_dir = out / "samples" / key
    rel = sample_dir.relative_to(out).as_posix()
    label_dir = labels_root / key if labels_root is not None else None
    labeled = label_dir is not None and label_dir.is_dir()

    meta = _sample_is_current(sample_dir, frames)
    if meta is not None and bool(meta.get("label_layers")) == labeled:
        return IndexRow(key, len(frames), labeled, rel), False

    band_ids = sorted((p.name[:-5] for p in frames[0].directory.glob("*.grid")), key=band_sort_key)
    for c in frames[1:]:
        other = sorted((p.name[:-5] for p in c.directory.glob("*.grid")), key=band_sort_key)
        if other != band_ids:
            raise AssemblyError(f"{key}: band set differs between dates ({c.product_id})")
    if not band_ids:
        raise AssemblyError(f"{key}: no band patches")

    if sample_dir.exists():
        shutil.rmtree(sample_dir)
    sample_dir.mkdir(parents=True)
    shapes = {}
    for bid in band_ids:
        stack, first_meta = None, None
        for t, c in enumerate(frames):
            arr, m = read_grid(c.directory / f"{bid}.grid")
            if stack is None:
                stack = np.empty((len(frames),) + arr.shape, dtype=arr.dtype)
                first_meta = m
            elif arr.shape != stack.shape[1:] or m["geotransform"] != first_meta["geotransform"]:
                raise AssemblyError(f"{key}: inconsistent patch shape for band {bid} in {c.product_id}")
            stack[t] = arr
        write_grid(
            sample_dir / f"{bid}.grid", stack, name=bid, dtype=first_meta["dtype"],
            geotransform=GeoTransform.from_gdal(first_meta["geotransform"]),
            crs=Crs.from_dict(first_meta["crs"]), resolution_m=first_meta["resolution_m"],
            nodata=first_meta.get("nodata", 0), frames=len(frames),
        )
        shapes[bid] = list(stack.shape[1:])
        del stack

    layers = []
    if labeled:
        for path in sorted(label_dir.glob("*.grid")):
            arr, m = read_grid(path)
            extra = {k: m[k] for k in ("scale", "year", "background") if k in m}
            write_grid(
                sample_dir / path.name, arr, name=m.get("band_id", path.name[:-5]), dtype=m["dtype"],
                geotransform=GeoTransform.from_gdal(m["geotransform"]), crs=Crs.from_dict(m["crs"]),
                nodata=m.get("nodata", 0), extra=extra,
            )
            layers.append(path.name[:-5])

    meta = {
        "location_key": key,
        "T": len(frames),
        "timestamps": [format_utc(c.sensing_time) for c in frames],
        "bands": band_ids,
        "shapes": shapes,
        "label_layers": layers,
        "provenance": [c.product_id for c in frames],
    }
    (sample_dir / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return IndexRow(key, len(frames), labeled, rel), True


@dataclass
class AssemblyStats:
    samples: int = 0
    regenerated: int = 0
    skipped_short: int = 0


def assemble(
    patch_store: str | os.PathLike,
    labels: str | os.PathLike | None,
    out: str | os.PathLike,
    *,
    min_t: int = 1,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    jobs: int = 1,
    stats: AssemblyStats | None = None,
) -> DatasetIndex:
    """Build ``out/samples/<location_key>/`` for every location and write ``out/index.csv``."""
    out = Path(out)
    stats = stats if stats is not None else AssemblyStats()
    groups = scan_patch_store(patch_store)
    labels_root = Path(labels) if labels is not None else None
    keys = sorted(groups)

    def work(key):
        return assemble_location(key, groups[key], labels_root, out, min_t)

    rows = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, keys))
    else:
        results = map(work, keys)
    for key, (row, regenerated) in zip(keys, results):
        if row is None:
            stats.skipped_short += 1
            continue
        rows.append(row)
        stats.regenerated += regenerated
    stats.samples = len(rows)

    # sample directories no longer backed by the patch store would break index completeness
    sample_root = out / "samples"
    if sample_root.is_dir():
        listed = {r.location_key for r in rows}
        for d in sample_root.iterdir():
            if d.is_dir() and d.name not in listed:
                log.info("removing stale sample %s", d.name)
                shutil.rmtree(d)

    index = split_assign(DatasetIndex(rows), ratios, seed)
    index.write_csv(out / "index.csv")
    return index


def read_sample(sample_dir: str | os.PathLike) -> dict:
    """Load a sample directory: meta plus band stacks and label layers as arrays."""
    sample_dir = Path(sample_dir)
    meta = json.loads((sample_dir / "meta.json").read_text())
    bands = {b: read_grid(sample_dir / f"{b}.grid")[0] for b in meta["bands"]}
    labels = {n: read_grid(sample_dir / f"{n}.grid")[0] for n in meta["label_layers"]}
    return {"meta": meta, "bands": bands, "labels": labels}
