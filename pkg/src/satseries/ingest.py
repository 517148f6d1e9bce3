"""Canonical band-grid files, product manifests and data-coverage statistics.

A grid is two files: ``<name>.grid`` holds raw little-endian samples, row
major, top row first; ``<name>.grid.json`` is the sidecar describing it.
Stacks of ``frames`` equally shaped grids are stored back to back in one
payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import zipfile
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .geo import Crs, CrsKind, GeoTransform
from .timefmt import format_utc, parse_utc

BAND_RESOLUTION = {
    "B02": 10, "B03": 10, "B04": 10, "B08": 10,
    "B05": 20, "B06": 20, "B07": 20, "B8A": 20, "B11": 20, "B12": 20,
    "B01": 60, "B09": 60, "B10": 60,
}
CANONICAL_BAND_ORDER = list(BAND_RESOLUTION)
RESOLUTIONS = (10, 20, 60)

DTYPES = {"u8": "u1", "u16le": "<u2", "u32le": "<u4", "f64le": "<f8"}
_BIG_ENDIAN = {"u16be", "u32be", "f64be"}


class GridFormatError(ValueError):
    pass


class ManifestError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = f" (line {line})" if line else ""
        super().__init__(f"{message}{where}")
        self.field = field
        self.line = line


def band_sort_key(band_id: str):
    if band_id in BAND_RESOLUTION:
        return (0, CANONICAL_BAND_ORDER.index(band_id), band_id)
    return (1, 0, band_id)


# ---------------------------------------------------------------------------
# grid files


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_grid(
    path: str | os.PathLike,
    values: np.ndarray,
    *,
    name: str,
    dtype: str,
    geotransform: GeoTransform,
    crs: Crs,
    resolution_m: float | None = None,
    nodata=0,
    frames: int | None = None,
    extra: dict | None = None,
) -> dict:
    """Write payload and sidecar; returns the sidecar dict.

    ``values`` is 2-D, or 3-D when ``frames`` is given.
    """
    path = Path(path)
    if dtype not in DTYPES:
        raise GridFormatError(f"unknown dtype {dtype!r}")
    arr = np.ascontiguousarray(values, dtype=np.dtype(DTYPES[dtype]))
    if frames is None:
        if arr.ndim != 2:
            raise GridFormatError("single grid must be 2-D")
        rows, cols = arr.shape
    else:
        if arr.ndim != 3 or arr.shape[0] != frames:
            raise GridFormatError("stack must be frames x rows x cols")
        rows, cols = arr.shape[1:]
    payload = arr.tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "band_id": name,
        "resolution_m": _num(resolution_m if resolution_m is not None else geotransform.pixel_width),
        "rows": int(rows),
        "cols": int(cols),
        "dtype": dtype,
        "nodata": nodata,
        "crs": crs.to_dict(),
        "geotransform": [_num(v) for v in geotransform.to_gdal()],
    }
    if frames is not None:
        meta["frames"] = int(frames)
    if extra:
        meta.update(extra)
    meta["sha256"] = hashlib.sha256(payload).hexdigest()
    _atomic_write(path, payload)
    _atomic_write(sidecar_path(path), (json.dumps(meta) + "\n").encode())
    return meta


def _num(v):
    v = float(v)
    return int(v) if v.is_integer() else v


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_sidecar(path: str | os.PathLike) -> dict:
    sc = sidecar_path(Path(path))
    try:
        with open(sc) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise GridFormatError(f"missing sidecar {sc}") from None
    except json.JSONDecodeError as exc:
        raise GridFormatError(f"{sc}: invalid JSON at line {exc.lineno}") from None
    for key in ("rows", "cols", "dtype", "geotransform", "crs"):
        if key not in meta:
            raise GridFormatError(f"{sc}: missing field: {key}")
    return meta


def read_grid(path: str | os.PathLike, *, verify: bool = False) -> tuple[np.ndarray, dict]:
    """Read a grid (or stack); returns a read-only array and its sidecar."""
    path = Path(path)
    meta = read_sidecar(path)
    dtype = meta["dtype"]
    if dtype in _BIG_ENDIAN:
        raise GridFormatError(f"{path}: unsupported byte order ({dtype})")
    if dtype not in DTYPES:
        raise GridFormatError(f"{path}: unknown dtype {dtype!r}")
    np_dtype = np.dtype(DTYPES[dtype])
    frames = meta.get("frames")
    shape = (int(meta["rows"]), int(meta["cols"]))
    if frames is not None:
        shape = (int(frames),) + shape
    expected = int(np.prod(shape)) * np_dtype.itemsize
    payload = path.read_bytes()
    if len(payload) != expected:
        raise GridFormatError(
            f"{path}: payload length {len(payload)} does not match header ({expected} bytes)"
        )
    if verify and "sha256" in meta and hashlib.sha256(payload).hexdigest() != meta["sha256"]:
        raise GridFormatError(f"{path}: checksum mismatch")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
    return arr, meta


def grid_is_valid(path: str | os.PathLike) -> bool:
    """True when payload and sidecar exist and the payload matches its checksum."""
    try:
        meta = read_sidecar(path)
        payload = Path(path).read_bytes()
    except (GridFormatError, OSError):
        return False
    if "sha256" not in meta:
        return False
    return hashlib.sha256(payload).hexdigest() == meta["sha256"]


# ---------------------------------------------------------------------------
# bands and products


@dataclass(frozen=True)
class BandGrid:
    band_id: str
    resolution_m: int
    values: np.ndarray = field(repr=False)
    geotransform: GeoTransform
    crs: Crs
    nodata_value: int = 0

    def __post_init__(self):
        if self.values.ndim != 2:
            raise GridFormatError("band values must be 2-D")
        if self.crs.kind is not CrsKind.UTM:
            raise GridFormatError("band grids must be in UTM")
        if float(self.resolution_m) != self.geotransform.pixel_width:
            raise GridFormatError(
                f"{self.band_id}: resolution {self.resolution_m} != pixel width {self.geotransform.pixel_width}"
            )
        if self.values.flags.writeable:
            v = self.values.view()
            v.flags.writeable = False
            object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def write(self, path: str | os.PathLike) -> dict:
        return write_grid(
            path, self.values, name=self.band_id, dtype="u16le", geotransform=self.geotransform,
            crs=self.crs, resolution_m=self.resolution_m, nodata=self.nodata_value,
        )


@dataclass(frozen=True)
class BandRef:
    band_id: str
    path: Path
    resolution_m: int


@dataclass
class ProductManifest:
    product_id: str
    tile_id: str
    sensing_time: datetime
    crs: Crs
    bands: list[BandRef]
    cloud_cover_pct: float | None = None
    path: Path | None = None

    def by_resolution(self) -> dict[int, list[BandRef]]:
        out: dict[int, list[BandRef]] = {}
        for ref in self.bands:
            out.setdefault(ref.resolution_m, []).append(ref)
        return out


@dataclass
class ProductBundle:
    product_id: str
    tile_id: str
    sensing_time: datetime
    bands: dict[str, BandGrid]
    cloud_cover_pct: float | None = None

    def __post_init__(self):
        check_bundle_extent(self.bands)

    @property
    def crs(self) -> Crs:
        return next(iter(self.bands.values())).crs

    def base_band(self) -> BandGrid:
        """Finest-resolution band, B02 when present."""
        if "B02" in self.bands:
            return self.bands["B02"]
        return min(self.bands.values(), key=lambda b: (b.resolution_m, band_sort_key(b.band_id)))


def check_bundle_extent(bands: dict[str, BandGrid]):
    if not bands:
        raise GridFormatError("product has no bands")
    grids = list(bands.values())
    crs = grids[0].crs
    ox, oy = grids[0].geotransform.origin_x, grids[0].geotransform.origin_y
    coarsest = max(b.resolution_m for b in grids)
    width = grids[0].cols * grids[0].resolution_m
    height = grids[0].rows * grids[0].resolution_m
    for b in grids:
        if b.crs != crs:
            raise GridFormatError(f"band {b.band_id} has a different crs")
        if (b.geotransform.origin_x, b.geotransform.origin_y) != (ox, oy):
            raise GridFormatError(f"band {b.band_id} origin differs from the other bands")
        if abs(b.cols * b.resolution_m - width) > coarsest or abs(b.rows * b.resolution_m - height) > coarsest:
            raise GridFormatError(f"band {b.band_id} extent differs from the other bands")


_REQUIRED = ("product_id", "tile_id", "sensing_time", "crs", "bands")


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_manifest(path: str | os.PathLike) -> ProductManifest:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be an object", line=1)
    for key in _REQUIRED:
        if key not in doc:
            raise ManifestError(f"missing field: {key}", field=key)

    def bad(key, why):
        return ManifestError(f"invalid field: {key}: {why}", field=key, line=_line_of(text, key))

    try:
        sensing = parse_utc(doc["sensing_time"])
    except (ValueError, TypeError):
        raise bad("sensing_time", "not an ISO 8601 timestamp") from None
    try:
        crs = Crs.from_dict(doc["crs"])
    except (KeyError, ValueError, TypeError) as exc:
        raise bad("crs", str(exc)) from None
    if crs.kind is not CrsKind.UTM:
        raise bad("crs", "band grids must be UTM")
    cloud = doc.get("cloud_cover_pct")
    if cloud is not None and not (isinstance(cloud, (int, float)) and 0 <= cloud <= 100):
        raise bad("cloud_cover_pct", "must be within [0, 100]")
    if not isinstance(doc["bands"], list) or not doc["bands"]:
        raise bad("bands", "must be a non-empty list")

    refs, seen = [], set()
    for entry in doc["bands"]:
        if not isinstance(entry, dict) or "band_id" not in entry:
            raise bad("bands", "each entry needs a band_id")
        bid = str(entry["band_id"])
        if bid in seen:
            raise ManifestError(f"duplicate band: {bid}", field="bands", line=_line_of(text, "bands"))
        seen.add(bid)
        res = entry.get("resolution_m", BAND_RESOLUTION.get(bid))
        if res not in RESOLUTIONS:
            raise bad("bands", f"band {bid} has no valid resolution")
        refs.append(BandRef(bid, path.parent / entry.get("file", f"{bid}.grid"), int(res)))
    refs.sort(key=lambda r: band_sort_key(r.band_id))
    return ProductManifest(
        product_id=str(doc["product_id"]),
        tile_id=str(doc["tile_id"]),
        sensing_time=sensing,
        crs=crs,
        bands=refs,
        cloud_cover_pct=None if cloud is None else float(cloud),
        path=path,
    )


def load_band(ref: BandRef, crs: Crs | None = None) -> BandGrid:
    values, meta = read_grid(ref.path)
    if meta["dtype"] != "u16le":
        raise GridFormatError(f"{ref.path}: band dtype must be u16le, got {meta['dtype']}")
    if meta.get("frames") is not None:
        raise GridFormatError(f"{ref.path}: band payload must be a single frame")
    if meta.get("band_id", ref.band_id) != ref.band_id:
        raise GridFormatError(f"{ref.path}: sidecar band_id {meta['band_id']} != {ref.band_id}")
    band_crs = Crs.from_dict(meta["crs"])
    if crs is not None and band_crs != crs:
        raise GridFormatError(f"{ref.path}: crs differs from manifest")
    return BandGrid(
        band_id=ref.band_id,
        resolution_m=int(meta.get("resolution_m", ref.resolution_m)),
        values=values,
        geotransform=GeoTransform.from_gdal(meta["geotransform"]),
        crs=band_crs,
        nodata_value=int(meta.get("nodata", 0)),
    )


def load_bundle(manifest: ProductManifest | str | os.PathLike) -> ProductBundle:
    if not isinstance(manifest, ProductManifest):
        manifest = parse_manifest(manifest)
    bands = {ref.band_id: load_band(ref, manifest.crs) for ref in manifest.bands}
    return ProductBundle(
        manifest.product_id, manifest.tile_id, manifest.sensing_time, bands, manifest.cloud_cover_pct
    )


def data_coverage_fraction(band: BandGrid | np.ndarray, nodata: int | None = None) -> float:
    """Share of samples holding data, i.e. not equal to the nodata value."""
    if isinstance(band, BandGrid):
        values, nodata = band.values, band.nodata_value if nodata is None else nodata
    else:
        values = np.asarray(band)
        nodata = 0 if nodata is None else nodata
    if values.size == 0:
        return 0.0
    return float(np.count_nonzero(values != nodata)) / values.size


def write_manifest(directory: str | os.PathLike, bundle: ProductBundle) -> Path:
    """Write every band plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for bid in sorted(bundle.bands, key=band_sort_key):
        band = bundle.bands[bid]
        band.write(directory / f"{bid}.grid")
        entries.append({"band_id": bid, "file": f"{bid}.grid", "resolution_m": band.resolution_m})
    doc = {
        "product_id": bundle.product_id,
        "tile_id": bundle.tile_id,
        "sensing_time": format_utc(bundle.sensing_time),
        "crs": bundle.crs.to_dict(),
        "bands": entries,
    }
    if bundle.cloud_cover_pct is not None:
        doc["cloud_cover_pct"] = bundle.cloud_cover_pct
    out = directory / "manifest.json"
    out.write_text(json.dumps(doc, indent=1) + "\n")
    return out


def unpack_product(archive: str | os.PathLike, dest: str | os.PathLike) -> Path:
    """Extract a downloaded archive holding the canonical layout; returns its manifest path.

    Vendor containers (SAFE) must be converted to the canonical layout first.
    """
    archive, dest = Path(archive), Path(dest)
    with zipfile.ZipFile(archive) as zf:
        names = zf.namelist()
        manifests = [n for n in names if n.rsplit("/", 1)[-1] == "manifest.json"]
        if not manifests:
            raise GridFormatError(
                f"{archive}: no manifest.json inside; convert vendor products to the grid layout first"
            )
        prefix = min(manifests, key=len)[: -len("manifest.json")]
        dest.mkdir(parents=True, exist_ok=True)
        for name in names:
            if not name.startswith(prefix) or name.endswith("/"):
                continue
            rel = Path(name[len(prefix):])
            if rel.is_absolute() or ".." in rel.parts:
                raise GridFormatError(f"{archive}: unsafe member path {name}")
            target = dest / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            with zf.open(name) as src:
                target.write_bytes(src.read())
    return dest / "manifest.json"
