"""Pipeline stages over one output root.

Layout under ``output``::

    selection/  report.csv, selection.tsv, catalog.json
    downloads/  <product_id>.zip, journal.jsonl
    products/   <product_id>/manifest.json + band grids
    labels/     <tile>/labels|parcels|mask_partial|mask_full.grid
    store/      patches/<date>/<location_key>/<band>.grid, labels/<location_key>/...
    dataset/    samples/<location_key>/..., index.csv

Every stage can be rerun; outputs that exist and match their checksums
are left alone.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .assembler import AssemblyStats, DatasetIndex, assemble
from .catalog import (
    NoCandidates,
    SelectionEntry,
    build_query,
    format_report,
    rank_products,
    read_selection,
    select_products,
    write_selection,
)
from .config import PipelineConfig
from .hub import Clock, DownloadQueue, HubClient, QueueReport, product_to_wire
from .ingest import data_coverage_fraction, grid_is_valid, load_bundle, parse_manifest, unpack_product
from .rasterize import (
    LAYERS,
    GridSpec,
    conflict_ratio,
    filter_by_year,
    rasterize_parcels,
    read_label_product,
    read_parcels,
    write_label_product,
)
from .tiler import _tile_tag, plan_windows, write_label_patches, write_product_patches
from .timefmt import format_utc

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def report(self) -> Path:
        return self.root / "selection" / "report.csv"

    @property
    def selection(self) -> Path:
        return self.root / "selection" / "selection.tsv"

    @property
    def catalog(self) -> Path:
        return self.root / "selection" / "catalog.json"

    @property
    def downloads(self) -> Path:
        return self.root / "downloads"

    @property
    def journal(self) -> Path:
        return self.root / "downloads" / "journal.jsonl"

    @property
    def products(self) -> Path:
        return self.root / "products"

    @property
    def labels(self) -> Path:
        return self.root / "labels"

    @property
    def store(self) -> Path:
        return self.root / "store"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"


def hub_for(cfg: PipelineConfig) -> HubClient:
    return HubClient.connect(cfg.hub.url, auth=cfg.credentials())


# ---------------------------------------------------------------------------
# query


@dataclass
class QueryResult:
    ranked: list = field(default_factory=list)
    selected: list[SelectionEntry] = field(default_factory=list)
    searched: int = 0


def run_query(cfg: PipelineConfig, hub: HubClient, *, dry_run: bool = False) -> QueryResult:
    layout = Layout(cfg.output_root)
    aoi, poi, sel = cfg.aoi_obj(), cfg.poi_obj(), cfg.selection_obj()
    query = build_query(aoi, poi, sel)
    log.info("searching %s", query.to_request())
    products = hub.search(query)
    result = QueryResult(searched=len(products))
    if products:
        ranked = rank_products(products, aoi, sel)
        if isinstance(ranked, NoCandidates):
            log.warning("no product passed the thresholds (%s)", ranked.reasons)
        else:
            result.ranked = ranked
            picks = select_products(ranked, sel.target_date_count, poi)
            picks.sort(key=lambda r: (r.product.sensing_time, r.product.product_id))
            result.selected = [
                SelectionEntry(r.product.product_id, r.product.tile_id, r.product.sensing_time) for r in picks
            ]
    if not result.selected:
        log.warning("query returned no usable products; selection is empty")
    if dry_run:
        return result
    layout.report.parent.mkdir(parents=True, exist_ok=True)
    layout.report.write_text(format_report(result.ranked))
    header = (
        "product_id<TAB>tile_id<TAB>sensing_time; edit freely before 'download'\n"
        f"query: {query.to_request()}"
    )
    if result.selected:
        write_selection(layout.selection, result.selected, header)
    else:
        layout.selection.write_text("")
    cat = {p.product_id: product_to_wire(p) for p in products}
    layout.catalog.write_text(json.dumps(dict(sorted(cat.items())), indent=1) + "\n")
    return result


# ---------------------------------------------------------------------------
# download


def run_download(
    cfg: PipelineConfig, hub: HubClient, *, clock: Clock | None = None, progress=None
) -> QueueReport:
    layout = Layout(cfg.output_root)
    if not layout.selection.exists():
        raise StageError(f"no selection file at {layout.selection}; run 'query' first")
    entries = read_selection(layout.selection)
    known = json.loads(layout.catalog.read_text()) if layout.catalog.exists() else {}
    queue = DownloadQueue(hub, layout.downloads, layout.journal, cfg.throttle_policy(), clock)
    queue.progress = progress
    for e in entries:
        meta = known.get(e.product_id, {})
        queue.add(e.product_id, meta.get("md5"), meta.get("size"))
    return queue.run()


def downloaded_products(cfg: PipelineConfig) -> list[Path]:
    """Manifests of selected products that finished downloading, unpacked on demand."""
    layout = Layout(cfg.output_root)
    if not layout.selection.exists():
        raise StageError(f"no selection file at {layout.selection}")
    out = []
    for e in read_selection(layout.selection):
        archive = layout.downloads / f"{e.product_id}.zip"
        if not archive.exists():
            log.warning("%s not downloaded; skipping", e.product_id)
            continue
        target = layout.products / e.product_id
        manifest = target / "manifest.json"
        if not (manifest.exists() and all(grid_is_valid(r.path) for r in parse_manifest(manifest).bands)):
            unpack_product(archive, target)
        out.append(manifest)
    return out


# ---------------------------------------------------------------------------
# rasterize


def _label_grid(manifest_path: Path, scale: int) -> tuple[str, GridSpec]:
    m = parse_manifest(manifest_path)
    from .ingest import load_band

    ref = next((r for r in m.bands if r.band_id == "B02"), None) or min(m.bands, key=lambda r: r.resolution_m)
    band = load_band(ref, m.crs)
    return m.tile_id, GridSpec.from_base(band.rows, band.cols, band.geotransform, band.crs, scale)


def run_rasterize(cfg: PipelineConfig, *, jobs: int = 1, dry_run: bool = False) -> dict[str, Path]:
    layout = Layout(cfg.output_root)
    parcels_path = cfg.resolve(cfg.labels.parcels)
    if parcels_path is None:
        log.warning("no parcel file configured; nothing to rasterize")
        return {}
    year = cfg.labels.year if cfg.labels.year is not None else cfg.poi.start.year
    records = filter_by_year(read_parcels(parcels_path), year)
    digest = hashlib.sha256(parcels_path.read_bytes()).hexdigest()
    grids: dict[str, GridSpec] = {}
    for manifest in downloaded_products(cfg):
        tile, spec = _label_grid(manifest, cfg.labels.scale)
        grids.setdefault(tile, spec)
    out = {}
    for tile, spec in sorted(grids.items()):
        target = layout.labels / _tile_tag(tile)
        stamp = {
            "parcels_sha256": digest, "year": year, "scale": spec.scale, "background": cfg.labels.background,
            "rows": spec.rows, "cols": spec.cols, "geotransform": spec.geotransform.to_gdal(),
            "crs": spec.crs.to_dict(),
        }
        out[tile] = target
        if _stamp_matches(target, stamp) and all(grid_is_valid(target / f"{n}.grid") for n in LAYERS):
            log.info("labels for %s are current", tile)
            continue
        log.info("rasterizing %d parcels onto %s (%dx%d, %.2f m)", len(records), tile, spec.cols, spec.rows, spec.resolution_m)
        if dry_run:
            continue
        label = rasterize_parcels(records, spec, cfg.labels.background, year=year, jobs=jobs)
        partial, full = conflict_ratio(label)
        log.info("%s: partial conflicts %.4f, full conflicts %.4f of labelled pixels", tile, partial, full)
        write_label_product(label, target)
        (target / "stamp.json").write_text(json.dumps(stamp, indent=1) + "\n")
    return out


def _stamp_matches(target: Path, stamp: dict) -> bool:
    try:
        return json.loads((target / "stamp.json").read_text()) == json.loads(json.dumps(stamp))
    except (OSError, json.JSONDecodeError):
        return False


# ---------------------------------------------------------------------------
# tile


@dataclass
class TileReport:
    products: int = 0
    skipped: list[str] = field(default_factory=list)
    windows: int = 0
    patches_written: int = 0


def run_tile(cfg: PipelineConfig, *, dry_run: bool = False) -> TileReport:
    layout = Layout(cfg.output_root)
    wspec = cfg.window_spec()
    report = TileReport()
    coverage_rows = []
    labelled_tiles: set[str] = set()
    for manifest in downloaded_products(cfg):
        bundle = load_bundle(manifest)
        base = bundle.base_band()
        coverage = data_coverage_fraction(base)
        coverage_rows.append((bundle.product_id, base.band_id, f"{coverage * 100:.4f}"))
        if coverage * 100 < cfg.selection.min_data_coverage_pct:
            log.warning("%s: data coverage %.1f%% below threshold; skipped", bundle.product_id, coverage * 100)
            report.skipped.append(bundle.product_id)
            continue
        extent = GridSpec(base.rows, base.cols, base.geotransform, base.crs, 1)
        label_dir = layout.labels / _tile_tag(bundle.tile_id)
        label = read_label_product(label_dir) if (label_dir / "labels.grid").exists() else None
        if wspec.labeled_only and label is None:
            raise StageError(f"labeled_only tiling needs labels for {bundle.tile_id}; run 'rasterize' first")
        windows = plan_windows(extent, wspec, label, bundle.tile_id)
        # windows with no data at all in this acquisition contribute no time step
        with_data = [w for w in windows if _has_data(base, w)]
        report.products += 1
        report.windows += len(with_data)
        log.info("%s: %d windows (%d with data)", bundle.product_id, len(windows), len(with_data))
        if dry_run:
            continue
        report.patches_written += write_product_patches(bundle, with_data, layout.store)
        if label is not None and bundle.tile_id not in labelled_tiles:
            labelled_tiles.add(bundle.tile_id)
            report.patches_written += write_label_patches(label, windows, layout.store)
    if not dry_run:
        layout.store.mkdir(parents=True, exist_ok=True)
        with open(layout.store / "coverage.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["product_id", "band_id", "data_coverage_pct"])
            w.writerows(coverage_rows)
    return report


def _has_data(band, window) -> bool:
    c, r, n, _ = window.pixel_rect(band.resolution_m)
    return bool((band.values[r:r + n, c:c + n] != band.nodata_value).any())


# ---------------------------------------------------------------------------
# assemble


def run_assemble(cfg: PipelineConfig, *, jobs: int = 1, dry_run: bool = False) -> tuple[DatasetIndex | None, AssemblyStats]:
    layout = Layout(cfg.output_root)
    stats = AssemblyStats()
    if dry_run:
        from .assembler import scan_patch_store

        groups = scan_patch_store(layout.store)
        log.info("would assemble %d locations", len(groups))
        return None, stats
    labels = layout.store / "labels"
    index = assemble(
        layout.store, labels if labels.is_dir() else None, layout.dataset,
        min_t=cfg.assembly.min_t, ratios=cfg.assembly.split_ratios, seed=cfg.assembly.seed,
        jobs=jobs, stats=stats,
    )
    log.info("dataset: %d samples (%d regenerated)", stats.samples, stats.regenerated)
    return index, stats


def describe(cfg: PipelineConfig) -> str:
    return f"output={cfg.output_root} poi={format_utc(cfg.poi.start)}..{format_utc(cfg.poi.end)}"
