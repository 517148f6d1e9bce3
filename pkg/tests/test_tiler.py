import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import UTM33N
from satseries.fixtures import synthetic_bundle
from satseries.geo import GeoPolygon, GeoTransform, pixel_to_geo
from satseries.ingest import BandGrid, read_grid
from satseries.rasterize import GridSpec, ParcelRecord, rasterize_parcels
from satseries.tiler import (
    TilingError,
    WindowSpec,
    extract_label_patch,
    extract_patch,
    patch_date_dir,
    plan_windows,
    write_label_patches,
    write_product_patches,
)

OX, OY = 399960.0, 5300040.0
GT10 = GeoTransform(OX, OY, 10.0, 10.0)


def extent(rows, cols) -> GridSpec:
    return GridSpec(rows, cols, GT10, UTM33N, 1)


def bundle(size10=144, seed=0):
    return synthetic_bundle("P", "T33TUN", "2018-05-01T10:00:00Z", crs=UTM33N, origin=(OX, OY), size10=size10, seed=seed)


def label_with(parcels, rows, cols, scale=1):
    return rasterize_parcels(parcels, GridSpec.from_base(rows, cols, GT10, UTM33N, scale))


def rect_parcel(pid, x0, y0, x1, y1):
    return ParcelRecord(pid, GeoPolygon.rectangle(OX + x0, OY - y1, OX + x1, OY - y0, UTM33N), 5, 2018)


# planning


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 400), st.integers(0, 400), st.sampled_from([60, 120, 240, 480]), st.sampled_from([60, 240, 480]))
def test_window_count_formula(rows, cols, window_m, stride_m):
    ws = plan_windows(extent(rows, cols), WindowSpec(window_m, stride_m))
    w, s = window_m // 10, stride_m // 10
    expect = 0 if rows < w or cols < w else ((rows - w) // s + 1) * ((cols - w) // s + 1)
    assert len(ws) == expect
    for win in ws:
        assert win.col0 + w <= cols and win.row0 + w <= rows


def test_windows_partition_when_stride_equals_window():
    ws = plan_windows(extent(100, 130), WindowSpec(240, 240))
    cover = np.zeros((100, 130), int)
    for w in ws:
        cover[w.row0:w.row0 + 24, w.col0:w.col0 + 24] += 1
    assert len(ws) == (100 // 24) * (130 // 24)
    assert cover.max() == 1 and cover[: 96, : 120].min() == 1 and not cover[96:].any() and not cover[:, 120:].any()


def test_plan_row_major_and_keys():
    ws = plan_windows(extent(96, 96), WindowSpec(480, 480), tile_id="33TUN")
    assert [w.location_key for w in ws] == ["T33TUN_0_0", "T33TUN_48_0", "T33TUN_0_48", "T33TUN_48_48"]
    assert ws == plan_windows(extent(96, 96), WindowSpec(480, 480), tile_id="33TUN")


def test_extent_smaller_than_window():
    assert plan_windows(extent(47, 500), WindowSpec(480, 480)) == []


def test_labeled_only_all_background():
    lab = label_with([], 96, 96)
    assert plan_windows(extent(96, 96), WindowSpec(480, 480, labeled_only=True), lab) == []


def test_labeled_only_keeps_annotated_windows():
    lab = label_with([rect_parcel(1, 500, 10, 520, 30)], 96, 96, scale=4)
    ws = plan_windows(extent(96, 96), WindowSpec(480, 480, labeled_only=True), lab)
    assert [(w.col0, w.row0) for w in ws] == [(48, 0)]


def test_labeled_only_min_fraction():
    lab = label_with([rect_parcel(1, 0, 0, 120, 120), rect_parcel(2, 480, 0, 500, 20)], 96, 96)
    ws = plan_windows(extent(96, 96), WindowSpec(480, 480, labeled_only=True, min_labeled_fraction=0.05), lab)
    assert [(w.col0, w.row0) for w in ws] == [(0, 0)]


def test_labeled_only_needs_label():
    with pytest.raises(TilingError):
        plan_windows(extent(96, 96), WindowSpec(480, 480, labeled_only=True))


def test_misaligned_label_grid():
    shifted = GridSpec(96, 96, GeoTransform(OX + 10, OY, 10.0, 10.0), UTM33N, 1)
    lab = rasterize_parcels([], shifted)
    with pytest.raises(TilingError, match="not aligned"):
        plan_windows(extent(96, 96), WindowSpec(480, 480, labeled_only=True), lab)


@pytest.mark.parametrize("bad", [250, 500, 0, -60])
def test_window_must_divide_by_sixty(bad):
    with pytest.raises(TilingError, match="window_m must be"):
        WindowSpec(window_m=bad, stride_m=480)


# patches


def test_patch_sizes_per_resolution():
    b = bundle()
    w = plan_windows(extent(144, 144), WindowSpec(480, 480))[3]
    sizes = {bid: extract_patch(band, w).values.shape for bid, band in b.bands.items()}
    assert sizes["B02"] == (48, 48) and sizes["B11"] == (24, 24) and sizes["B01"] == (8, 8)


def test_patch_is_exact_crop():
    b = bundle()
    w = plan_windows(extent(144, 144), WindowSpec(480, 240))[5]
    for band in b.bands.values():
        c, r, n, _ = w.pixel_rect(band.resolution_m)
        assert np.array_equal(extract_patch(band, w).values, band.values[r:r + n, c:c + n])


def test_patch_corners_align_across_resolutions():
    b = bundle()
    for w in plan_windows(extent(144, 144), WindowSpec(480, 240)):
        corners = set()
        for band in b.bands.values():
            p = extract_patch(band, w)
            g = pixel_to_geo(0, 0, p.geotransform)
            g2 = pixel_to_geo(p.values.shape[1], p.values.shape[0], p.geotransform)
            corners.add((g.x, g.y, g2.x, g2.y))
        assert corners == {(w.extent()[0], w.extent()[3], w.extent()[2], w.extent()[1])}


def test_patch_out_of_bounds():
    small = BandGrid("B02", 10, np.ones((40, 40), np.uint16), GT10, UTM33N)
    w = plan_windows(extent(96, 96), WindowSpec(480, 480))[0]
    with pytest.raises(TilingError, match="exceeds"):
        extract_patch(small, w)


def test_patch_origin_mismatch():
    other = BandGrid("B02", 10, np.ones((96, 96), np.uint16), GeoTransform(OX + 60, OY, 10.0, 10.0), UTM33N)
    w = plan_windows(extent(96, 96), WindowSpec(480, 480))[0]
    with pytest.raises(TilingError, match="origin"):
        extract_patch(other, w)


@pytest.mark.parametrize("scale, side", [(1, 48), (4, 192)])
def test_label_patch_shapes(scale, side):
    lab = label_with([rect_parcel(1, 33, 41, 407, 388), rect_parcel(2, 200, 300, 700, 600)], 96, 96, scale)
    for w in plan_windows(extent(96, 96), WindowSpec(480, 480)):
        layers = extract_label_patch(lab, w)
        assert set(layers) == {"labels", "parcels", "mask_partial", "mask_full"}
        c, r, n, _ = w.pixel_rect(lab.grid_spec.resolution_m)
        for name, arr in layers.items():
            assert arr.shape == (side, side)
            assert np.array_equal(arr, lab.layers()[name][r:r + n, c:c + n])


def test_label_patch_coverage_gap():
    lab = label_with([], 48, 48)
    w = plan_windows(extent(96, 96), WindowSpec(480, 480))[3]
    with pytest.raises(TilingError, match="does not cover"):
        extract_label_patch(lab, w)


# store


def test_store_layout_and_skip(tmp_path):
    b = bundle(96)
    ws = plan_windows(extent(96, 96), WindowSpec(480, 480), tile_id="T33TUN")
    assert write_product_patches(b, ws, tmp_path) == 4 * 13
    d = patch_date_dir(tmp_path, b.sensing_time)
    assert d.name == "20180501T100000Z"
    arr, meta = read_grid(d / "T33TUN_48_48" / "B8A.grid", verify=True)
    assert arr.shape == (24, 24) and meta["geotransform"][0] == OX + 480
    assert write_product_patches(b, ws, tmp_path) == 0
    (d / "T33TUN_0_0" / "B03.grid").write_bytes(b"\0")
    assert write_product_patches(b, ws, tmp_path) == 1


def test_label_store(tmp_path):
    lab = label_with([rect_parcel(1, 33, 41, 407, 388)], 96, 96, 2)
    ws = plan_windows(extent(96, 96), WindowSpec(480, 480), tile_id="T33TUN")
    assert write_label_patches(lab, ws, tmp_path) == 16
    arr, meta = read_grid(tmp_path / "labels" / "T33TUN_0_0" / "parcels.grid")
    assert arr.shape == (96, 96) and meta["scale"] == 2
    assert write_label_patches(lab, ws, tmp_path) == 0
