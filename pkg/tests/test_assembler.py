import json
import tracemalloc
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import UTM33N
from satseries.assembler import (
    AssemblyError,
    AssemblyStats,
    Candidate,
    DatasetIndex,
    IndexRow,
    assemble,
    dedupe_same_day,
    read_sample,
    split_assign,
)
from satseries.geo import GeoTransform
from satseries.ingest import read_grid, write_grid
from satseries.timefmt import format_basic, format_utc

OX, OY = 399960.0, 5300040.0


def utc(day, hour=10, minute=0):
    return datetime(2018, 5, day, hour, minute, tzinfo=timezone.utc)


def add_date(store: Path, when: datetime, pid: str, locations, *, cloud=1.0, side=6, seed=0, bands=("B02", "B11")):
    """Write one product's patches; location k is keyed T33TUN_<6k>_0 whatever the patch size."""
    d = store / "patches" / format_basic(when)
    d.mkdir(parents=True, exist_ok=True)
    info = {"product_id": pid, "tile_id": "T33TUN", "sensing_time": format_utc(when), "cloud_cover_pct": cloud}
    (d / "product.T33TUN.json").write_text(json.dumps(info))
    rng = np.random.default_rng(seed)
    for k in locations:
        for bid in bands:
            res = 10 if bid == "B02" else 20
            n = side * 10 // res
            write_grid(d / f"T33TUN_{k * 6}_0" / f"{bid}.grid", rng.integers(1, 9999, (n, n)), name=bid,
                       dtype="u16le", geotransform=GeoTransform(OX + k * side * 10, OY, res, res), crs=UTM33N,
                       resolution_m=res)
    return d


# grouping


def test_shuffled_dates_sorted(tmp_path):
    days = [9, 2, 30, 14, 21]
    for i, day in enumerate(days):
        add_date(tmp_path / "store", utc(day), f"P{day:02d}", [0], seed=i)
    index = assemble(tmp_path / "store", None, tmp_path / "out")
    assert [(r.location_key, r.T) for r in index.rows] == [("T33TUN_0_0", 5)]
    s = read_sample(tmp_path / "out" / index.rows[0].path)
    assert s["meta"]["timestamps"] == [format_utc(utc(d)) for d in sorted(days)]
    assert s["bands"]["B02"].shape == (5, 6, 6) and s["bands"]["B11"].shape == (5, 3, 3)
    assert s["meta"]["bands"] == ["B02", "B11"]


def test_variable_length_per_location(tmp_path):
    for day in (1, 2, 3, 4, 5):
        locs = [0, 1] if day in (1, 3, 5) else [0]
        add_date(tmp_path / "store", utc(day), f"P{day}", locs, seed=day)
    index = assemble(tmp_path / "store", None, tmp_path / "out")
    assert {r.location_key: r.T for r in index.rows} == {"T33TUN_0_0": 5, "T33TUN_6_0": 3}


def test_min_t_drops_short_locations(tmp_path):
    for day in (1, 2, 3):
        add_date(tmp_path / "store", utc(day), f"P{day}", [0] if day < 3 else [0, 1])
    stats = AssemblyStats()
    index = assemble(tmp_path / "store", None, tmp_path / "out", min_t=2, stats=stats)
    assert [r.location_key for r in index.rows] == ["T33TUN_0_0"] and stats.skipped_short == 1


def test_same_day_keeps_less_cloudy(tmp_path):
    add_date(tmp_path / "store", utc(3, 10, 0), "S2B_cloudy", [0], cloud=12.0, seed=1)
    add_date(tmp_path / "store", utc(3, 10, 5), "S2A_clear", [0], cloud=3.0, seed=2)
    add_date(tmp_path / "store", utc(9), "S2A_other", [0], seed=3)
    index = assemble(tmp_path / "store", None, tmp_path / "out")
    s = read_sample(tmp_path / "out" / index.rows[0].path)
    assert index.rows[0].T == 2 and s["meta"]["provenance"] == ["S2A_clear", "S2A_other"]
    src, _ = read_grid(tmp_path / "store" / "patches" / format_basic(utc(3, 10, 5)) / "T33TUN_0_0" / "B02.grid")
    assert np.array_equal(s["bands"]["B02"][0], src)


def cand(pid, cloud):
    return Candidate(pid, utc(1), cloud, Path("."))


def test_dedupe_rules():
    assert dedupe_same_day([cand("A", 5.0)]).product_id == "A"
    assert dedupe_same_day([cand("A", 12.0), cand("B", 3.0)]).product_id == "B"
    assert dedupe_same_day([cand("Z", 3.0), cand("M", 3.0)]).product_id == "M"
    assert dedupe_same_day([cand("A", None), cand("B", 99.0)]).product_id == "B"
    with pytest.raises(AssemblyError):
        dedupe_same_day([])


def test_inconsistent_shapes_name_the_key(tmp_path):
    add_date(tmp_path / "store", utc(1), "P1", [0, 1])
    add_date(tmp_path / "store", utc(2), "P2", [0])
    add_date(tmp_path / "store", utc(2), "P2", [1], side=12)
    with pytest.raises(AssemblyError, match="T33TUN_6_0.*B02"):
        assemble(tmp_path / "store", None, tmp_path / "out")


def test_band_set_mismatch(tmp_path):
    add_date(tmp_path / "store", utc(1), "P1", [0])
    add_date(tmp_path / "store", utc(2), "P2", [0], bands=("B02",))
    with pytest.raises(AssemblyError, match="T33TUN_0_0: band set differs"):
        assemble(tmp_path / "store", None, tmp_path / "out")


def test_missing_store(tmp_path):
    with pytest.raises(AssemblyError, match="no patch store"):
        assemble(tmp_path / "nope", None, tmp_path / "out")


# round trip and index


def test_round_trip_bit_exact_with_labels(tmp_path):
    store = tmp_path / "store"
    dirs = [add_date(store, utc(d), f"P{d}", [0, 1, 2], seed=d) for d in (4, 11, 19)]
    lab = store / "labels" / "T33TUN_6_0"
    write_grid(lab / "labels.grid", np.arange(36).reshape(6, 6), name="labels", dtype="u32le",
               geotransform=GeoTransform(OX + 60, OY, 10, 10), crs=UTM33N, extra={"scale": 1, "year": 2018, "background": 0})
    index = assemble(store, store / "labels", tmp_path / "out")
    assert {r.location_key: r.labeled for r in index.rows} == {"T33TUN_0_0": False, "T33TUN_6_0": True, "T33TUN_12_0": False}
    for r in index.rows:
        s = read_sample(tmp_path / "out" / r.path)
        for t, d in enumerate(dirs):
            for bid in ("B02", "B11"):
                src, _ = read_grid(d / r.location_key / f"{bid}.grid")
                assert np.array_equal(s["bands"][bid][t], src)
    s = read_sample(tmp_path / "out" / "samples" / "T33TUN_6_0")
    assert np.array_equal(s["labels"]["labels"], np.arange(36).reshape(6, 6))
    assert s["meta"]["label_layers"] == ["labels"]


def test_index_complete_and_readable(tmp_path):
    for d in (1, 2):
        add_date(tmp_path / "store", utc(d), f"P{d}", range(7))
    index = assemble(tmp_path / "store", None, tmp_path / "out")
    listed = sorted(p.name for p in (tmp_path / "out" / "samples").iterdir())
    assert listed == sorted(r.location_key for r in index.rows)
    back = DatasetIndex.read_csv(tmp_path / "out" / "index.csv")
    assert back.rows == index.rows
    assert (tmp_path / "out" / "index.csv").read_text().splitlines()[0] == "location_key,T,labeled,path,split"


def test_rerun_regenerates_only_missing(tmp_path):
    for d in (1, 2):
        add_date(tmp_path / "store", utc(d), f"P{d}", range(4))
    assemble(tmp_path / "store", None, tmp_path / "out")
    before = (tmp_path / "out" / "index.csv").read_bytes()
    (tmp_path / "out" / "samples" / "T33TUN_12_0" / "B11.grid").unlink()
    stats = AssemblyStats()
    assemble(tmp_path / "store", None, tmp_path / "out", stats=stats)
    assert stats.regenerated == 1 and (tmp_path / "out" / "index.csv").read_bytes() == before


def test_threads_match_serial(tmp_path):
    for d in (1, 2, 3):
        add_date(tmp_path / "store", utc(d), f"P{d}", range(6), seed=d)
    a = assemble(tmp_path / "store", None, tmp_path / "a")
    b = assemble(tmp_path / "store", None, tmp_path / "b", jobs=4)
    assert a.rows == b.rows
    for r in a.rows:
        assert (tmp_path / "a" / r.path / "B02.grid").read_bytes() == (tmp_path / "b" / r.path / "B02.grid").read_bytes()


def test_duplicate_keys_rejected():
    with pytest.raises(AssemblyError):
        DatasetIndex([IndexRow("K", 1, False, "a"), IndexRow("K", 2, False, "b")])


# splits


def keys(n):
    return DatasetIndex([IndexRow(f"T33TUN_{i * 48}_{(i * 7) % 2000}", 1, False, "") for i in range(n)])


def test_split_degenerate_ratio():
    assert {r.split for r in split_assign(keys(500), (1, 0, 0)).rows} == {"train"}
    assert {r.split for r in split_assign(keys(500), (0, 0, 1)).rows} == {"test"}


def test_split_proportions_on_ten_thousand_keys():
    rows = split_assign(keys(10_000), (0.8, 0.1, 0.1), seed=3).rows
    share = {s: sum(r.split == s for r in rows) / len(rows) for s in ("train", "val", "test")}
    assert abs(share["train"] - 0.8) <= 0.02 and abs(share["val"] - 0.1) <= 0.02 and abs(share["test"] - 0.1) <= 0.02


def test_split_bad_ratios():
    with pytest.raises(AssemblyError):
        split_assign(keys(3), (0.5, 0.4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.permutations(list(range(40))))
def test_split_deterministic_and_order_free(seed, perm):
    idx = keys(40)
    a = {r.location_key: r.split for r in split_assign(idx, seed=seed).rows}
    b = {r.location_key: r.split for r in split_assign(DatasetIndex([idx.rows[i] for i in perm]), seed=seed).rows}
    assert a == b


# memory


def test_peak_memory_is_per_location(tmp_path):
    side, dates = 96, 3
    per_location = dates * side * side * 2  # one B02 timeseries, bytes

    def peak(n):
        store = tmp_path / f"s{n}"
        for d in range(dates):
            add_date(store, utc(d + 1), f"P{d}", range(n), side=side, seed=d, bands=("B02",))
        tracemalloc.start()
        try:
            assemble(store, None, tmp_path / f"o{n}")
            return tracemalloc.get_traced_memory()[1]
        finally:
            tracemalloc.stop()

    p100, p1000 = peak(100), peak(1000)
    total_1000 = 1000 * per_location
    print(f"peak 100 locations {p100} B, 1000 locations {p1000} B, one timeseries {per_location} B")
    # index rows and store listing grow by a few kB per location; pixel data must not
    assert p1000 < 4 * per_location + 4096 * 1000
    assert p1000 - p100 < 0.1 * (total_1000 - 100 * per_location)
