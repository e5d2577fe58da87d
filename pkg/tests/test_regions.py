import numpy as np
import pytest

from powercal.errors import IntegrityError, ParseError, ShapeError
from powercal.regions import (
    RegionHierarchy,
    Tile,
    eligible_districts,
    load_hierarchy,
    regions_text,
    save_hierarchy,
    tiles_text,
)
from powercal.synth import SynthConfig, generate_country

from conftest import random_hierarchy

MINIMAL_REGIONS = """\
# powercal regions v1
[districts]
district_id,population
A,10
B,30.5
[municipalities]
district_id,municipality_id,true_value
A,MA,10
B,MB,
"""

MINIMAL_TILES = """\
tile_id,municipality_id,true_value,f0,f1
ta,MA,10,0.5,1
tb,MB,,1.5,-2
"""


def write(tmp_path, regions, tiles):
    r = tmp_path / "regions.txt"
    t = tmp_path / "tiles.csv"
    r.write_text(regions)
    t.write_text(tiles)
    return r, t


def test_load_minimal(tmp_path):
    h = load_hierarchy(*write(tmp_path, MINIMAL_REGIONS, MINIMAL_TILES))
    assert h.district_ids == ["A", "B"]
    assert h.n_tiles == 2
    assert h.feature_dim == 2
    assert h.ground_truth.tolist() == [10.0, 30.5]
    assert h.tiles["tb"].true_value is None
    assert h.municipalities["MB"].true_value is None
    assert h.municipalities["MA"].tile_ids == ("ta",)
    np.testing.assert_array_equal(h.features, [[0.5, 1.0], [1.5, -2.0]])


def test_indicator_column_selection(tmp_path):
    regions = MINIMAL_REGIONS.replace("district_id,population", "district_id,population,employment")
    regions = regions.replace("\nA,10\n", "\nA,10,3\n").replace("\nB,30.5\n", "\nB,30.5,7\n")
    r, t = write(tmp_path, regions, MINIMAL_TILES)
    assert load_hierarchy(r, t, "employment").ground_truth.tolist() == [3.0, 7.0]
    with pytest.raises(ParseError, match="income"):
        load_hierarchy(r, t, "income")


def test_unknown_municipality_named(tmp_path):
    tiles = MINIMAL_TILES + "tc,M99,1,0,0\n"
    with pytest.raises(IntegrityError, match="M99"):
        load_hierarchy(*write(tmp_path, MINIMAL_REGIONS, tiles))


def test_duplicate_tile(tmp_path):
    tiles = MINIMAL_TILES + "ta,MB,1,0,0\n"
    with pytest.raises(IntegrityError, match="ta"):
        load_hierarchy(*write(tmp_path, MINIMAL_REGIONS, tiles))


def test_duplicate_municipality(tmp_path):
    regions = MINIMAL_REGIONS + "A,MB,\n"
    with pytest.raises(IntegrityError, match="MB"):
        load_hierarchy(*write(tmp_path, regions, MINIMAL_TILES))


def test_dangling_district(tmp_path):
    regions = MINIMAL_REGIONS + "Z,MZ,\n"
    with pytest.raises(IntegrityError, match="'Z'"):
        load_hierarchy(*write(tmp_path, regions, MINIMAL_TILES))


def test_feature_dimension_mismatch(tmp_path):
    tiles = MINIMAL_TILES + "tc,MB,1,0\n"
    with pytest.raises(ShapeError):
        load_hierarchy(*write(tmp_path, MINIMAL_REGIONS, tiles))


def test_malformed_number_names_line(tmp_path):
    tiles = MINIMAL_TILES.replace("1.5", "1.5x")
    with pytest.raises(ParseError) as exc:
        load_hierarchy(*write(tmp_path, MINIMAL_REGIONS, tiles))
    assert exc.value.line == 3
    assert "f0" in str(exc.value)


def test_malformed_regions_header(tmp_path):
    with pytest.raises(ParseError):
        load_hierarchy(*write(tmp_path, MINIMAL_REGIONS.replace("[districts]\n", ""), MINIMAL_TILES))


def test_municipality_without_tiles(tmp_path):
    regions = MINIMAL_REGIONS + "B,MEMPTY,\n"
    with pytest.raises(IntegrityError, match="MEMPTY"):
        load_hierarchy(*write(tmp_path, regions, MINIMAL_TILES))


def test_nonpositive_ground_truth(tmp_path):
    with pytest.raises(IntegrityError):
        load_hierarchy(*write(tmp_path, MINIMAL_REGIONS.replace("\nA,10\n", "\nA,0\n"), MINIMAL_TILES))


def test_single_district_rejected():
    tiles = [Tile("t", "m", (0.0,), 1.0)]
    with pytest.raises(IntegrityError, match="2 districts"):
        RegionHierarchy.build({"A": 1.0}, {"m": "A"}, tiles, 1)


def test_round_trip_is_byte_identical(tmp_path):
    h = generate_country(SynthConfig(seed=7))
    r1, t1 = tmp_path / "r1.txt", tmp_path / "t1.csv"
    save_hierarchy(h, r1, t1)
    h2 = load_hierarchy(r1, t1)
    assert h2 == h
    r2, t2 = tmp_path / "r2.txt", tmp_path / "t2.csv"
    save_hierarchy(h2, r2, t2)
    assert r1.read_bytes() == r2.read_bytes()
    assert t1.read_bytes() == t2.read_bytes()


def test_load_is_deterministic(tmp_path):
    r, t = write(tmp_path, MINIMAL_REGIONS, MINIMAL_TILES)
    assert load_hierarchy(r, t) == load_hierarchy(r, t)
    assert regions_text(load_hierarchy(r, t)) == regions_text(load_hierarchy(r, t))


def test_partition_counts():
    rng = np.random.default_rng(0)
    h = random_hierarchy(rng, n_districts=5)
    assert sum(len(m.tile_ids) for m in h.municipalities.values()) == h.n_tiles
    assert sum(len(d.municipality_ids) for d in h.districts) == len(h.municipalities)
    # array views agree with the records
    for k, tid in enumerate(h.tile_ids):
        mid = h.tiles[tid].municipality_id
        assert h.municipality_ids[h.tile_municipality[k]] == mid
        assert h.district_ids[h.tile_district[k]] == h.municipalities[mid].district_id


def test_without_truth_strips_held_out_values():
    h = random_hierarchy(np.random.default_rng(1))
    bare = h.without_truth()
    assert all(t.true_value is None for t in bare.tiles.values())
    assert all(m.true_value is None for m in bare.municipalities.values())
    assert bare.ground_truth.tolist() == h.ground_truth.tolist()
    assert np.isnan(bare.tile_truth).all()


def test_subset():
    h = random_hierarchy(np.random.default_rng(2), n_districts=4)
    sub = h.subset(["d001", "d003"])
    assert sub.district_ids == ["d001", "d003"]
    assert all(m.district_id in ("d001", "d003") for m in sub.municipalities.values())
    with pytest.raises(IntegrityError):
        h.subset(["nope", "d001"])


def _h_with_counts(counts):
    gt, md, tiles = {}, {}, []
    for d, n in enumerate(counts):
        did = f"D{d}"
        gt[did] = 1.0 + d
        for j in range(n):
            mid = f"{did}M{j}"
            md[mid] = did
            tiles.append(Tile(f"{mid}T", mid, (), 1.0))
    return RegionHierarchy.build(gt, md, tiles, 0)


def test_eligible_districts_boundary():
    h = _h_with_counts([6, 7, 8])
    assert eligible_districts(h, 7) == ["D1", "D2"]
    assert eligible_districts(h) == ["D1", "D2"]
    assert eligible_districts(h, 1) == ["D0", "D1", "D2"]
    with pytest.raises(ValueError):
        eligible_districts(h, 0)


def test_tiles_text_header():
    h = _h_with_counts([1, 1])
    assert tiles_text(h).splitlines()[0] == "tile_id,municipality_id,true_value"
