"""Three-level administrative hierarchy: district > municipality > tile.

Two plain-text files describe a country.

Regions file::

    # powercal regions v1
    [districts]
    district_id,population
    D00,48211.5
    [municipalities]
    district_id,municipality_id,true_value
    D00,D00-M00,17950.25

The district section may carry several indicator columns (``population``,
``employment``, ...); one is selected at load time.  The municipality
``true_value`` column may be left empty.

Tiles file::

    tile_id,municipality_id,true_value,f0,f1,...,f{F-1}

Lines starting with ``#`` and blank lines are ignored.  Numbers are written
with ``repr`` so a write/read cycle is lossless and byte-stable.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError, ShapeError

REGIONS_MAGIC = "# powercal regions v1"
DEFAULT_INDICATOR = "population"


@dataclass(frozen=True)
class Tile:
    tile_id: str
    municipality_id: str
    features: tuple[float, ...]
    true_value: float | None = None


@dataclass(frozen=True)
class Municipality:
    municipality_id: str
    district_id: str
    tile_ids: tuple[str, ...]
    true_value: float | None = None


@dataclass(frozen=True)
class District:
    district_id: str
    municipality_ids: tuple[str, ...]
    ground_truth: float


@dataclass(frozen=True)
class RegionHierarchy:
    """Immutable, validated partition of a country.

    All id collections are kept in lexicographic order; the array views
    (``tile_ids``, ``features``, ``tile_municipality`` ...) index tiles,
    municipalities and districts in that order.
    """

    districts: tuple[District, ...]
    municipalities: dict[str, Municipality]
    tiles: dict[str, Tile]
    feature_dim: int
    indicator: str = DEFAULT_INDICATOR

    def __post_init__(self):
        object.__setattr__(self, "districts", tuple(sorted(self.districts, key=lambda d: d.district_id)))
        object.__setattr__(self, "municipalities", dict(sorted(self.municipalities.items())))
        object.__setattr__(self, "tiles", dict(sorted(self.tiles.items())))
        self._validate()

    def _validate(self):
        if len(self.districts) < 2:
            raise IntegrityError(f"need at least 2 districts, got {len(self.districts)}")
        seen_d = set()
        owner = {}
        for d in self.districts:
            if d.district_id in seen_d:
                raise IntegrityError(f"duplicate district id {d.district_id!r}")
            seen_d.add(d.district_id)
            if not d.municipality_ids:
                raise IntegrityError(f"district {d.district_id!r} has no municipalities")
            if not (math.isfinite(d.ground_truth) and d.ground_truth > 0):
                raise IntegrityError(
                    f"district {d.district_id!r} ground truth must be positive, got {d.ground_truth!r}"
                )
            for mid in d.municipality_ids:
                if mid in owner:
                    raise IntegrityError(
                        f"municipality {mid!r} listed in districts {owner[mid]!r} and {d.district_id!r}"
                    )
                owner[mid] = d.district_id
        for mid, m in self.municipalities.items():
            if mid != m.municipality_id:
                raise IntegrityError(f"municipality key {mid!r} != id {m.municipality_id!r}")
            if owner.get(mid) != m.district_id:
                raise IntegrityError(f"municipality {mid!r} is not listed under district {m.district_id!r}")
            if not m.tile_ids:
                raise IntegrityError(f"municipality {mid!r} has no tiles")
            for tid in m.tile_ids:
                t = self.tiles.get(tid)
                if t is None:
                    raise IntegrityError(f"municipality {mid!r} references unknown tile {tid!r}")
                if t.municipality_id != mid:
                    raise IntegrityError(f"tile {tid!r} belongs to {t.municipality_id!r}, not {mid!r}")
        missing = set(owner) - set(self.municipalities)
        if missing:
            raise IntegrityError(f"unknown municipality {sorted(missing)[0]!r}")
        n_listed = sum(len(m.tile_ids) for m in self.municipalities.values())
        if n_listed != len(self.tiles):
            raise IntegrityError(f"{len(self.tiles)} tiles but municipalities list {n_listed}")
        for tid, t in self.tiles.items():
            if tid != t.tile_id:
                raise IntegrityError(f"tile key {tid!r} != id {t.tile_id!r}")
            if t.municipality_id not in self.municipalities:
                raise IntegrityError(f"tile {tid!r} references unknown municipality {t.municipality_id!r}")
            if len(t.features) != self.feature_dim:
                raise ShapeError(
                    f"tile {tid!r} has {len(t.features)} features, expected {self.feature_dim}"
                )

    @classmethod
    def build(cls, ground_truth, municipality_district, tiles, feature_dim=None,
              municipality_truth=None, indicator=DEFAULT_INDICATOR):
        """Assemble a hierarchy from flat membership tables.

        ``ground_truth``: district_id -> G; ``municipality_district``:
        municipality_id -> district_id; ``tiles``: iterable of Tile.
        """
        municipality_truth = municipality_truth or {}
        tiles = list(tiles)
        tile_map = {}
        by_muni: dict[str, list[str]] = {}
        for t in tiles:
            if t.tile_id in tile_map:
                raise IntegrityError(f"duplicate tile id {t.tile_id!r}")
            tile_map[t.tile_id] = t
            if t.municipality_id not in municipality_district:
                raise IntegrityError(
                    f"tile {t.tile_id!r} references unknown municipality {t.municipality_id!r}"
                )
            by_muni.setdefault(t.municipality_id, []).append(t.tile_id)
        if feature_dim is None:
            feature_dim = len(tiles[0].features) if tiles else 0
        by_district: dict[str, list[str]] = {}
        for mid, did in municipality_district.items():
            if did not in ground_truth:
                raise IntegrityError(f"municipality {mid!r} references unknown district {did!r}")
            by_district.setdefault(did, []).append(mid)
        munis = {
            mid: Municipality(mid, did, tuple(sorted(by_muni.get(mid, ()))), municipality_truth.get(mid))
            for mid, did in municipality_district.items()
        }
        districts = tuple(
            District(did, tuple(sorted(by_district.get(did, ()))), float(g))
            for did, g in ground_truth.items()
        )
        return cls(districts, munis, tile_map, feature_dim, indicator)

    # array views, all in sorted-id order

    @cached_property
    def district_ids(self) -> list[str]:
        return [d.district_id for d in self.districts]

    @cached_property
    def municipality_ids(self) -> list[str]:
        return list(self.municipalities)

    @cached_property
    def tile_ids(self) -> list[str]:
        return list(self.tiles)

    @cached_property
    def district_index(self) -> dict[str, int]:
        return {d: i for i, d in enumerate(self.district_ids)}

    @cached_property
    def municipality_index(self) -> dict[str, int]:
        return {m: i for i, m in enumerate(self.municipality_ids)}

    @cached_property
    def tile_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tile_ids)}

    @cached_property
    def features(self) -> np.ndarray:
        out = np.array([t.features for t in self.tiles.values()], dtype=float)
        return out.reshape(len(self.tiles), self.feature_dim)

    @cached_property
    def tile_municipality(self) -> np.ndarray:
        mi = self.municipality_index
        return np.array([mi[t.municipality_id] for t in self.tiles.values()], dtype=np.intp)

    @cached_property
    def municipality_district(self) -> np.ndarray:
        di = self.district_index
        return np.array([di[m.district_id] for m in self.municipalities.values()], dtype=np.intp)

    @cached_property
    def tile_district(self) -> np.ndarray:
        return self.municipality_district[self.tile_municipality]

    @cached_property
    def ground_truth(self) -> np.ndarray:
        return np.array([d.ground_truth for d in self.districts], dtype=float)

    @cached_property
    def district_municipalities(self) -> list[np.ndarray]:
        """Municipality indices per district, ascending (= sorted by id)."""
        return [np.flatnonzero(self.municipality_district == k) for k in range(len(self.districts))]

    @cached_property
    def tile_truth(self) -> np.ndarray:
        """Tile true values, NaN where absent."""
        return np.array([np.nan if t.true_value is None else t.true_value for t in self.tiles.values()])

    @cached_property
    def municipality_truth(self) -> np.ndarray:
        return np.array(
            [np.nan if m.true_value is None else m.true_value for m in self.municipalities.values()]
        )

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    def without_truth(self) -> RegionHierarchy:
        """Copy with all held-out tile and municipality values removed."""
        tiles = {k: Tile(t.tile_id, t.municipality_id, t.features) for k, t in self.tiles.items()}
        munis = {
            k: Municipality(m.municipality_id, m.district_id, m.tile_ids)
            for k, m in self.municipalities.items()
        }
        return RegionHierarchy(self.districts, munis, tiles, self.feature_dim, self.indicator)

    def subset(self, district_ids) -> RegionHierarchy:
        keep = set(district_ids)
        unknown = keep - set(self.district_ids)
        if unknown:
            raise IntegrityError(f"unknown district {sorted(unknown)[0]!r}")
        districts = tuple(d for d in self.districts if d.district_id in keep)
        munis = {k: m for k, m in self.municipalities.items() if m.district_id in keep}
        tiles = {k: t for k, t in self.tiles.items() if t.municipality_id in munis}
        return RegionHierarchy(districts, munis, tiles, self.feature_dim, self.indicator)


def eligible_districts(h: RegionHierarchy, min_municipalities: int = 7) -> list[str]:
    if min_municipalities < 1:
        raise ValueError("min_municipalities must be >= 1")
    return [d.district_id for d in h.districts if len(d.municipality_ids) >= min_municipalities]


# ---------------------------------------------------------------- file io


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _parse_float(text, path, line, what, allow_empty=False):
    text = text.strip()
    if text == "":
        if allow_empty:
            return None
        raise ParseError(path, line, f"missing value for {what}")
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, line, f"{what}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise ParseError(path, line, f"{what}: non-finite value {text!r}")
    return value


def _data_lines(path):
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            stripped = raw.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, raw.rstrip("\r\n")


def _split(line):
    return [c.strip() for c in next(csv.reader([line]))]


def read_regions(path, indicator=DEFAULT_INDICATOR):
    """Parse a regions file -> (ground_truth, municipality_district, municipality_truth)."""
    path = Path(path)
    section = None
    header = None
    gt_col = None
    ground_truth: dict[str, float] = {}
    muni_district: dict[str, str] = {}
    muni_truth: dict[str, float] = {}
    for lineno, line in _data_lines(path):
        if line.strip().startswith("["):
            name = line.strip()
            if name not in ("[districts]", "[municipalities]"):
                raise ParseError(path, lineno, f"unknown section {name}")
            section, header = name, None
            continue
        if section is None:
            raise ParseError(path, lineno, "record before any [section] header")
        cells = _split(line)
        if header is None:
            header = cells
            if section == "[districts]":
                if header[0] != "district_id" or len(header) < 2:
                    raise ParseError(path, lineno, "districts header must be 'district_id,<indicator>,...'")
                if indicator not in header[1:]:
                    raise ParseError(
                        path, lineno, f"indicator column {indicator!r} not found (have {', '.join(header[1:])})"
                    )
                gt_col = header.index(indicator)
            elif header[:2] != ["district_id", "municipality_id"]:
                raise ParseError(path, lineno, "municipalities header must start 'district_id,municipality_id'")
            continue
        if len(cells) != len(header):
            raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(cells)}")
        if section == "[districts]":
            did = cells[0]
            if not did:
                raise ParseError(path, lineno, "empty district_id")
            if did in ground_truth:
                raise IntegrityError(f"{path}:{lineno}: duplicate district id {did!r}")
            ground_truth[did] = _parse_float(cells[gt_col], path, lineno, header[gt_col])
        else:
            did, mid = cells[0], cells[1]
            if not mid:
                raise ParseError(path, lineno, "empty municipality_id")
            if mid in muni_district:
                raise IntegrityError(f"{path}:{lineno}: duplicate municipality id {mid!r}")
            muni_district[mid] = did
            if len(cells) > 2:
                v = _parse_float(cells[2], path, lineno, header[2], allow_empty=True)
                if v is not None:
                    muni_truth[mid] = v
    if not ground_truth:
        raise ParseError(path, 0, "no [districts] records")
    if not muni_district:
        raise ParseError(path, 0, "no [municipalities] records")
    for mid, did in muni_district.items():
        if did not in ground_truth:
            raise IntegrityError(f"municipality {mid!r} references unknown district {did!r}")
    return ground_truth, muni_district, muni_truth


def read_tiles(path):
    path = Path(path)
    tiles = []
    header = None
    for lineno, line in _data_lines(path):
        cells = _split(line)
        if header is None:
            header = cells
            if header[:3] != ["tile_id", "municipality_id", "true_value"]:
                raise ParseError(path, lineno, "header must start 'tile_id,municipality_id,true_value'")
            expected = [f"f{i}" for i in range(len(header) - 3)]
            if header[3:] != expected:
                raise ParseError(path, lineno, f"feature columns must be {','.join(expected) or '(none)'}")
            continue
        if len(cells) != len(header):
            raise ShapeError(f"{path}:{lineno}: expected {len(header)} fields, got {len(cells)}")
        if not cells[0]:
            raise ParseError(path, lineno, "empty tile_id")
        tv = _parse_float(cells[2], path, lineno, "true_value", allow_empty=True)
        feats = tuple(_parse_float(c, path, lineno, header[3 + i]) for i, c in enumerate(cells[3:]))
        tiles.append(Tile(cells[0], cells[1], feats, tv))
    if header is None:
        raise ParseError(path, 0, "empty tiles file")
    return tiles, len(header) - 3


def load_hierarchy(regions_file, tiles_file, indicator=DEFAULT_INDICATOR) -> RegionHierarchy:
    ground_truth, muni_district, muni_truth = read_regions(regions_file, indicator)
    tiles, dim = read_tiles(tiles_file)
    return RegionHierarchy.build(ground_truth, muni_district, tiles, dim, muni_truth, indicator)


def regions_text(h: RegionHierarchy) -> str:
    buf = io.StringIO()
    buf.write(REGIONS_MAGIC + "\n[districts]\n")
    buf.write(f"district_id,{h.indicator}\n")
    for d in h.districts:
        buf.write(f"{d.district_id},{_fmt(d.ground_truth)}\n")
    buf.write("[municipalities]\ndistrict_id,municipality_id,true_value\n")
    for m in h.municipalities.values():
        buf.write(f"{m.district_id},{m.municipality_id},{_fmt(m.true_value)}\n")
    return buf.getvalue()


def tiles_text(h: RegionHierarchy) -> str:
    buf = io.StringIO()
    cols = ["tile_id", "municipality_id", "true_value"] + [f"f{i}" for i in range(h.feature_dim)]
    buf.write(",".join(cols) + "\n")
    for t in h.tiles.values():
        row = [t.tile_id, t.municipality_id, _fmt(t.true_value)] + [_fmt(x) for x in t.features]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def save_hierarchy(h: RegionHierarchy, regions_file, tiles_file) -> None:
    Path(regions_file).write_text(regions_text(h), encoding="utf-8", newline="")
    Path(tiles_file).write_text(tiles_text(h), encoding="utf-8", newline="")
