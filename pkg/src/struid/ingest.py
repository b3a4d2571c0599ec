"""Check-in log ingestion: parsing, region derivation, chronological split.

Raw records are (user, poi, lat, lon, category, timestamp) tuples, one per
line, in JSONL or 6-column TSV. Regions are minted from a uniform lat/lon
grid over the dataset bounding box, since check-in logs carry coordinates
but no region vocabulary of their own.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

logger = logging.getLogger(__name__)

MALFORMED_LINE_BUDGET = 0.01  # fraction of bad lines tolerated before giving up


@dataclass(frozen=True)
class CheckInEvent:
    """One check-in: a user visiting a POI at a point in time."""

    user_id: str
    poi_id: str
    lat: float
    lon: float
    category_id: str
    timestamp: int

    def validate(self) -> None:
        if not (-90.0 <= self.lat <= 90.0):
            raise DataError(f"latitude out of range: {self.lat}")
        if not (-180.0 <= self.lon <= 180.0):
            raise DataError(f"longitude out of range: {self.lon}")
        if self.timestamp <= 0:
            raise DataError(f"timestamp must be positive: {self.timestamp}")


@dataclass(frozen=True)
class RegionGrid:
    """Uniform lat/lon grid over the dataset bounding box."""

    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float
    cells_per_axis: int

    def cell_of(self, lat: float, lon: float) -> tuple[int, int]:
        """Raw (row, col) cell of a coordinate, clamped to the grid."""
        n = self.cells_per_axis
        lat_span = self.max_lat - self.min_lat
        lon_span = self.max_lon - self.min_lon
        row = 0 if lat_span <= 0 else min(int(math.floor((lat - self.min_lat) / lat_span * n)), n - 1)
        col = 0 if lon_span <= 0 else min(int(math.floor((lon - self.min_lon) / lon_span * n)), n - 1)
        return max(row, 0), max(col, 0)


@dataclass
class DatasetSplit:
    """Per-user chronological train/valid/test partition of check-ins."""

    train: dict[str, list[CheckInEvent]] = field(default_factory=dict)
    valid: dict[str, list[CheckInEvent]] = field(default_factory=dict)
    test: dict[str, list[CheckInEvent]] = field(default_factory=dict)

    def users(self) -> list[str]:
        return sorted(self.train)

    def events_of(self, part: str) -> list[CheckInEvent]:
        chunk = getattr(self, part)
        return [e for user in sorted(chunk) for e in chunk[user]]


def _event_from_fields(user, poi, lat, lon, category, ts) -> CheckInEvent:
    event = CheckInEvent(
        user_id=str(user),
        poi_id=str(poi),
        lat=float(lat),
        lon=float(lon),
        category_id=str(category),
        timestamp=int(ts),
    )
    event.validate()
    return event


def event_to_obj(e: CheckInEvent) -> dict:
    return {"user": e.user_id, "poi": e.poi_id, "lat": e.lat, "lon": e.lon,
            "category": e.category_id, "ts": e.timestamp}


def event_from_obj(obj: dict) -> CheckInEvent:
    return _event_from_fields(obj["user"], obj["poi"], obj["lat"], obj["lon"], obj["category"], obj["ts"])


def parse_checkins(path, fmt: str = "jsonl") -> list[CheckInEvent]:
    """Parse a raw check-in log into events, preserving file order.

    Malformed lines are counted and reported; more than 1% of them (or any
    POI whose coordinates/category conflict with an earlier line) is fatal.
    """
    path = Path(path)
    if fmt not in ("jsonl", "tsv"):
        raise DataError(f"unknown check-in format: {fmt!r}")
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read check-in file {path}: {exc}") from exc

    events: list[CheckInEvent] = []
    bad_lines: list[int] = []
    poi_meta: dict[str, tuple[float, float, str]] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            if fmt == "jsonl":
                obj = json.loads(line)
                event = _event_from_fields(obj["user"], obj["poi"], obj["lat"], obj["lon"],
                                           obj["category"], obj["ts"])
            else:
                fields = line.rstrip("\n").split("\t")
                if len(fields) != 6:
                    raise DataError(f"expected 6 tab-separated fields, got {len(fields)}")
                event = _event_from_fields(*fields)
        except (DataError, KeyError, ValueError, TypeError) as exc:
            bad_lines.append(lineno)
            logger.warning("%s:%d malformed check-in line: %s", path.name, lineno, exc)
            continue

        meta = (event.lat, event.lon, event.category_id)
        first = poi_meta.setdefault(event.poi_id, meta)
        if first != meta:
            raise DataError(
                f"{path.name}:{lineno} POI {event.poi_id!r} conflicts with earlier metadata: "
                f"{meta} vs {first}"
            )
        events.append(event)

    total = len(events) + len(bad_lines)
    if bad_lines and total > 0 and len(bad_lines) / total > MALFORMED_LINE_BUDGET:
        shown = ", ".join(str(n) for n in bad_lines[:20])
        raise DataError(
            f"{len(bad_lines)}/{total} malformed lines in {path} (lines {shown}"
            + (", ..." if len(bad_lines) > 20 else "") + ")"
        )
    if bad_lines:
        logger.warning("skipped %d malformed lines in %s", len(bad_lines), path)
    if not events:
        logger.warning("no check-in events parsed from %s", path)
    return events


def collect_poi_meta(events: list[CheckInEvent]) -> dict[str, tuple[float, float, str]]:
    """poi_id -> (lat, lon, category_id); first occurrence wins."""
    meta: dict[str, tuple[float, float, str]] = {}
    for e in events:
        meta.setdefault(e.poi_id, (e.lat, e.lon, e.category_id))
    return meta


def assign_regions(events: list[CheckInEvent], cells_per_axis: int = 20) -> tuple[RegionGrid, dict[str, int]]:
    """Map every POI to a region cell of a uniform grid over the tight bbox.

    Region ids are dense integers over non-empty cells, numbered in
    (row, col) order so the assignment is reproducible.
    """
    if not events:
        raise DataError("assign_regions needs at least one event")
    if cells_per_axis < 1:
        raise DataError(f"cells_per_axis must be >= 1, got {cells_per_axis}")
    meta = collect_poi_meta(events)
    lats = [m[0] for m in meta.values()]
    lons = [m[1] for m in meta.values()]
    grid = RegionGrid(min(lats), min(lons), max(lats), max(lons), cells_per_axis)

    cells = {poi: grid.cell_of(lat, lon) for poi, (lat, lon, _) in meta.items()}
    dense = {cell: i for i, cell in enumerate(sorted(set(cells.values())))}
    return grid, {poi: dense[cell] for poi, cell in cells.items()}


def split_chronological(events: list[CheckInEvent]) -> DatasetSplit:
    """70/10/20 per-user chronological split (floor rounding, rest to test).

    Ties in timestamp keep input order. Users with fewer than 3 events go
    wholly to train; they cannot yield a target with history.
    """
    if not events:
        raise DataError("split_chronological needs at least one event")
    per_user: dict[str, list[CheckInEvent]] = {}
    for e in events:
        per_user.setdefault(e.user_id, []).append(e)

    split = DatasetSplit()
    for user in sorted(per_user):
        seq = sorted(per_user[user], key=lambda e: e.timestamp)  # stable: ties keep input order
        n = len(seq)
        if n < 3:
            n_train, n_valid = n, 0
        else:
            n_train = int(math.floor(0.7 * n))
            n_valid = int(math.floor(0.1 * n))
        split.train[user] = seq[:n_train]
        split.valid[user] = seq[n_train:n_train + n_valid]
        split.test[user] = seq[n_train + n_valid:]
    return split


def dataset_stats(events: list[CheckInEvent], region_map: dict[str, int]) -> dict:
    return {
        "users": len({e.user_id for e in events}),
        "pois": len({e.poi_id for e in events}),
        "records": len(events),
        "categories": len({e.category_id for e in events}),
        "regions": len(set(region_map.values())),
    }


def write_split_jsonl(split: DatasetSplit, directory) -> dict[str, str]:
    """Write one JSONL manifest per part; returns part -> filename."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {}
    for part in ("train", "valid", "test"):
        fname = f"{part}.jsonl"
        with open(directory / fname, "w") as fh:
            for e in split.events_of(part):
                fh.write(json.dumps(event_to_obj(e), sort_keys=True) + "\n")
        names[part] = fname
    return names


def read_split_jsonl(directory) -> DatasetSplit:
    directory = Path(directory)
    split = DatasetSplit()
    for part in ("train", "valid", "test"):
        chunk = getattr(split, part)
        f = directory / f"{part}.jsonl"
        if not f.exists():
            raise DataError(f"missing split file: {f}")
        for line in f.read_text().splitlines():
            if line.strip():
                e = event_from_obj(json.loads(line))
                chunk.setdefault(e.user_id, []).append(e)
    # every user appears in all three maps, possibly with empty lists
    for user in split.train:
        split.valid.setdefault(user, [])
        split.test.setdefault(user, [])
    return split
