"""Heterogeneous check-in knowledge graph over users, POIs, categories, regions.

Four relations carry the heterogeneous signals: visit (user->poi,
collaborative), adjacent (poi<->poi within a distance threshold,
geographical), categorized (poi->category), located (poi->region).
Visit edges come from the training split only, so identifiers minted from
this graph never see validation or test interactions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import DatasetSplit

EARTH_RADIUS_KM = 6371.0

ENTITY_TYPES = ("user", "poi", "category", "region")
RELATIONS = ("visit", "adjacent", "categorized", "located")
RELATION_DOMAINS = {
    "visit": ("user", "poi"),
    "adjacent": ("poi", "poi"),
    "categorized": ("poi", "category"),
    "located": ("poi", "region"),
}

GRAPH_FORMAT = "struid-kg-v1"


@dataclass(frozen=True)
class EntityRef:
    entity_type: str
    local_index: int


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between (lat, lon) pairs in degrees."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


@dataclass
class KnowledgeGraph:
    """Typed entity registry plus typed triple store.

    `entities` maps each type to its raw-id list; local indices are
    positions in that list. Triples are stored per relation as (head, tail)
    local-index pairs; the symmetric adjacent relation keeps one canonical
    (min, max) pair per edge and is expanded to both orientations on lookup.
    """

    entities: dict[str, list[str]]
    triples: dict[str, np.ndarray]
    d_km: float = 0.0
    _index: dict[str, dict[str, int]] = field(default_factory=dict, repr=False)
    _slots: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {t: {raw: i for i, raw in enumerate(ids)} for t, ids in self.entities.items()}

    def count(self, entity_type: str) -> int:
        return len(self.entities[entity_type])

    def num_nodes(self) -> int:
        return sum(len(v) for v in self.entities.values())

    def type_offset(self, entity_type: str) -> int:
        off = 0
        for t in ENTITY_TYPES:
            if t == entity_type:
                return off
            off += len(self.entities[t])
        raise DataError(f"unknown entity type: {entity_type!r}")

    def global_index(self, entity_type: str, local_index: int) -> int:
        return self.type_offset(entity_type) + local_index

    def local_of(self, entity_type: str, raw_id: str) -> int:
        return self._index[entity_type][raw_id]

    def triple_counts(self) -> dict[str, int]:
        return {rel: int(len(self.triples[rel])) for rel in RELATIONS}

    def iter_triples(self):
        for rel in RELATIONS:
            ht, tt = RELATION_DOMAINS[rel]
            for h, t in self.triples[rel]:
                yield EntityRef(ht, int(h)), rel, EntityRef(tt, int(t))

    def has_triple(self, rel: str, head_local: int, tail_local: int) -> bool:
        pairs = self.triples[rel]
        if rel == "adjacent":
            head_local, tail_local = min(head_local, tail_local), max(head_local, tail_local)
        return bool(np.any((pairs[:, 0] == head_local) & (pairs[:, 1] == tail_local))) if len(pairs) else False

    def validate(self) -> None:
        """Full-scan check of the per-relation typing constraints."""
        for rel in RELATIONS:
            ht, tt = RELATION_DOMAINS[rel]
            pairs = self.triples[rel]
            if len(pairs) == 0:
                continue
            if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= self.count(ht):
                raise DataError(f"{rel} head index out of range for type {ht}")
            if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= self.count(tt):
                raise DataError(f"{rel} tail index out of range for type {tt}")
            if len(np.unique(pairs, axis=0)) != len(pairs):
                raise DataError(f"duplicate {rel} triples")
            if rel == "adjacent" and np.any(pairs[:, 0] == pairs[:, 1]):
                raise DataError("self-adjacency triple")
        for rel in ("categorized", "located"):
            heads = self.triples[rel][:, 0] if len(self.triples[rel]) else np.array([], dtype=np.int64)
            counts = np.bincount(heads, minlength=self.count("poi"))
            if not np.all(counts == 1):
                raise DataError(f"every POI needs exactly one {rel} triple")

    def neighbor_slots(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """CSR neighbor lists over global node ids, one per directed slot.

        Slot order is [visit-fwd, visit-inv, adjacent-fwd, adjacent-inv, ...].
        The symmetric adjacent relation yields its full undirected neighbor
        set in both of its slots, which keeps message passing independent of
        how each edge happens to be oriented in storage.
        """
        if self._slots is not None:
            return self._slots
        n = self.num_nodes()
        slots = []
        for rel in RELATIONS:
            ht, tt = RELATION_DOMAINS[rel]
            pairs = self.triples[rel]
            heads = pairs[:, 0] + self.type_offset(ht) if len(pairs) else np.array([], dtype=np.int64)
            tails = pairs[:, 1] + self.type_offset(tt) if len(pairs) else np.array([], dtype=np.int64)
            if rel == "adjacent":
                dst = np.concatenate([heads, tails])
                src = np.concatenate([tails, heads])
                slots.append(_csr(dst, src, n))
                slots.append(_csr(dst, src, n))
            else:
                slots.append(_csr(heads, tails, n))  # forward: tails feed heads
                slots.append(_csr(tails, heads, n))  # inverse: heads feed tails
        self._slots = slots
        return slots

    def to_json(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "d_km": self.d_km,
            "entities": {t: list(self.entities[t]) for t in ENTITY_TYPES},
            "triples": {rel: self.triples[rel].tolist() for rel in RELATIONS},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KnowledgeGraph":
        if obj.get("format") != GRAPH_FORMAT:
            raise DataError("not a serialized knowledge graph")
        triples = {rel: np.asarray(obj["triples"][rel], dtype=np.int64).reshape(-1, 2) for rel in RELATIONS}
        return cls(entities={t: list(obj["entities"][t]) for t in ENTITY_TYPES}, triples=triples,
                   d_km=float(obj.get("d_km", 0.0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


def _csr(dst: np.ndarray, src: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor lists as (indptr, indices): src nodes grouped by dst node."""
    order = np.lexsort((src, dst))
    dst, src = dst[order], src[order]
    counts = np.bincount(dst, minlength=n)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return indptr, src.astype(np.int64)


def adjacent_pairs(coords: np.ndarray, d_km: float) -> np.ndarray:
    """All index pairs (i < j) with haversine distance strictly below d_km.

    Candidate pairs come from a uniform spatial hash with cells at least
    d_km wide, so only same-or-neighboring cells need the exact distance
    test; the result equals the brute-force pairwise scan.
    """
    n = len(coords)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    lat_cell = d_km / 110.0  # km per degree latitude, slightly underestimated
    min_cos = max(np.min(np.cos(np.radians(coords[:, 0]))), 1e-6)
    lon_cell = d_km / (111.320 * min_cos)

    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (lat, lon) in enumerate(coords):
        key = (int(math.floor(lat / lat_cell)), int(math.floor(lon / lon_cell)))
        buckets.setdefault(key, []).append(i)

    pairs = []
    for (r, c), members in buckets.items():
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                other = buckets.get((r + dr, c + dc))
                if other is None:
                    continue
                for i in members:
                    for j in other:
                        if i < j and haversine_km(coords[i], coords[j]) < d_km:
                            pairs.append((i, j))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    out = np.unique(np.asarray(sorted(pairs), dtype=np.int64), axis=0)
    return out


def build_kg(split: DatasetSplit, poi_meta: dict[str, tuple[float, float, str]],
             region_map: dict[str, int], d_km: float = 0.2) -> KnowledgeGraph:
    """Assemble the KG from the training split and POI metadata.

    A visit triple exists iff the user visited the POI at least once in
    train. Two distinct POIs are adjacent iff their distance is strictly
    below d_km. Every POI gets exactly one categorized and one located
    triple.
    """
    if d_km <= 0:
        raise DataError(f"d_km must be positive, got {d_km}")
    users = sorted(split.train)
    pois = sorted(poi_meta)
    for poi in pois:
        if poi not in region_map:
            raise DataError(f"POI {poi!r} has no region assignment")
    categories = sorted({meta[2] for meta in poi_meta.values()})
    regions = [str(r) for r in sorted(set(region_map.values()))]

    entities = {"user": users, "poi": pois, "category": categories, "region": regions}
    uidx = {u: i for i, u in enumerate(users)}
    pidx = {p: i for i, p in enumerate(pois)}
    cidx = {c: i for i, c in enumerate(categories)}
    ridx = {r: i for i, r in enumerate(regions)}

    visit = sorted({(uidx[e.user_id], pidx[e.poi_id])
                    for user_events in split.train.values() for e in user_events})
    coords = np.asarray([poi_meta[p][:2] for p in pois], dtype=np.float64)
    adjacent = adjacent_pairs(coords, d_km)
    categorized = [(pidx[p], cidx[poi_meta[p][2]]) for p in pois]
    located = [(pidx[p], ridx[str(region_map[p])]) for p in pois]

    graph = KnowledgeGraph(
        entities=entities,
        triples={
            "visit": np.asarray(visit, dtype=np.int64).reshape(-1, 2),
            "adjacent": adjacent,
            "categorized": np.asarray(categorized, dtype=np.int64).reshape(-1, 2),
            "located": np.asarray(located, dtype=np.int64).reshape(-1, 2),
        },
        d_km=d_km,
    )
    graph.validate()
    return graph
