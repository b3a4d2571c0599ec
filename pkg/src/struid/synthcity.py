"""Synthetic check-in city generator.

Bundled fixture so tests and demos run without external data: a handful of
geographically separated region blocks, each packed with POIs tight enough
to produce within-block adjacency, plus users who mostly loop a personal
route inside a home block. Regularity knobs control how predictable the
trajectories are.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import CheckInEvent

# ~0.0009 degrees of latitude per 0.1 km
DEG_PER_KM = 1.0 / 111.19


@dataclass
class SynthCityConfig:
    n_users: int = 20
    n_regions: int = 2
    pois_per_region: int = 30
    n_categories: int = 6
    visits_per_user: int = 60
    route_len: int = 4            # length of each user's looped route
    regularity: float = 0.9       # probability of following the route
    region_loyalty: float = 0.95  # probability an off-route visit stays home
    zipf_exponent: float = 1.0    # POI popularity skew for off-route visits
    archetypes_per_region: int = 0  # 0: no taste groups; >0: users share POI pools
    pool_size: int = 10           # POIs per taste-group pool
    pool_loyalty: float = 0.9     # probability an off-route visit stays in-pool
    pool_category_bias: float = 0.0  # how strongly a pool's POIs share categories
    block_spacing_km: float = 12.0
    block_radius_km: float = 0.09
    start_ts: int = 1_600_000_000
    seed: int = 0


def generate_city(cfg: SynthCityConfig) -> list[CheckInEvent]:
    """Deterministic event log; one list sorted by (user, time)."""
    rng = np.random.default_rng(cfg.seed)
    grid = int(np.ceil(np.sqrt(cfg.n_regions)))
    centers = [(40.0 + (r // grid) * cfg.block_spacing_km * DEG_PER_KM,
                9.0 + (r % grid) * cfg.block_spacing_km * DEG_PER_KM)
               for r in range(cfg.n_regions)]

    poi_ids, poi_lat, poi_lon, poi_cat, poi_block = [], [], [], [], []
    for r, (clat, clon) in enumerate(centers):
        for i in range(cfg.pois_per_region):
            poi_ids.append(f"p{r}_{i}")
            poi_lat.append(clat + rng.uniform(-1, 1) * cfg.block_radius_km * DEG_PER_KM)
            poi_lon.append(clon + rng.uniform(-1, 1) * cfg.block_radius_km * DEG_PER_KM)
            poi_cat.append(f"cat{int(rng.integers(cfg.n_categories))}")
            poi_block.append(r)
    n_pois = len(poi_ids)
    by_block = {r: [i for i in range(n_pois) if poi_block[i] == r] for r in range(cfg.n_regions)}
    # heavy-tailed per-block popularity, as in real check-in logs
    popularity = {}
    for r, members in by_block.items():
        ranks = rng.permutation(len(members)) + 1.0
        weights = ranks ** -cfg.zipf_exponent
        popularity[r] = weights / weights.sum()

    # optional taste groups: users of an archetype share a preferred POI pool;
    # pools partition the block so communities stay distinct
    pools: dict[int, list[np.ndarray]] = {}
    if cfg.archetypes_per_region > 0:
        for r, members in by_block.items():
            size = min(cfg.pool_size, max(1, len(members) // cfg.archetypes_per_region))
            shuffled = rng.permutation(members)
            pools[r] = [shuffled[a * size:(a + 1) * size]
                        for a in range(cfg.archetypes_per_region)]
        if cfg.pool_category_bias > 0:
            # pool-typed categories: each community frequents a couple of them
            for r in pools:
                for pool in pools[r]:
                    preferred = rng.choice(cfg.n_categories, size=min(2, cfg.n_categories),
                                           replace=False)
                    for poi in pool:
                        if rng.random() < cfg.pool_category_bias:
                            poi_cat[poi] = f"cat{int(preferred[int(rng.integers(len(preferred)))])}"

    events: list[CheckInEvent] = []
    for u in range(cfg.n_users):
        home = u % cfg.n_regions
        if pools:
            pool = pools[home][(u // cfg.n_regions) % cfg.archetypes_per_region]
            route = list(rng.choice(pool, size=min(cfg.route_len, len(pool)), replace=False))
        else:
            pool = None
            route = list(rng.choice(by_block[home], size=min(cfg.route_len, len(by_block[home])),
                                    replace=False, p=popularity[home]))
        ts = cfg.start_ts + u * 97
        pos = 0
        for _ in range(cfg.visits_per_user):
            if rng.random() < cfg.regularity:
                poi = route[pos % len(route)]
                pos += 1
            elif pool is not None and rng.random() < cfg.pool_loyalty:
                poi = int(pool[int(rng.integers(len(pool)))])
            else:
                block = home if rng.random() < cfg.region_loyalty else int(rng.integers(cfg.n_regions))
                poi = int(rng.choice(by_block[block], p=popularity[block]))
            events.append(CheckInEvent(
                user_id=f"u{u}",
                poi_id=poi_ids[poi],
                lat=float(poi_lat[poi]),
                lon=float(poi_lon[poi]),
                category_id=poi_cat[poi],
                timestamp=int(ts),
            ))
            ts += int(rng.integers(1, 7)) * 3600
    return events
