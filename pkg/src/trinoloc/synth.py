"""Seeded synthetic street worlds for end-to-end checks.

A world is a drive along a piecewise-linear route with one location every
``spacing`` meters. Descriptors are generated directly, without images:

* front maps cycle through ``front_alias_period`` prototypes (plus a little
  per-location jitter), so locations ``p`` steps apart look alike from the
  front;
* left and right maps follow a stationary random walk; ``side_change_rate``
  sets how far they move between consecutive locations;
* queries are the reference maps plus Gaussian noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from trinoloc.descriptor import VIEWS, LocalFeatureMap, View, write_descriptor_file
from trinoloc.errors import ValidationError
from trinoloc.evaluation import activation_grid
from trinoloc.geo import GeoTag, destination
from trinoloc.ingestion import LocationRecord, ManifestRow, write_manifest
from trinoloc.retrieval import QueryFrame

CHICAGO = (41.8781, -87.6298)


@dataclass(frozen=True)
class SynthWorldConfig:
    num_locations: int = 100
    spacing: float = 12.0
    front_alias_period: int = 4
    side_change_rate: float = 0.5
    noise_sigma: float = 0.0
    seed: int = 0
    front_jitter: float = 0.01
    pair_noise: float = 0.05
    points: int = 16
    dim: int = 10
    segment_length: int = 25
    speed: float = 10.0  # m/s, sets query timestamps
    shadow_fraction: float = 0.1
    origin: tuple[float, float] = CHICAGO

    def __post_init__(self):
        if self.num_locations < 1:
            raise ValidationError("num_locations must be >= 1", field="num_locations")
        if self.front_alias_period < 1:
            raise ValidationError("front_alias_period must be >= 1", field="front_alias_period")
        if not self.spacing > 0:
            raise ValidationError("spacing must be positive", field="spacing")
        if min(self.side_change_rate, self.noise_sigma, self.front_jitter) < 0:
            raise ValidationError("rates and noise levels must be nonnegative")
        if self.points < 1 or self.dim < 1:
            raise ValidationError("points and dim must be >= 1")


@dataclass(eq=False)
class SynthDataset:
    config: SynthWorldConfig
    records: list[LocationRecord]
    queries: list[QueryFrame]
    ground_truth: list[GeoTag]
    shadowed: np.ndarray = field(repr=False)
    label: str = ""

    def __len__(self):
        return len(self.records)

    def write(self, out_dir) -> dict:
        """Write descriptor files plus reference and query manifests.

        Returns:
            Paths of the written manifests, keyed ``references`` and ``queries``.
        """
        out = Path(out_dir)
        (out / "desc").mkdir(parents=True, exist_ok=True)
        ref_rows, query_rows = [], []
        for rec, q, gt in zip(self.records, self.queries, self.ground_truth):
            lid = rec.location_id
            paths, pert, qpaths = {}, {}, {}
            for v in VIEWS:
                paths[v] = f"desc/{lid}_{v.value}.tloc"
                write_descriptor_file(out / paths[v], rec.views[v].points)
                pert[v] = f"desc/{lid}_{v.value}_pert.tloc"
                write_descriptor_file(out / pert[v], rec.perturbed[v].points)
                qpaths[v] = f"desc/{lid}_{v.value}_query.tloc"
                write_descriptor_file(out / qpaths[v], q.views[v].points)
            ref_rows.append(ManifestRow(lid, rec.geotag, paths, pert))
            query_rows.append(ManifestRow(lid, gt, qpaths))
        write_manifest(out / "references.tsv", ref_rows)
        write_manifest(out / "queries.tsv", query_rows)
        meta = asdict(self.config)
        meta["label"] = self.label
        meta["shadowed"] = [int(i) for i in np.flatnonzero(self.shadowed)]
        (out / "world.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return {"references": out / "references.tsv", "queries": out / "queries.tsv"}


def _trajectory(cfg: SynthWorldConfig, rng: np.random.Generator) -> list[GeoTag]:
    bearing = float(rng.uniform(0.0, 360.0))
    tags = [GeoTag(cfg.origin[0], cfg.origin[1], bearing)]
    for t in range(1, cfg.num_locations):
        if t % cfg.segment_length == 0:
            bearing = (bearing + float(rng.choice([-90.0, 90.0])) + float(rng.uniform(-15.0, 15.0))) % 360.0
        nxt = destination(tags[-1], bearing, cfg.spacing)
        tags.append(GeoTag(nxt.lat, nxt.lon, bearing))
    return tags


def _side_walk(n: int, c: int, d: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, c, d))
    out[0] = rng.standard_normal((c, d))
    scale = 1.0 / math.sqrt(1.0 + rate * rate)
    for t in range(1, n):
        out[t] = (out[t - 1] + rate * rng.standard_normal((c, d))) * scale
    return out


def generate_world(config: SynthWorldConfig, label: str = "") -> SynthDataset:
    cfg = config
    world_ss, query_ss, pair_ss, shadow_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    rng = np.random.default_rng(world_ss)
    n, c, d = cfg.num_locations, cfg.points, cfg.dim

    tags = _trajectory(cfg, rng)
    period = min(cfg.front_alias_period, n)
    protos = rng.standard_normal((period, c, d))
    front = protos[np.arange(n) % period] + cfg.front_jitter * rng.standard_normal((n, c, d))
    left = _side_walk(n, c, d, cfg.side_change_rate, rng)
    right = _side_walk(n, c, d, cfg.side_change_rate, rng)
    maps = {View.FRONT: front, View.LEFT: left, View.RIGHT: right}
    # round through float32 so in-memory worlds match what descriptor files hold
    maps = {v: m.astype(np.float32) for v, m in maps.items()}

    qrng = np.random.default_rng(query_ss)
    qmaps = {v: (maps[v] + cfg.noise_sigma * qrng.standard_normal((n, c, d))).astype(np.float32) for v in VIEWS}
    prng = np.random.default_rng(pair_ss)
    pmaps = {v: (maps[v] + cfg.pair_noise * prng.standard_normal((n, c, d))).astype(np.float32) for v in VIEWS}

    grid = LocalFeatureMap.from_points(np.zeros((c, 1))).grid_shape
    records, queries = [], []
    width = len(str(n - 1))
    for t in range(n):
        lid = f"loc{t:0{width}d}"
        views = {v: LocalFeatureMap(maps[v][t], grid, v) for v in VIEWS}
        pert = {v: LocalFeatureMap(pmaps[v][t], grid, v) for v in VIEWS}
        records.append(LocationRecord(lid, tags[t], views, pert, t))
        qviews = {v: LocalFeatureMap(qmaps[v][t], grid, v) for v in VIEWS}
        queries.append(QueryFrame(qviews, timestamp=t * cfg.spacing / cfg.speed))

    shadowed = np.zeros(n, dtype=bool)
    stretch = int(round(cfg.shadow_fraction * n))
    if stretch:
        start = int(np.random.default_rng(shadow_ss).integers(0, n - stretch + 1))
        shadowed[start : start + stretch] = True
    return SynthDataset(cfg, records, queries, list(tags), shadowed, label)


# Frozen scene presets. Fast scenes: tall buildings, so side views change
# quickly while the front view repeats every other location. Slow scenes:
# open space, slowly drifting sides and a front view that never repeats.
FAST_SCENE = dict(front_alias_period=2, side_change_rate=0.5)
SLOW_SCENE = dict(side_change_rate=0.05)

# Frozen evaluation fixtures. The noise levels were calibrated by brute-force
# sweeps: the aliased world keeps sides-only retrieval just short of perfect so
# the best weight is strictly interior; the fast/slow pair sits in the
# low-noise regime where each scene fails only at its weak end of the sweep.
ALIASED_FIXTURE = SynthWorldConfig(num_locations=100, front_alias_period=4, side_change_rate=0.5, noise_sigma=2.0)
FAST_SLOW_FIXTURE = SynthWorldConfig(num_locations=300, noise_sigma=1.0)


def generate_fast_slow(config: SynthWorldConfig = FAST_SLOW_FIXTURE) -> tuple[SynthDataset, SynthDataset]:
    fast = generate_world(replace(config, **FAST_SCENE), label="fast")
    slow = generate_world(replace(config, front_alias_period=config.num_locations, **SLOW_SCENE), label="slow")
    return fast, slow


def motion_grids(dataset: SynthDataset, use_queries: bool = False) -> np.ndarray:
    """Per-frame binarized activation grids of the side views, shape (T, 2*C).

    A cell is active when its descriptor energy exceeds the frame's median.
    By default the grids come from the stored route views, so the score
    describes the street itself rather than the query noise.
    """
    frames = dataset.queries if use_queries else dataset.records
    grids = []
    for f in frames:
        grids.append(
            np.concatenate([activation_grid(f.views[View.LEFT].points), activation_grid(f.views[View.RIGHT].points)])
        )
    return np.stack(grids)
