"""Three-view frame localization against a location library."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from trinoloc.descriptor import VIEWS, LocalFeatureMap, View, extract_grid_descriptors
from trinoloc.errors import FrameError, NoReferenceError, ValidationError
from trinoloc.geo import GeoTag
from trinoloc.kmeans_tree import knn_search
from trinoloc.library import LocationLibrary
from trinoloc.voting import DEFAULT_ALPHA, as_weight, fuse, voting_costs_batch

DEFAULT_SHORTLIST = 20
DEFAULT_CHECKS = 32


@dataclass(eq=False)
class QueryFrame:
    views: dict
    timestamp: float = 0.0

    def __post_init__(self):
        missing = [v.value for v in VIEWS if v not in self.views]
        if missing:
            raise ValidationError(f"query frame is missing view(s) {', '.join(missing)}", field="views")

    @classmethod
    def from_points(cls, front, left, right, timestamp: float = 0.0, grid_shape=None) -> QueryFrame:
        maps = {}
        for v, pts in zip(VIEWS, (front, left, right)):
            pts = np.asarray(pts)
            maps[v] = (
                LocalFeatureMap(pts, grid_shape, v) if grid_shape else LocalFeatureMap.from_points(pts, v)
            )
        return cls(maps, timestamp)

    @classmethod
    def from_images(cls, front, left, right, cell: int = 16, timestamp: float = 0.0) -> QueryFrame:
        maps = {v: extract_grid_descriptors(img, cell, v) for v, img in zip(VIEWS, (front, left, right))}
        return cls(maps, timestamp)


@dataclass
class Candidate:
    reference_id: int
    total_cost: float
    per_view_costs: tuple[float, float, float]


@dataclass
class RetrievalResult:
    reference_id: int
    predicted: GeoTag
    total_cost: float
    per_view_costs: tuple[float, float, float]
    alpha: float
    shortlist_size: int
    elapsed: float  # milliseconds
    candidates: list[Candidate] = field(default_factory=list, repr=False)

    def ranked_ids(self, n: int | None = None) -> list[int]:
        ids = [c.reference_id for c in self.candidates]
        return ids if n is None else ids[:n]


@dataclass
class SequenceResult:
    results: list[RetrievalResult]
    mean_ms: float
    p95_ms: float

    def __len__(self):
        return len(self.results)

    def __iter__(self):
        return iter(self.results)

    def __getitem__(self, i):
        return self.results[i]


def _frame_points(frame: QueryFrame, lib: LocationLibrary) -> dict:
    m = lib.metadata
    expected = (m.num_points, m.local_dim)
    pts = {}
    for v in VIEWS:
        data = frame.views[v]
        if not isinstance(data, LocalFeatureMap):
            data = extract_grid_descriptors(np.asarray(data), m.cell, v)
        if data.points.shape != expected:
            raise ValidationError(
                f"{v.value} view has shape {data.points.shape}, library expects {expected}", field="views"
            )
        # compare at the library's storage precision
        pts[v] = data.points.astype(lib.features[v].dtype, copy=False)
    return pts


def shortlist(frame: QueryFrame, lib: LocationLibrary, shortlist_n: int, checks: int | None = DEFAULT_CHECKS) -> np.ndarray:
    """Union of the per-view k-NN shortlists, as sorted entry ids."""
    if len(lib) == 0:
        raise NoReferenceError("location library is empty")
    return _shortlist(_frame_points(frame, lib), lib, shortlist_n, checks)


def _shortlist(pts: dict, lib: LocationLibrary, shortlist_n: int, checks: int | None) -> np.ndarray:
    if shortlist_n >= len(lib):
        return np.arange(len(lib))
    pooled = lib.pool(np.stack([pts[v] for v in VIEWS]))
    ids = set()
    for v, q in zip(VIEWS, pooled):
        ids.update(knn_search(lib.trees[v], q, shortlist_n, checks))
    return np.array(sorted(ids), dtype=np.int64)


def score_candidates(
    frame: QueryFrame,
    lib: LocationLibrary,
    shortlist_n: int = DEFAULT_SHORTLIST,
    checks: int | None = DEFAULT_CHECKS,
) -> tuple[np.ndarray, np.ndarray]:
    """Shortlisted entry ids (sorted) and their per-view voting costs, shape (3, K).

    Nothing here depends on alpha, so one scoring pass can be fused under
    any number of weights.
    """
    if shortlist_n < 1:
        raise ValidationError(f"shortlist_n must be >= 1, got {shortlist_n}", field="shortlist_n")
    if len(lib) == 0:
        raise NoReferenceError("location library is empty")
    pts = _frame_points(frame, lib)
    cand = _shortlist(pts, lib, shortlist_n, checks)
    costs = np.stack([voting_costs_batch(pts[v], lib.features[v][cand]) for v in VIEWS])
    return cand, costs


def rank_candidates(cand: np.ndarray, costs: np.ndarray, alpha) -> list[Candidate]:
    """Fuse per-view costs and order candidates cheapest first, ties by id."""
    total = fuse(costs[0], costs[1], costs[2], as_weight(alpha).alpha)
    # cand is sorted by id, so a stable sort leaves ties ordered by id
    order = np.argsort(total, kind="stable")
    return [
        Candidate(int(cand[j]), float(total[j]), (float(costs[0, j]), float(costs[1, j]), float(costs[2, j])))
        for j in order
    ]


def localize_frame(
    frame: QueryFrame,
    lib: LocationLibrary,
    alpha=DEFAULT_ALPHA,
    shortlist_n: int = DEFAULT_SHORTLIST,
    checks: int | None = DEFAULT_CHECKS,
) -> RetrievalResult:
    """Predict the frame's position as the GPS tag of the cheapest reference.

    Candidates come from the union of the three per-view shortlists (or the
    whole library when ``shortlist_n >= len(lib)``); each is scored with the
    per-view voting costs fused by ``alpha``. Ties go to the smaller id.
    """
    t0 = time.perf_counter()
    w = as_weight(alpha)
    cand, costs = score_candidates(frame, lib, shortlist_n, checks)
    buffer = rank_candidates(cand, costs, w)
    elapsed = (time.perf_counter() - t0) * 1000.0
    return _result(buffer, lib, w.alpha, len(cand), elapsed)


def _result(buffer, lib, alpha, k, elapsed) -> RetrievalResult:
    best = buffer[0]
    return RetrievalResult(
        reference_id=best.reference_id,
        predicted=lib.geotags[best.reference_id],
        total_cost=best.total_cost,
        per_view_costs=best.per_view_costs,
        alpha=alpha,
        shortlist_size=k,
        elapsed=elapsed,
        candidates=buffer,
    )


def timing_stats(elapsed_ms) -> tuple[float, float]:
    a = np.asarray(elapsed_ms, dtype=float)
    if a.size == 0:
        return 0.0, 0.0
    return float(a.mean()), float(np.percentile(a, 95))


def localize_sequence(
    frames,
    lib: LocationLibrary,
    alpha=DEFAULT_ALPHA,
    shortlist_n: int = DEFAULT_SHORTLIST,
    checks: int | None = DEFAULT_CHECKS,
    workers: int = 1,
) -> SequenceResult:
    """Localize every frame independently; output order follows input order.

    Raises:
        ValidationError: timestamps decrease.
        FrameError: a frame failed; ``index`` identifies it.
    """
    frames = list(frames)
    for i in range(1, len(frames)):
        if frames[i].timestamp < frames[i - 1].timestamp:
            raise ValidationError(f"timestamp decreases at frame {i}", field="timestamp")

    def run(i_frame):
        i, frame = i_frame
        try:
            return localize_frame(frame, lib, alpha, shortlist_n, checks)
        except Exception as exc:
            raise FrameError(i, exc) from exc

    if workers > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, enumerate(frames)))
    else:
        results = [run(x) for x in enumerate(frames)]
    mean, p95 = timing_stats([r.elapsed for r in results])
    return SequenceResult(results, mean, p95)
