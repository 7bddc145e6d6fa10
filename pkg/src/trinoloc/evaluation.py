"""Retrieval metrics, runtime statistics, motion IoU and adaptive-weight sweeps."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field

import numpy as np

from trinoloc.errors import ValidationError
from trinoloc.geo import GeoTag, haversine_distance

DEFAULT_THRESHOLD = 10.0
MAP_THRESHOLDS = (10.0, 15.0, 20.0)
RECALL_NS = (5, 10, 20)
SLOW_SCENE_IOU = 0.7
MOTION_WINDOW = 10


@dataclass
class EvalRecord:
    """Ranked retrieval tags for one query (best first) and its ground truth."""

    query_id: str
    ranked: list[GeoTag]
    truth: GeoTag
    elapsed_ms: float = 0.0

    def hits(self, threshold: float) -> np.ndarray:
        return np.array([haversine_distance(t, self.truth) <= threshold for t in self.ranked], dtype=bool)


@dataclass
class EvalReport:
    recall_at: dict
    map_at: dict
    accuracy: float  # top-1 within DEFAULT_THRESHOLD, percent
    runtime_mean_ms: float
    runtime_p95_ms: float
    num_queries: int

    def summary(self) -> str:
        lines = [f"queries            {self.num_queries}"]
        lines += [f"recall@{n:<11d}{v:6.2f} %" for n, v in self.recall_at.items()]
        lines += [f"mAP@{t:g}m{'':<{10 - len(f'{t:g}')}}{v:6.2f} %" for t, v in self.map_at.items()]
        lines.append(f"top-1 accuracy     {self.accuracy:6.2f} %")
        lines.append(f"runtime mean       {self.runtime_mean_ms:.3f} ms/frame")
        lines.append(f"runtime p95        {self.runtime_p95_ms:.3f} ms/frame")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for n, v in self.recall_at.items():
            w.writerow([f"recall@{n}", f"{v:.6f}"])
        for t, v in self.map_at.items():
            w.writerow([f"map@{t:g}", f"{v:.6f}"])
        w.writerow(["accuracy", f"{self.accuracy:.6f}"])
        w.writerow(["runtime_mean_ms", f"{self.runtime_mean_ms:.6f}"])
        w.writerow(["runtime_p95_ms", f"{self.runtime_p95_ms:.6f}"])
        w.writerow(["num_queries", self.num_queries])
        return buf.getvalue()


def _check(records):
    records = list(records)
    if not records:
        raise ValidationError("no evaluation records", field="records")
    return records


def recall_at_n(records, n: int, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Percent of queries with at least one of the top ``n`` tags within ``threshold`` meters."""
    records = _check(records)
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}", field="n")
    hit = sum(bool(r.hits(threshold)[:n].any()) for r in records)
    return 100.0 * hit / len(records)


def average_precision(hits) -> float:
    """Mean of precision@k over the ranks k holding a true positive (0 if none)."""
    hits = np.asarray(hits, dtype=bool)
    if not hits.any():
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    precision = np.cumsum(hits)[hits] / ranks
    return float(precision.mean())


def mean_average_precision(records, thresholds=MAP_THRESHOLDS) -> dict:
    """mAP in percent for each distance threshold."""
    records = _check(records)
    if any(not r.ranked for r in records):
        raise ValidationError("every record needs a non-empty ranked list", field="ranked")
    return {
        float(t): 100.0 * float(np.mean([average_precision(r.hits(t)) for r in records])) for t in thresholds
    }


def top1_accuracy(records, threshold: float = DEFAULT_THRESHOLD) -> float:
    return recall_at_n(records, 1, threshold)


def measure_runtime(records) -> tuple[float, float]:
    """Mean and 95th percentile of per-frame elapsed milliseconds."""
    records = _check(records)
    a = np.array([r.elapsed_ms for r in records], dtype=float)
    return float(a.mean()), float(np.percentile(a, 95))


def evaluate(records, ns=RECALL_NS, thresholds=MAP_THRESHOLDS, threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    records = _check(records)
    mean, p95 = measure_runtime(records)
    return EvalReport(
        recall_at={n: recall_at_n(records, n, threshold) for n in ns},
        map_at=mean_average_precision(records, thresholds),
        accuracy=top1_accuracy(records, threshold),
        runtime_mean_ms=mean,
        runtime_p95_ms=p95,
        num_queries=len(records),
    )


# --- motion IoU -----------------------------------------------------------------


class SceneLabel(str, enum.Enum):
    FAST = "fast"
    SLOW = "slow"


@dataclass(frozen=True)
class SceneClass:
    label: SceneLabel
    motion_iou: float


def activation_grid(points) -> np.ndarray:
    """Binarize a feature map: a cell is active iff its energy exceeds the map's median.

    Energy is the squared descriptor norm; for the default grid extractor the
    orientation bins dominate it, so it tracks gradient energy.
    """
    pts = np.asarray(points, dtype=np.float64)
    energy = (pts * pts).sum(axis=-1)
    return energy > np.median(energy)


def motion_iou(frame_grids, window: int = MOTION_WINDOW) -> np.ndarray:
    """Per-frame mean IoU against the frames up to ``window`` steps away.

    The window is clamped at sequence ends; a pair with an empty union scores 1.
    """
    g = np.asarray(frame_grids, dtype=bool)
    if g.ndim < 2 or g.shape[0] < 2:
        raise ValidationError("need at least 2 frames of equal-shaped grids", field="frame_grids")
    g = g.reshape(g.shape[0], -1)
    inter = (g[:, None, :] & g[None, :, :]).sum(axis=-1)
    union = (g[:, None, :] | g[None, :, :]).sum(axis=-1)
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    t = g.shape[0]
    scores = np.empty(t)
    for i in range(t):
        lo, hi = max(0, i - window), min(t, i + window + 1)
        nb = [u for u in range(lo, hi) if u != i]
        scores[i] = iou[i, nb].mean()
    return scores


def classify_scene(score: float) -> SceneClass:
    if not 0.0 <= score <= 1.0:
        raise ValidationError(f"motion IoU {score} outside [0, 1]", field="score")
    label = SceneLabel.SLOW if score >= SLOW_SCENE_IOU else SceneLabel.FAST
    return SceneClass(label, float(score))


# --- adaptive weight sweep ---------------------------------------------------------


@dataclass
class SweepRow:
    alpha: float
    accuracy: float
    recall_at: dict = field(default_factory=dict)
    map_at: dict = field(default_factory=dict)


def records_from_results(results, lib, ground_truth, top_n: int = max(RECALL_NS)) -> list[EvalRecord]:
    out = []
    for i, (res, gt) in enumerate(zip(results, ground_truth)):
        ranked = [lib.geotags[c.reference_id] for c in res.candidates[:top_n]]
        out.append(EvalRecord(str(i), ranked, gt, res.elapsed))
    return out


def alpha_sweep(
    dataset,
    lib,
    alphas,
    threshold: float = DEFAULT_THRESHOLD,
    shortlist_n: int | None = None,
    checks: int | None = 32,
) -> list[SweepRow]:
    """Score the query sequence under each alpha.

    ``dataset`` needs ``queries`` (frames) and ``ground_truth`` (one tag per
    frame). ``shortlist_n=None`` scores every reference (exhaustive voting).
    The shortlist and per-view costs do not depend on alpha, so each frame is
    scored once and re-fused per alpha; rankings equal separate runs of
    ``localize_frame``.
    """
    from trinoloc.retrieval import rank_candidates, score_candidates

    alphas = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValidationError("alphas must lie in [0, 1]", field="alphas")
    n = len(lib) if shortlist_n is None else shortlist_n
    top_n = max(RECALL_NS)
    scored = [score_candidates(f, lib, n, checks) for f in dataset.queries]
    rows = []
    for a in alphas:
        recs = []
        for i, ((cand, costs), gt) in enumerate(zip(scored, dataset.ground_truth)):
            ranked = rank_candidates(cand, costs, a)[:top_n]
            recs.append(EvalRecord(str(i), [lib.geotags[c.reference_id] for c in ranked], gt))
        rows.append(
            SweepRow(
                alpha=a,
                accuracy=top1_accuracy(recs, threshold),
                recall_at={k: recall_at_n(recs, k, threshold) for k in RECALL_NS},
                map_at=mean_average_precision(recs),
            )
        )
    return rows


def sweep_accuracy(rows) -> dict:
    return {r.alpha: r.accuracy for r in rows}


def sweep_optimum(rows) -> float:
    """Alpha with the best accuracy; a plateau of equal maxima reports its midpoint."""
    best = max(r.accuracy for r in rows)
    at_best = [r.alpha for r in rows if r.accuracy == best]
    return float(np.median(at_best))


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["alpha", "accuracy"] + [f"recall@{n}" for n in RECALL_NS] + [f"map@{t:g}" for t in MAP_THRESHOLDS]
    )
    for r in rows:
        w.writerow(
            [f"{r.alpha:g}", f"{r.accuracy:.4f}"]
            + [f"{r.recall_at[n]:.4f}" for n in RECALL_NS]
            + [f"{r.map_at[t]:.4f}" for t in MAP_THRESHOLDS]
        )
    return buf.getvalue()
