"""Per-view voting cost and adaptive-weight fusion of the three views."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from trinoloc.descriptor import VIEWS, LocalFeatureMap, View
from trinoloc.errors import ValidationError

DEFAULT_ALPHA = 0.4


@dataclass(frozen=True)
class VotingCost:
    value: float
    view: View
    point_count: int


@dataclass(frozen=True)
class AdaptiveWeight:
    """Share of the front view in the fused cost; sides split the remainder."""

    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        a = float(self.alpha)
        if not (math.isfinite(a) and 0.0 <= a <= 1.0):
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha!r}", field="alpha")
        object.__setattr__(self, "alpha", a)


def as_weight(w) -> AdaptiveWeight:
    return w if isinstance(w, AdaptiveWeight) else AdaptiveWeight(w)


def voting_cost(f_q: LocalFeatureMap, f_r: LocalFeatureMap) -> VotingCost:
    """Sum over grid positions of the Euclidean distance between matching points."""
    if f_q.points.shape != f_r.points.shape:
        raise ValidationError(
            f"feature map shapes differ: query {f_q.points.shape} vs reference {f_r.points.shape}", field="f_r"
        )
    if f_q.source_view != f_r.source_view:
        raise ValidationError(
            f"cannot compare a {f_q.source_view.value} view with a {f_r.source_view.value} view", field="f_r"
        )
    diff = f_q.points.astype(np.float64) - f_r.points.astype(np.float64)
    value = float(np.sqrt((diff * diff).sum(axis=1)).sum())
    return VotingCost(value, f_q.source_view, f_q.num_points)


def voting_costs_batch(query_points, ref_points) -> np.ndarray:
    """Voting cost of one query map, shape (C, D), against K references, shape (K, C, D)."""
    diff = np.asarray(ref_points, dtype=np.float64) - np.asarray(query_points, dtype=np.float64)[None]
    return np.sqrt(np.einsum("kcd,kcd->kc", diff, diff)).sum(axis=1)


def fuse(s_f, s_l, s_r, alpha: float):
    """Fused cost from raw per-view values; works on scalars and arrays."""
    return alpha * s_f + (1.0 - alpha) / 2.0 * (s_l + s_r)


def total_cost(s_f: VotingCost, s_l: VotingCost, s_r: VotingCost, w=DEFAULT_ALPHA) -> float:
    views = (s_f.view, s_l.view, s_r.view)
    if views != VIEWS:
        raise ValidationError(
            "costs must be tagged front, left, right in that order; got " + ", ".join(v.value for v in views),
            field="view",
        )
    for c in (s_f, s_l, s_r):
        if c.value < 0:
            raise ValidationError(f"negative voting cost {c.value} for {c.view.value} view", field="value")
    return float(fuse(s_f.value, s_l.value, s_r.value, as_weight(w).alpha))
