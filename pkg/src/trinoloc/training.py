"""Triplet margin training of a linear descriptor refinement.

The trainable part is a D x D projection applied to raw local descriptors,
followed by L2 normalization. For a correspondence ``c: P <-> P'`` between two
maps of the same place the hinge is::

    m(c) = max(M + p(c)^2 - n(c)^2, 0)

where ``p(c)`` is the distance between the two projected descriptors and
``n(c)`` the distance to the most confounding negative. A pair's loss is the
sum of ``m(c)`` over its correspondences.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from trinoloc.descriptor import VIEWS, LocalFeatureMap
from trinoloc.errors import (
    BadMagicError,
    CorruptFileError,
    DegenerateVectorError,
    TrainingDivergedError,
    ValidationError,
    VersionMismatchError,
)

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 1.0
EXTRA_NEGATIVES = 8

MODEL_MAGIC = b"TMOD"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHI")


@dataclass(frozen=True)
class Correspondence:
    p_index: int
    p_prime_index: int


@dataclass(eq=False)
class TrainingPair:
    """Two maps of one place plus their corresponding point indices.

    ``extra_negatives`` holds raw descriptors borrowed from another pair; they
    join the negative pool of every correspondence.
    """

    map_a: LocalFeatureMap
    map_b: LocalFeatureMap
    correspondences: tuple
    is_positive: bool = True
    extra_negatives: np.ndarray | None = None

    def __post_init__(self):
        self.correspondences = tuple(self.correspondences)
        if self.map_a.dim != self.map_b.dim:
            raise ValidationError(
                f"maps differ in descriptor dimension: {self.map_a.dim} vs {self.map_b.dim}", field="map_b"
            )
        if self.is_positive and not self.correspondences:
            raise ValidationError("a positive pair needs at least one correspondence", field="correspondences")
        ca, cb = self.map_a.num_points, self.map_b.num_points
        for c in self.correspondences:
            if not (0 <= c.p_index < ca and 0 <= c.p_prime_index < cb):
                raise ValidationError(f"correspondence {c} outside maps of {ca} and {cb} points", field="correspondences")
        if self.extra_negatives is not None:
            extra = np.asarray(self.extra_negatives, dtype=np.float64).reshape(-1, self.map_a.dim)
            self.extra_negatives = extra

    @property
    def dim(self) -> int:
        return self.map_a.dim


def grid_correspondences(count: int) -> tuple:
    """Identity correspondences: cell ``i`` of one map matches cell ``i`` of the other."""
    return tuple(Correspondence(i, i) for i in range(count))


@dataclass(eq=False)
class DescriptorModel:
    projection: np.ndarray
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        w = np.array(self.projection, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise ValidationError(f"projection must be a square matrix, got shape {w.shape}", field="projection")
        if not np.all(np.isfinite(w)):
            raise ValidationError("projection contains non-finite values", field="projection")
        if not self.margin > 0:
            raise ValidationError(f"margin must be positive, got {self.margin}", field="margin")
        self.projection = w
        self.margin = float(self.margin)

    @classmethod
    def initial(cls, dim: int, seed: int = 0, scale: float = 1e-2, margin: float = DEFAULT_MARGIN) -> DescriptorModel:
        """Identity plus seeded Gaussian noise of std ``scale``."""
        rng = np.random.default_rng(seed)
        return cls(np.eye(dim) + scale * rng.standard_normal((dim, dim)), margin)

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def project(self, points) -> np.ndarray:
        """Project raw descriptors (rows) and L2-normalize each one."""
        u = np.atleast_2d(np.asarray(points, dtype=np.float64)) @ self.projection.T
        norms = np.linalg.norm(u, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateVectorError("projected descriptor has zero norm")
        return u / norms[:, None]


def _point_pair(pair: TrainingPair, c: Correspondence) -> np.ndarray:
    return np.stack([pair.map_a.points[c.p_index], pair.map_b.points[c.p_prime_index]])


def positive_distance(model: DescriptorModel, pair: TrainingPair, c: Correspondence) -> float:
    a, b = model.project(_point_pair(pair, c))
    return float(np.linalg.norm(a - b))


def default_negatives(pair: TrainingPair, c: Correspondence) -> np.ndarray:
    """Raw negative pool for ``c``: the other points of both maps, then the borrowed extras."""
    a = np.delete(pair.map_a.points, c.p_index, axis=0)
    b = np.delete(pair.map_b.points, c.p_prime_index, axis=0)
    parts = [a, b]
    if pair.extra_negatives is not None:
        parts.append(pair.extra_negatives)
    return np.concatenate(parts).astype(np.float64)


def negative_distance(model: DescriptorModel, pair: TrainingPair, c: Correspondence, negatives=None) -> float:
    """min over the pool of min(|d_P - d_N|, |d_N - d_P'|), all after projection.

    ``negatives`` is a (K, D) array of raw descriptors; by default the pool of
    :func:`default_negatives` is used.
    """
    pool = default_negatives(pair, c) if negatives is None else np.asarray(negatives, dtype=np.float64)
    pool = pool.reshape(-1, pair.dim) if pool.size else pool
    if pool.size == 0:
        raise ValidationError("negative pool is empty", field="negatives")
    p, q = model.project(_point_pair(pair, c))
    n = model.project(pool)
    d1 = np.linalg.norm(p - n, axis=1)
    d2 = np.linalg.norm(n - q, axis=1)
    return float(min(d1.min(), d2.min()))


def triplet_margin(p: float, n: float, margin: float = DEFAULT_MARGIN) -> float:
    return max(margin + p * p - n * n, 0.0)


# --- loss and analytic gradient ----------------------------------------------------


def _hinges(model: DescriptorModel, pair: TrainingPair):
    """Vectorized hinge terms of a pair.

    Returns the stacked raw points Z, their normalized projections, the
    unprojected norms, the raw hinge values ``M + p^2 - n^2`` and, per
    correspondence, the row indices (i, j) of P, P' and (u, v) of the
    minimizing negative distance.
    """
    parts = [pair.map_a.points, pair.map_b.points]
    if pair.extra_negatives is not None:
        parts.append(pair.extra_negatives)
    z = np.concatenate(parts).astype(np.float64)
    u = z @ model.projection.T
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("projected descriptor has zero norm")
    zh = u / norms[:, None]

    ca = pair.map_a.num_points
    i = np.array([c.p_index for c in pair.correspondences], dtype=np.int64)
    j = np.array([ca + c.p_prime_index for c in pair.correspondences], dtype=np.int64)
    m = z.shape[0]
    if m - 2 < 1:
        raise ValidationError("negative pool is empty", field="negatives")
    diff = zh[:, None, :] - zh[None, :, :]
    sq = (diff * diff).sum(axis=-1)  # (m, m) squared distances

    p2 = sq[i, j]
    t1 = sq[i]  # |d_P - d_N|^2 for every row N
    t2 = sq[:, j].T  # |d_N - d_P'|^2
    cols = np.arange(m)
    excluded = (cols[None, :] == i[:, None]) | (cols[None, :] == j[:, None])
    t1 = np.where(excluded, np.inf, t1)
    t2 = np.where(excluded, np.inf, t2)
    # pool-major order (row 0 term 1, row 0 term 2, row 1 term 1, ...); ties go to the first
    both = np.stack([t1, t2], axis=-1).reshape(len(i), 2 * m)
    flat = np.argmin(both, axis=1)
    k, term = flat // 2, flat % 2
    n2 = both[np.arange(len(i)), flat]
    uu = np.where(term == 0, i, k)
    vv = np.where(term == 0, k, j)
    raw = model.margin + p2 - n2
    return z, zh, norms, raw, i, j, uu, vv


def pair_loss(model: DescriptorModel, pair: TrainingPair) -> float:
    """Sum of hinge terms over the pair's correspondences."""
    if not pair.correspondences:
        return 0.0
    raw = _hinges(model, pair)[3]
    return float(np.maximum(raw, 0.0).sum())


def pair_loss_and_grad(model: DescriptorModel, pair: TrainingPair) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the projection matrix."""
    grad = np.zeros_like(model.projection)
    if not pair.correspondences:
        return 0.0, grad
    z, zh, norms, raw, i, j, uu, vv = _hinges(model, pair)
    if not np.all(np.isfinite(raw)):
        # let the caller see the NaN instead of masking it as an inactive hinge
        return float("nan"), grad
    active = raw > 0.0
    loss = float(raw[active].sum())
    if not active.any():
        return loss, grad
    i, j, uu, vv = i[active], j[active], uu[active], vv[active]
    g = np.zeros_like(zh)
    dp = 2.0 * (zh[i] - zh[j])
    dn = 2.0 * (zh[uu] - zh[vv])
    np.add.at(g, i, dp)
    np.add.at(g, j, -dp)
    np.add.at(g, uu, -dn)
    np.add.at(g, vv, dn)
    # back through x -> x / |x|
    gu = (g - (g * zh).sum(axis=1, keepdims=True) * zh) / norms[:, None]
    return loss, gu.T @ z


def is_smooth(model: DescriptorModel, pair: TrainingPair, tol: float = 1e-4) -> bool:
    """True when no hinge sits near its kink and every minimizing negative is unique."""
    _, zh, _, raw, i, j, _, _ = _hinges(model, pair)
    if np.any(np.abs(raw) <= tol):
        return False
    m = zh.shape[0]
    diff = zh[:, None, :] - zh[None, :, :]
    sq = (diff * diff).sum(axis=-1)
    for a, b in zip(i, j):
        keep = np.ones(m, dtype=bool)
        keep[[a, b]] = False
        vals = np.sort(np.concatenate([sq[a, keep], sq[keep, b]]))
        if len(vals) > 1 and vals[1] - vals[0] <= tol:
            return False
    return True


def numeric_gradient(loss_fn, w: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss_fn(w)`` over every entry of ``w``."""
    w = np.array(w, dtype=np.float64)
    out = np.empty_like(w)
    for idx in np.ndindex(w.shape):
        orig = w[idx]
        w[idx] = orig + epsilon
        up = loss_fn(w)
        w[idx] = orig - epsilon
        down = loss_fn(w)
        w[idx] = orig
        out[idx] = (up - down) / (2.0 * epsilon)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradient_check(model: DescriptorModel, pair: TrainingPair, epsilon: float = 1e-5) -> float:
    """Max relative error between the analytic and finite-difference gradients."""
    _, analytic = pair_loss_and_grad(model, pair)
    fd = numeric_gradient(lambda w: pair_loss(DescriptorModel(w, model.margin), pair), model.projection, epsilon)
    return relative_error(analytic, fd)


# --- optimizer ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    ``decay_mode`` picks how ``decay`` is applied every ``decay_every``
    iterations: ``"lr"`` multiplies the learning rate by ``1 - decay``;
    ``"weight"`` shrinks the projection by the same factor.
    """

    iterations: int = 50
    lr: float = 1e-3
    decay: float = 1e-4
    decay_every: int = 5
    decay_mode: str = "lr"
    margin: float = DEFAULT_MARGIN
    seed: int = 0
    init_scale: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1", field="iterations")
        if not self.lr > 0:
            raise ValidationError("lr must be positive", field="lr")
        if not 0.0 <= self.decay < 1.0:
            raise ValidationError("decay must lie in [0, 1)", field="decay")
        if self.decay_every < 1:
            raise ValidationError("decay_every must be >= 1", field="decay_every")
        if self.decay_mode not in ("lr", "weight"):
            raise ValidationError(f"unknown decay_mode {self.decay_mode!r}", field="decay_mode")
        if not self.margin > 0:
            raise ValidationError("margin must be positive", field="margin")


@dataclass
class TrainStep:
    iteration: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: DescriptorModel
    history: list[TrainStep] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [s.loss for s in self.history]


def total_loss_and_grad(model: DescriptorModel, pairs, iteration: int = 0) -> tuple[float, np.ndarray]:
    loss, grad = 0.0, np.zeros_like(model.projection)
    for k, pair in enumerate(pairs):
        if not pair.is_positive:
            continue
        lk, gk = pair_loss_and_grad(model, pair)
        if not math.isfinite(lk) or not np.all(np.isfinite(gk)):
            raise TrainingDivergedError(iteration, k, lk)
        loss += lk
        grad += gk
    return loss, grad


def train(pairs, config: TrainConfig = TrainConfig(), model: DescriptorModel | None = None) -> TrainResult:
    """Full-batch Adam on the summed pair loss.

    Each iteration records the loss at the current parameters and the
    learning rate used for the step that follows.

    Raises:
        ValidationError: no positive pair, or pairs of mixed dimension.
        TrainingDivergedError: a non-finite loss or gradient appeared.
    """
    pairs = list(pairs)
    positives = [p for p in pairs if p.is_positive]
    if not positives:
        raise ValidationError("training needs at least one positive pair", field="pairs")
    dim = positives[0].dim
    if any(p.dim != dim for p in pairs):
        raise ValidationError("all pairs must share one descriptor dimension", field="pairs")
    if model is None:
        model = DescriptorModel.initial(dim, config.seed, config.init_scale, config.margin)
    w = model.projection.copy()
    m1 = np.zeros_like(w)
    m2 = np.zeros_like(w)
    lr = config.lr
    history = []
    for it in range(1, config.iterations + 1):
        current = DescriptorModel(w, config.margin)
        loss, grad = total_loss_and_grad(current, pairs, it)
        history.append(TrainStep(it, loss, lr))
        log.debug("iteration %d loss %.6g lr %.6g", it, loss, lr)
        m1 = config.beta1 * m1 + (1.0 - config.beta1) * grad
        m2 = config.beta2 * m2 + (1.0 - config.beta2) * grad * grad
        mhat = m1 / (1.0 - config.beta1**it)
        vhat = m2 / (1.0 - config.beta2**it)
        w = w - lr * mhat / (np.sqrt(vhat) + config.eps)
        if it % config.decay_every == 0:
            if config.decay_mode == "lr":
                lr *= 1.0 - config.decay
            else:
                w = w * (1.0 - config.decay)
        if not np.all(np.isfinite(w)):
            raise TrainingDivergedError(it, None, float("nan"))
    return TrainResult(DescriptorModel(w, config.margin), history)


# --- data --------------------------------------------------------------------


def pairs_from_records(records, seed: int = 0, extra: int = EXTRA_NEGATIVES) -> list[TrainingPair]:
    """One positive pair per view of every record that carries perturbed views.

    Correspondences match identical grid cells. Each pair borrows ``extra``
    points, drawn with a seeded generator, from one other pair.
    """
    pairs = []
    for rec in records:
        if not rec.perturbed:
            continue
        for v in VIEWS:
            a, b = rec.views[v], rec.perturbed[v]
            if not isinstance(a, LocalFeatureMap) or not isinstance(b, LocalFeatureMap):
                raise ValidationError(f"record {rec.location_id}: training needs descriptor maps", field="views")
            if a.num_points != b.num_points:
                raise ValidationError(f"record {rec.location_id}: perturbed {v.value} map differs in size")
            pairs.append(TrainingPair(a, b, grid_correspondences(a.num_points)))
    if len(pairs) > 1 and extra > 0:
        rng = np.random.default_rng(seed)
        for k, pair in enumerate(pairs):
            other = int(rng.integers(0, len(pairs) - 1))
            other += other >= k
            src = pairs[other].map_b.points
            rows = rng.choice(src.shape[0], size=min(extra, src.shape[0]), replace=False)
            pair.extra_negatives = np.asarray(src[np.sort(rows)], dtype=np.float64)
    return pairs


# --- files -------------------------------------------------------------------


def save_model(path, model: DescriptorModel) -> None:
    d = model.dim
    body = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, d)
    body += model.projection.astype("<f8").tobytes(order="C")
    body += struct.pack("<d", model.margin)
    Path(path).write_bytes(body)


def load_model(path) -> DescriptorModel:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise CorruptFileError(f"{path}: too short for a model header")
    magic, version, d = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"{path}: not a model file (magic {magic!r})")
    if version != MODEL_VERSION:
        raise VersionMismatchError(version, MODEL_VERSION, "model")
    expected = _MODEL_HEADER.size + 8 * d * d + 8
    if len(data) != expected:
        raise CorruptFileError(f"{path}: expected {expected} bytes, found {len(data)}")
    w = np.frombuffer(data, dtype="<f8", count=d * d, offset=_MODEL_HEADER.size).reshape(d, d)
    (margin,) = struct.unpack_from("<d", data, expected - 8)
    return DescriptorModel(w.astype(np.float64), margin)


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "lr"])
        for s in history:
            w.writerow([s.iteration, repr(float(s.loss)), repr(float(s.lr))])
