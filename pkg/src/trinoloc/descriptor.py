"""Local feature extraction, VLAD pooling and the TLOC descriptor file format.

The default extractor is a deterministic grid descriptor: every ``cell x cell``
block of a luminance image yields 8 gradient-orientation bins (magnitude
weighted) followed by the block's mean and variance. Any other extractor can be
plugged in as long as it produces a :class:`LocalFeatureMap`.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trinoloc.errors import (
    BadMagicError,
    CorruptFileError,
    DegenerateVectorError,
    ValidationError,
    VersionMismatchError,
)
from trinoloc.kmeans_tree import lloyd_kmeans

ORIENTATION_BINS = 8
LOCAL_DIM = ORIENTATION_BINS + 2
DEFAULT_OUT_DIM = 256
DEFAULT_CODEBOOK_SIZE = 16
DEFAULT_TEMPERATURE = 1.0


class View(str, enum.Enum):
    FRONT = "front"
    LEFT = "left"
    RIGHT = "right"


VIEWS = (View.FRONT, View.LEFT, View.RIGHT)


@dataclass(eq=False)
class LocalFeatureMap:
    """Grid of C local descriptors, each D-dimensional, from one camera view."""

    points: np.ndarray
    grid_shape: tuple[int, int]
    source_view: View = View.FRONT

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValidationError(f"points must be a non-empty (C, D) array, got shape {pts.shape}", field="points")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("feature map contains non-finite values", field="points")
        rows, cols = (int(v) for v in self.grid_shape)
        if rows * cols != pts.shape[0]:
            raise ValidationError(
                f"grid_shape {rows}x{cols} inconsistent with {pts.shape[0]} points", field="grid_shape"
            )
        self.points = pts
        self.grid_shape = (rows, cols)
        self.source_view = View(self.source_view)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_points(cls, points, view: View = View.FRONT) -> LocalFeatureMap:
        """Wrap raw points, guessing a square grid when C is a perfect square."""
        pts = np.asarray(points)
        return cls(pts, default_grid_shape(pts.shape[0]), view)


def default_grid_shape(count: int) -> tuple[int, int]:
    side = math.isqrt(count)
    return (side, side) if side * side == count else (1, count)


@dataclass(eq=False)
class DescriptorVector:
    values: np.ndarray
    normalized: bool = False

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(eq=False)
class VladCodebook:
    """Cluster centers for soft-assignment pooling; shape (K, d_local)."""

    centers: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValidationError(f"codebook needs shape (K, d) with K >= 1, got {c.shape}", field="centers")
        if not np.all(np.isfinite(c)):
            raise ValidationError("codebook centers must be finite", field="centers")
        c.setflags(write=False)
        self.centers = c

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValidationError("cannot normalize a non-finite vector", field="v")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateVectorError("cannot normalize an all-zero vector", field="v")
    return v / norm


def extract_grid_descriptors(image, cell: int = 16, view: View = View.FRONT) -> LocalFeatureMap:
    """Deterministic grid descriptor for a 2D luminance image.

    Integer images are scaled to [0, 1] by their dtype's max. Trailing pixels
    that do not fill a whole cell are ignored.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValidationError(f"expected a 2D luminance image, got shape {img.shape}", field="image")
    if cell < 1:
        raise ValidationError(f"cell must be >= 1, got {cell}", field="cell")
    h, w = img.shape
    if h < cell or w < cell:
        raise ValidationError(f"image {h}x{w} is smaller than one {cell}x{cell} cell", field="image")
    if np.issubdtype(img.dtype, np.integer):
        img = img.astype(np.float64) / np.iinfo(img.dtype).max
    else:
        img = img.astype(np.float64)

    rows, cols = h // cell, w // cell
    img = img[: rows * cell, : cols * cell]
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((ang * (ORIENTATION_BINS / (2 * np.pi))).astype(np.int64), ORIENTATION_BINS - 1)

    # cell index of every pixel
    cell_idx = (np.arange(rows * cell) // cell)[:, None] * cols + (np.arange(cols * cell) // cell)[None, :]
    n_cells = rows * cols
    hist = np.zeros((n_cells, ORIENTATION_BINS))
    np.add.at(hist, (cell_idx.ravel(), bins.ravel()), mag.ravel())
    hist /= cell * cell

    blocks = img.reshape(rows, cell, cols, cell).transpose(0, 2, 1, 3).reshape(n_cells, cell * cell)
    mean = blocks.mean(axis=1)
    var = blocks.var(axis=1)
    points = np.concatenate([hist, mean[:, None], var[:, None]], axis=1)
    return LocalFeatureMap(points, (rows, cols), view)


def fit_codebook(descriptors, k: int = DEFAULT_CODEBOOK_SIZE, seed: int = 0, max_samples: int = 20_000) -> VladCodebook:
    """Learn VLAD centers with k-means on (a seeded sample of) local descriptors."""
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValidationError(f"need a non-empty (n, d) descriptor array, got {X.shape}", field="descriptors")
    rng = np.random.default_rng(seed)
    if X.shape[0] > max_samples:
        X = X[np.sort(rng.choice(X.shape[0], size=max_samples, replace=False))]
    centers, _ = lloyd_kmeans(X, k, rng)
    return VladCodebook(centers)


def projection_matrix(in_dim: int, out_dim: int, seed: int) -> np.ndarray | None:
    """Seeded Gaussian random projection, or ``None`` when no projection is needed."""
    if in_dim == out_dim:
        return None
    rng = np.random.default_rng(seed)
    return rng.standard_normal((in_dim, out_dim)) / math.sqrt(out_dim)


def vlad_pool_unnormalized(
    features,
    codebook: VladCodebook,
    out_dim: int = DEFAULT_OUT_DIM,
    temperature: float = DEFAULT_TEMPERATURE,
    projection_seed: int = 0,
    projection: np.ndarray | None = None,
) -> np.ndarray:
    """Pooled vectors before the final L2 normalization, shape (N, out_dim)."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 2:
        F = F[None]
    if F.shape[-1] != codebook.dim:
        raise ValidationError(
            f"local descriptor dimension {F.shape[-1]} does not match codebook dimension {codebook.dim}",
            field="codebook",
        )
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}", field="temperature")
    n, _, d = F.shape
    K = codebook.size
    C = codebook.centers

    d2 = ((F[:, :, None, :] - C[None, None, :, :]) ** 2).sum(axis=-1)  # (N, C, K)
    logits = -d2 / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    assign = np.exp(logits)
    assign /= assign.sum(axis=-1, keepdims=True)

    # sum_i a_ik (x_i - c_k) = sum_i a_ik x_i - (sum_i a_ik) c_k
    vlad = np.einsum("nck,ncd->nkd", assign, F) - assign.sum(axis=1)[:, :, None] * C[None]
    block_norm = np.linalg.norm(vlad, axis=-1, keepdims=True)
    vlad = np.divide(vlad, block_norm, out=np.zeros_like(vlad), where=block_norm > 0)
    vlad = vlad.reshape(n, K * d)

    if K * d != out_dim:
        if projection is None:
            projection = projection_matrix(K * d, out_dim, projection_seed)
        vlad = vlad @ projection
    return vlad


def vlad_pool_batch(
    features,
    codebook: VladCodebook,
    out_dim: int = DEFAULT_OUT_DIM,
    temperature: float = DEFAULT_TEMPERATURE,
    projection_seed: int = 0,
    projection: np.ndarray | None = None,
) -> np.ndarray:
    """Pool a stack of feature maps, shape (N, C, d), into (N, out_dim) unit vectors.

    Raises:
        DegenerateVectorError: if any pooled vector is all-zero.
    """
    vlad = vlad_pool_unnormalized(features, codebook, out_dim, temperature, projection_seed, projection)
    norm = np.linalg.norm(vlad, axis=1)
    bad = np.flatnonzero(~(norm > 0))
    if bad.size:
        raise DegenerateVectorError(f"pooled vector is all-zero for map(s) {bad.tolist()}", field="features")
    return vlad / norm[:, None]


def vlad_pool(
    fmap: LocalFeatureMap,
    codebook: VladCodebook,
    out_dim: int = DEFAULT_OUT_DIM,
    temperature: float = DEFAULT_TEMPERATURE,
    projection_seed: int = 0,
) -> DescriptorVector:
    """Soft-assignment VLAD pooling of one feature map to a unit vector."""
    values = vlad_pool_batch(fmap.points[None], codebook, out_dim, temperature, projection_seed)[0]
    return DescriptorVector(values, normalized=True)


# --- TLOC descriptor files ------------------------------------------------

TLOC_MAGIC = b"TLOC"
TLOC_VERSION = 1
_TLOC_HEADER = struct.Struct("<4sHII")


def encode_descriptors(array) -> bytes:
    """Serialize a (count, D) array as a TLOC blob (float32 little-endian body)."""
    a = np.asarray(array)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2:
        raise ValidationError(f"descriptor array must be 2D, got shape {a.shape}", field="array")
    count, dim = a.shape
    return _TLOC_HEADER.pack(TLOC_MAGIC, TLOC_VERSION, dim, count) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_descriptors(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TLOC blob starting at ``offset``.

    Returns:
        (array of shape (count, D) as float32, offset just past the blob)
    """
    if len(buf) - offset < _TLOC_HEADER.size:
        raise CorruptFileError("truncated descriptor header")
    magic, version, dim, count = _TLOC_HEADER.unpack_from(buf, offset)
    if magic != TLOC_MAGIC:
        raise BadMagicError(f"bad descriptor magic {magic!r}")
    if version != TLOC_VERSION:
        raise VersionMismatchError(version, TLOC_VERSION, "descriptor")
    start = offset + _TLOC_HEADER.size
    end = start + 4 * dim * count
    if len(buf) < end:
        raise CorruptFileError(f"descriptor body truncated: need {end - start} bytes, have {len(buf) - start}")
    arr = np.frombuffer(buf, dtype="<f4", count=dim * count, offset=start).reshape(count, dim)
    return arr.astype(np.float32), end


def write_descriptor_file(path, array) -> None:
    Path(path).write_bytes(encode_descriptors(array))


def read_descriptor_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = decode_descriptors(data)
    if end != len(data):
        raise CorruptFileError(f"{path}: {len(data) - end} trailing bytes after descriptor body")
    return arr
