"""GPS-tagged location library: per-view pooled index plus full feature maps.

Each location keeps, for the front, left and right view, the pooled unit vector
(used to shortlist candidates through one k-means tree per view) and the full
local feature map (used for voting). The library is immutable after build.

File layout (little-endian)::

    "TLIB" | version u16
    metadata: u32 length | UTF-8 JSON | codebook as TLOC blob
    entries:  u32 count | count x 3 float64 (lat, lon, heading)
              per view: pooled TLOC blob (count x out_dim)
                        features TLOC blob (count*C x d)
    trees:    per view: node records in pre-order
              node = u8 kind | f64 radius | f64 x dim center
                     | kind 0: u32 n_children | kind 1: u32 n, n x u32 positions
    CRC32 u32 over every preceding byte
"""

from __future__ import annotations

import json
import logging
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from trinoloc.descriptor import (
    DEFAULT_CODEBOOK_SIZE,
    DEFAULT_OUT_DIM,
    DEFAULT_TEMPERATURE,
    VIEWS,
    DescriptorVector,
    LocalFeatureMap,
    View,
    VladCodebook,
    decode_descriptors,
    encode_descriptors,
    extract_grid_descriptors,
    fit_codebook,
    projection_matrix,
    vlad_pool_unnormalized,
)
from trinoloc.errors import (
    BadMagicError,
    ChecksumError,
    CorruptFileError,
    FormatError,
    NoReferenceError,
    ValidationError,
    VersionMismatchError,
)
from trinoloc.geo import GeoTag
from trinoloc.kmeans_tree import KMeansTree, TreeNode, build_kmeans_tree

log = logging.getLogger(__name__)

TLIB_MAGIC = b"TLIB"
TLIB_VERSION = 1
_POOL_CHUNK = 512


@dataclass
class LibraryConfig:
    """Descriptor, codebook and index settings used to build a library."""

    cell: int = 16
    codebook_size: int = DEFAULT_CODEBOOK_SIZE
    codebook_seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    out_dim: int = DEFAULT_OUT_DIM
    projection_seed: int = 0
    branching: int = 8
    leaf_max: int = 16
    tree_seed: int = 0
    codebook: VladCodebook | None = None


@dataclass
class LibraryMetadata:
    grid_shape: tuple[int, int]
    local_dim: int
    out_dim: int
    codebook: VladCodebook
    temperature: float
    projection_seed: int
    branching: int
    leaf_max: int
    tree_seed: int
    cell: int
    created: int

    @property
    def num_points(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]


@dataclass(frozen=True, eq=False)
class ReferenceEntry:
    id: int
    geotag: GeoTag
    pooled: dict
    features: dict
    source_id: str = ""


@dataclass
class BuildReport:
    num_entries: int
    skipped: list[int] = field(default_factory=list)

    @property
    def num_skipped(self) -> int:
        return len(self.skipped)


@dataclass(eq=False)
class LocationLibrary:
    """Immutable reference store. Entry ids are ``0..len-1`` in manifest order."""

    geotags: list[GeoTag]
    source_ids: list[str]
    pooled: dict  # View -> (N, out_dim) float32
    features: dict  # View -> (N, C, d) float32
    trees: dict  # View -> KMeansTree
    metadata: LibraryMetadata
    _projection: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.geotags)
        for v in VIEWS:
            if self.pooled[v].shape[0] != n or self.features[v].shape[0] != n or len(self.trees[v]) != n:
                raise ValidationError(f"{v.value} view arrays do not cover {n} entries", field="entries")
            self.pooled[v].setflags(write=False)
            self.features[v].setflags(write=False)
        self._lats = np.array([g.lat for g in self.geotags])
        self._lons = np.array([g.lon for g in self.geotags])
        self._projection = projection_matrix(
            self.metadata.codebook.size * self.metadata.local_dim, self.metadata.out_dim, self.metadata.projection_seed
        )

    def __len__(self) -> int:
        return len(self.geotags)

    @property
    def lats(self) -> np.ndarray:
        return self._lats

    @property
    def lons(self) -> np.ndarray:
        return self._lons

    def entry(self, ref_id: int) -> ReferenceEntry:
        pooled = {v: DescriptorVector(self.pooled[v][ref_id], normalized=True) for v in VIEWS}
        features = {
            v: LocalFeatureMap(self.features[v][ref_id], self.metadata.grid_shape, v) for v in VIEWS
        }
        return ReferenceEntry(ref_id, self.geotags[ref_id], pooled, features, self.source_ids[ref_id])

    def pool(self, fmap_points) -> np.ndarray:
        """Pool one or more query maps with this library's codebook and projection."""
        m = self.metadata
        vlad = vlad_pool_unnormalized(
            fmap_points, m.codebook, m.out_dim, m.temperature, m.projection_seed, self._projection
        )
        norm = np.linalg.norm(vlad, axis=1, keepdims=True)
        return np.divide(vlad, norm, out=np.zeros_like(vlad), where=norm > 0)

    def structurally_equal(self, other: LocationLibrary) -> bool:
        a, b = self.metadata, other.metadata
        same_meta = (
            a.grid_shape == b.grid_shape
            and a.local_dim == b.local_dim
            and a.out_dim == b.out_dim
            and np.array_equal(a.codebook.centers, b.codebook.centers)
            and (a.temperature, a.projection_seed, a.branching, a.leaf_max, a.tree_seed, a.cell, a.created)
            == (b.temperature, b.projection_seed, b.branching, b.leaf_max, b.tree_seed, b.cell, b.created)
        )
        if not same_meta or self.geotags != other.geotags or self.source_ids != other.source_ids:
            return False
        return all(
            np.array_equal(self.pooled[v], other.pooled[v])
            and np.array_equal(self.features[v], other.features[v])
            and self.trees[v].structure_equal(other.trees[v])
            for v in VIEWS
        )


def _creation_time() -> int:
    # SOURCE_DATE_EPOCH pins the timestamp for reproducible library files
    env = os.environ.get("SOURCE_DATE_EPOCH")
    return int(env) if env else int(time.time())


def _as_map(view_data, cell: int, view: View) -> LocalFeatureMap:
    # anything that is not already a feature map is treated as a luminance image
    if isinstance(view_data, LocalFeatureMap):
        return view_data
    return extract_grid_descriptors(np.asarray(view_data), cell, view)


def build_library(records, config: LibraryConfig | None = None) -> tuple[LocationLibrary, BuildReport]:
    """Build a library from ingested location records.

    Each record must expose ``geotag``, ``views`` (a mapping from every
    :class:`View` to a :class:`LocalFeatureMap` or a 2D luminance image) and
    optionally ``location_id``. Ids are assigned sequentially in record order;
    records whose pooled vector is degenerate are skipped and listed in the
    report.

    Raises:
        NoReferenceError: no records.
        ValidationError: a record lacks a view or dimensions are inconsistent.
    """
    config = config or LibraryConfig()
    records = list(records)
    if not records:
        raise NoReferenceError("cannot build a library from an empty dataset")

    grid_shape = None
    stacks = {v: [] for v in VIEWS}
    for idx, rec in enumerate(records):
        views = getattr(rec, "views", None) or {}
        missing = [v.value for v in VIEWS if v not in views]
        if missing:
            rid = getattr(rec, "location_id", idx)
            raise ValidationError(f"record {idx} ({rid}) is missing view(s) {', '.join(missing)}", field="views")
        for v in VIEWS:
            fmap = _as_map(views[v], config.cell, v)
            pts = fmap.points
            if grid_shape is None:
                grid_shape = fmap.grid_shape
                ref_shape = pts.shape
            if pts.shape != ref_shape:
                raise ValidationError(
                    f"record {idx} {v.value} view has shape {pts.shape}, expected {ref_shape}", field="views"
                )
            stacks[v].append(pts)
    features = {v: np.stack(stacks[v]).astype(np.float32) for v in VIEWS}
    n, c, d = features[View.FRONT].shape

    codebook = config.codebook
    if codebook is None:
        sample = np.concatenate([features[v].reshape(-1, d) for v in VIEWS])
        codebook = fit_codebook(sample, config.codebook_size, config.codebook_seed)
    # round to float32 so the codebook survives the TLOC round trip bit-exactly
    codebook = VladCodebook(codebook.centers.astype(np.float32))
    if codebook.dim != d:
        raise ValidationError(f"codebook dimension {codebook.dim} does not match local dimension {d}", field="codebook")

    proj = projection_matrix(codebook.size * d, config.out_dim, config.projection_seed)
    raw = {}
    for v in VIEWS:
        chunks = [
            vlad_pool_unnormalized(
                features[v][i : i + _POOL_CHUNK], codebook, config.out_dim, config.temperature, config.projection_seed, proj
            )
            for i in range(0, n, _POOL_CHUNK)
        ]
        raw[v] = np.concatenate(chunks)
    norms = np.stack([np.linalg.norm(raw[v], axis=1) for v in VIEWS])
    keep = np.all(norms > 0, axis=0)
    skipped = np.flatnonzero(~keep).tolist()
    if skipped:
        log.warning("skipping %d record(s) with degenerate pooled descriptors: %s", len(skipped), skipped)
    if not keep.any():
        raise NoReferenceError("every record produced a degenerate descriptor")

    pooled = {v: (raw[v][keep] / norms[i][keep, None]).astype(np.float32) for i, v in enumerate(VIEWS)}
    features = {v: np.ascontiguousarray(features[v][keep]) for v in VIEWS}
    kept = [r for r, k in zip(records, keep) if k]
    geotags = [r.geotag for r in kept]
    source_ids = [str(getattr(r, "location_id", i)) for i, r in zip(np.flatnonzero(keep), kept)]

    trees = {
        v: build_kmeans_tree(pooled[v], None, config.branching, config.leaf_max, config.tree_seed) for v in VIEWS
    }
    meta = LibraryMetadata(
        grid_shape=tuple(grid_shape),
        local_dim=d,
        out_dim=config.out_dim,
        codebook=codebook,
        temperature=config.temperature,
        projection_seed=config.projection_seed,
        branching=config.branching,
        leaf_max=config.leaf_max,
        tree_seed=config.tree_seed,
        cell=config.cell,
        created=_creation_time(),
    )
    lib = LocationLibrary(geotags, source_ids, pooled, features, trees, meta)
    log.info("built library: %d geo-locations, %d skipped", len(lib), len(skipped))
    return lib, BuildReport(len(lib), skipped)


# --- persistence ------------------------------------------------------------


def _encode_tree(tree: KMeansTree) -> bytes:
    out = bytearray()
    stack = [tree.root]
    while stack:
        node = stack.pop()
        kind = 1 if node.is_leaf else 0
        out += struct.pack("<Bd", kind, node.radius)
        out += np.ascontiguousarray(node.center, dtype="<f8").tobytes()
        if node.is_leaf:
            out += struct.pack("<I", len(node.ids))
            out += np.ascontiguousarray(node.ids, dtype="<u4").tobytes()
        else:
            out += struct.pack("<I", len(node.children))
            stack.extend(reversed(node.children))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CorruptFileError(f"library file truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def blob(self) -> np.ndarray:
        try:
            arr, new_pos = decode_descriptors(self.buf[: self.end], self.pos)
        except FormatError as exc:
            raise CorruptFileError(f"bad descriptor block at byte {self.pos}: {exc}") from exc
        self.pos = new_pos
        return arr


def _decode_tree(r: _Reader, dim: int, n_entries: int) -> TreeNode:
    def read_node() -> TreeNode:
        kind, radius = r.unpack("<Bd")
        center = np.frombuffer(r.take(8 * dim), dtype="<f8").astype(np.float64)
        (count,) = r.unpack("<I")
        if kind == 1:
            ids = np.frombuffer(r.take(4 * count), dtype="<u4").astype(np.int64)
            if ids.size and ids.max() >= n_entries:
                raise CorruptFileError("tree leaf references a missing entry")
            return TreeNode(center=center, radius=radius, ids=ids)
        if kind != 0 or count == 0:
            raise CorruptFileError(f"bad tree node (kind {kind}, {count} children)")
        node = TreeNode(center=center, radius=radius)
        node.children = [read_node() for _ in range(count)]
        return node

    return read_node()


def save_library(lib: LocationLibrary, path) -> None:
    m = lib.metadata
    meta = {
        "grid_shape": list(m.grid_shape),
        "local_dim": m.local_dim,
        "out_dim": m.out_dim,
        "temperature": m.temperature,
        "projection_seed": m.projection_seed,
        "branching": m.branching,
        "leaf_max": m.leaf_max,
        "tree_seed": m.tree_seed,
        "cell": m.cell,
        "created": m.created,
        "source_ids": lib.source_ids,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray(TLIB_MAGIC + struct.pack("<H", TLIB_VERSION))
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += encode_descriptors(m.codebook.centers)

    n = len(lib)
    tags = np.array([[g.lat, g.lon, g.heading] for g in lib.geotags], dtype="<f8").reshape(n, 3)
    out += struct.pack("<I", n) + tags.tobytes()
    for v in VIEWS:
        out += encode_descriptors(lib.pooled[v])
        out += encode_descriptors(lib.features[v].reshape(n * m.num_points, m.local_dim))
    for v in VIEWS:
        out += _encode_tree(lib.trees[v])
    out += struct.pack("<I", zlib.crc32(out))

    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    os.replace(tmp, path)


def load_library(path) -> LocationLibrary:
    """Read a library file.

    Raises:
        BadMagicError: not a library file.
        VersionMismatchError: written by an incompatible format version.
        CorruptFileError: truncated or structurally invalid.
        ChecksumError: structure parses but the CRC32 trailer disagrees.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 6:
        raise CorruptFileError(f"{path}: file too short for a library header")
    if buf[:4] != TLIB_MAGIC:
        raise BadMagicError(f"{path}: not a library file (magic {buf[:4]!r})")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != TLIB_VERSION:
        raise VersionMismatchError(version, TLIB_VERSION, "library")

    r = _Reader(buf, len(buf))
    r.pos = 6
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        grid_shape = tuple(int(x) for x in meta["grid_shape"])
        local_dim = int(meta["local_dim"])
        out_dim = int(meta["out_dim"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: unreadable metadata block ({exc})") from exc
    codebook = VladCodebook(r.blob())

    (n,) = r.unpack("<I")
    tags = np.frombuffer(r.take(24 * n), dtype="<f8").reshape(n, 3)
    c = grid_shape[0] * grid_shape[1]
    pooled, features = {}, {}
    for v in VIEWS:
        p = r.blob()
        f = r.blob()
        if p.shape != (n, out_dim) or f.shape != (n * c, local_dim):
            raise CorruptFileError(f"{path}: {v.value} view block has unexpected shape")
        pooled[v] = p
        features[v] = f.reshape(n, c, local_dim)
    roots = {v: _decode_tree(r, out_dim, n) for v in VIEWS}
    if r.pos + 4 > len(buf):
        raise CorruptFileError(f"{path}: missing CRC32 trailer")
    if r.pos + 4 != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - r.pos - 4} unexpected trailing bytes")
    (stored,) = struct.unpack_from("<I", buf, r.pos)
    computed = zlib.crc32(buf[: r.pos])
    if stored != computed:
        raise ChecksumError(stored, computed)

    trees = {
        v: KMeansTree(
            root=roots[v],
            vectors=pooled[v],
            ids=np.arange(n, dtype=np.int64),
            branching=int(meta["branching"]),
            leaf_max=int(meta["leaf_max"]),
            seed=int(meta["tree_seed"]),
        )
        for v in VIEWS
    }
    md = LibraryMetadata(
        grid_shape=grid_shape,
        local_dim=local_dim,
        out_dim=out_dim,
        codebook=codebook,
        temperature=float(meta["temperature"]),
        projection_seed=int(meta["projection_seed"]),
        branching=int(meta["branching"]),
        leaf_max=int(meta["leaf_max"]),
        tree_seed=int(meta["tree_seed"]),
        cell=int(meta["cell"]),
        created=int(meta["created"]),
    )
    geotags = [GeoTag(float(a), float(b), float(h)) for a, b, h in tags]
    return LocationLibrary(geotags, list(meta["source_ids"]), pooled, features, trees, md)
