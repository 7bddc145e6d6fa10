"""Data collection helpers: camera poses, Street View URLs and manifest ingestion.

Manifest format: UTF-8 text, one record per line, tab-separated::

    id  lat  lon  heading  front  left  right  [front_pert  left_pert  right_pert]

Blank lines and lines starting with ``#`` are ignored. Paths are resolved by
the fetcher (relative to the manifest directory for the default local
fetcher). A path may point at an image (PNG/JPEG/PGM via Pillow, or ``.npy``)
or at a TLOC descriptor file, in which case feature extraction is skipped.
"""

from __future__ import annotations

import io
import logging
import math
import threading
import time
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from trinoloc.descriptor import VIEWS, LocalFeatureMap, View, decode_descriptors
from trinoloc.errors import (
    DuplicateIdError,
    FetchError,
    FormatError,
    IngestionError,
    MalformedRecordError,
    MissingFileError,
    ValidationError,
)
from trinoloc.geo import GeoTag, normalize_heading

log = logging.getLogger(__name__)

STREETVIEW_ENDPOINT = "https://maps.googleapis.com/maps/api/streetview"
MAX_IMAGE_SIDE = 640
MAX_PERTURBATION_DEG = 5.0
API_KEY_ENV = "TRINOLOC_GSV_KEY"


@dataclass(frozen=True)
class CapturePose:
    geotag: GeoTag
    pitch: float = 0.0
    fov: float = 90.0

    def __post_init__(self):
        if not (0.0 < self.fov <= 120.0):
            raise ValidationError(f"fov {self.fov} outside (0, 120]", field="fov")
        if not -90.0 <= self.pitch <= 90.0:
            raise ValidationError(f"pitch {self.pitch} outside [-90, 90]", field="pitch")

    @property
    def heading(self) -> float:
        return self.geotag.heading

    def with_heading(self, heading: float) -> CapturePose:
        return replace(self, geotag=replace(self.geotag, heading=normalize_heading(heading)))


def derive_view_poses(front: CapturePose) -> tuple[CapturePose, CapturePose, CapturePose]:
    """Front, left and right poses; the side cameras are rotated 90 degrees either way."""
    return front, front.with_heading(front.heading - 90.0), front.with_heading(front.heading + 90.0)


def perturbation_offset(seed: int) -> float:
    """Heading offset uniform on [-5, 0) U (0, 5] degrees."""
    rng = np.random.default_rng(seed)
    magnitude = MAX_PERTURBATION_DEG * (1.0 - rng.random())  # (0, 5]
    return magnitude if rng.random() < 0.5 else -magnitude


def perturb_pose(pose: CapturePose, seed: int) -> CapturePose:
    return pose.with_heading(pose.heading + perturbation_offset(seed))


def _fmt(x: float) -> str:
    # repr of a float is the shortest string that parses back to the same value
    return repr(float(x))


def build_streetview_url(pose: CapturePose, image_size=(640, 640), api_key: str = "") -> str:
    """Static Street View request URL with a fixed parameter order."""
    w, h = (int(v) for v in image_size)
    if not (1 <= w <= MAX_IMAGE_SIDE and 1 <= h <= MAX_IMAGE_SIDE):
        raise ValidationError(f"image size {w}x{h} outside 1..{MAX_IMAGE_SIDE} per side", field="image_size")
    if not api_key:
        raise ValidationError("API key must be non-empty", field="api_key")
    params = [
        ("size", f"{w}x{h}"),
        ("location", f"{_fmt(pose.geotag.lat)},{_fmt(pose.geotag.lon)}"),
        ("heading", _fmt(pose.heading)),
        ("pitch", _fmt(pose.pitch)),
        ("fov", _fmt(pose.fov)),
        ("key", api_key),
    ]
    return STREETVIEW_ENDPOINT + "?" + urllib.parse.urlencode(params, safe=",")


def parse_streetview_url(url: str) -> tuple[CapturePose, tuple[int, int], str]:
    """Inverse of :func:`build_streetview_url`: (pose, image size, key)."""
    parts = urllib.parse.urlsplit(url)
    q = dict(urllib.parse.parse_qsl(parts.query, keep_blank_values=True, strict_parsing=True))
    try:
        w, h = (int(v) for v in q["size"].split("x"))
        lat, lon = (float(v) for v in q["location"].split(","))
        pose = CapturePose(GeoTag(lat, lon, float(q["heading"])), float(q["pitch"]), float(q["fov"]))
        return pose, (w, h), q["key"]
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"not a Street View request URL: {url}") from exc


# --- fetchers -----------------------------------------------------------------


class Fetcher(Protocol):
    def __call__(self, ref: str) -> bytes: ...


class LocalFileFetcher:
    """Reads references as file paths relative to ``base_dir``."""

    def __init__(self, base_dir="."):
        self.base_dir = Path(base_dir)

    def __call__(self, ref: str) -> bytes:
        path = Path(ref)
        if not path.is_absolute():
            path = self.base_dir / path
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise MissingFileError(path) from None
        except OSError as exc:
            raise FetchError(f"cannot read {path}: {exc}") from exc


class HttpFetcher:
    """Rate-limited HTTP GET fetcher for live image collection.

    Args:
        min_interval: Minimum seconds between consecutive requests.
        opener: Callable taking a URL and returning a file-like response;
            defaults to :func:`urllib.request.urlopen`.
    """

    def __init__(self, min_interval: float = 0.1, timeout: float = 30.0, opener: Callable | None = None):
        self.min_interval = min_interval
        self.timeout = timeout
        self.opener = opener or (lambda url: urllib.request.urlopen(url, timeout=self.timeout))
        self._lock = threading.Lock()
        self._last = -math.inf

    def __call__(self, ref: str) -> bytes:
        with self._lock:
            wait = self._last + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()
        try:
            with self.opener(ref) as resp:
                return resp.read()
        except Exception as exc:
            raise FetchError(f"GET failed for {ref.split('&key=')[0]}: {exc}") from exc


def decode_view(data: bytes, ref: str, view: View):
    """Turn fetched bytes into a feature map (TLOC) or a 2D luminance array."""
    if data[:4] == b"TLOC":
        arr, end = decode_descriptors(data)
        if end != len(data):
            raise FormatError(f"{ref}: trailing bytes after descriptor body")
        return LocalFeatureMap.from_points(arr, view)
    if ref.endswith(".npy"):
        arr = np.load(io.BytesIO(data), allow_pickle=False)
    else:
        from PIL import Image

        with Image.open(io.BytesIO(data)) as img:
            arr = np.asarray(img.convert("L"))
    if arr.ndim != 2:
        raise FormatError(f"{ref}: expected a 2D luminance image, got shape {arr.shape}")
    return arr


# --- manifests ----------------------------------------------------------------


@dataclass
class ManifestRow:
    location_id: str
    geotag: GeoTag
    paths: dict  # View -> str
    perturbed_paths: dict | None = None
    record_index: int = 0


@dataclass(eq=False)
class LocationRecord:
    """One ingested location: three views plus optional perturbed partners."""

    location_id: str
    geotag: GeoTag
    views: dict
    perturbed: dict | None = None
    record_index: int = 0


@dataclass
class IngestedDataset:
    records: list[LocationRecord]
    failures: list[IngestionError] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def parse_manifest(path) -> list[ManifestRow]:
    """Parse a manifest file into rows, validating ids and field structure."""
    text = Path(path).read_text(encoding="utf-8")
    rows, seen = [], set()
    index = 0
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.rstrip("\r").split("\t")
        if len(fields) not in (7, 10):
            raise MalformedRecordError(f"expected 7 or 10 tab-separated fields, got {len(fields)}", index)
        loc_id = fields[0].strip()
        if not loc_id:
            raise MalformedRecordError("empty location id", index)
        if loc_id in seen:
            raise DuplicateIdError(loc_id, index)
        seen.add(loc_id)
        try:
            tag = GeoTag(float(fields[1]), float(fields[2]), float(fields[3]))
        except ValueError as exc:
            raise MalformedRecordError(f"bad coordinates: {exc}", index) from exc
        paths = dict(zip(VIEWS, fields[4:7]))
        pert = dict(zip(VIEWS, fields[7:10])) if len(fields) == 10 else None
        if any(not p for p in paths.values()) or (pert and any(not p for p in pert.values())):
            raise MalformedRecordError("empty path field", index)
        rows.append(ManifestRow(loc_id, tag, paths, pert, index))
        index += 1
    return rows


def write_manifest(path, rows) -> None:
    lines = []
    for row in rows:
        fields = [row.location_id, _fmt(row.geotag.lat), _fmt(row.geotag.lon), _fmt(row.geotag.heading)]
        fields += [str(row.paths[v]) for v in VIEWS]
        if row.perturbed_paths:
            fields += [str(row.perturbed_paths[v]) for v in VIEWS]
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_row(row: ManifestRow, fetcher) -> LocationRecord:
    def load(paths):
        out = {}
        for v in VIEWS:
            ref = paths[v]
            try:
                out[v] = decode_view(fetcher(ref), ref, v)
            except MissingFileError as exc:
                raise MissingFileError(exc.path, row.record_index) from None
            except FetchError as exc:
                raise FetchError(str(exc), row.record_index) from exc
            except FormatError as exc:
                raise MalformedRecordError(f"{ref}: {exc}", row.record_index) from exc
            except (OSError, ValueError) as exc:
                raise MalformedRecordError(f"{ref}: cannot decode ({exc})", row.record_index) from exc
        return out

    views = load(row.paths)
    pert = load(row.perturbed_paths) if row.perturbed_paths else None
    return LocationRecord(row.location_id, row.geotag, views, pert, row.record_index)


def ingest_manifest(path, fetcher=None, strict: bool = True, workers: int = 1) -> IngestedDataset:
    """Load every manifest record through ``fetcher``.

    Records come back in manifest order. With ``strict=False`` failing records
    are collected in ``failures`` instead of aborting the run.

    Raises:
        MalformedRecordError, DuplicateIdError: bad manifest structure.
        MissingFileError: a referenced file does not exist (strict mode).
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path)
    rows = parse_manifest(path)
    fetcher = fetcher or LocalFileFetcher(path.parent)

    def attempt(row):
        try:
            return _load_row(row, fetcher)
        except IngestionError as exc:
            if strict:
                raise
            return exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(attempt, rows))
    else:
        outcomes = [attempt(r) for r in rows]
    records = [o for o in outcomes if isinstance(o, LocationRecord)]
    failures = [o for o in outcomes if not isinstance(o, LocationRecord)]
    for f in failures:
        log.warning("ingestion failure: %s", f)
    return IngestedDataset(records, failures)
