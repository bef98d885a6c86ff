"""Bags of tile features, cohort manifests and their on-disk layout.

A store is a directory holding ``manifest.csv`` and one ``<bag_id>.fbag``
file per bag under ``bags/``.  Bag files are little-endian binary::

    magic "FBAG" | version u16 | flags u16 | n_tiles u32 | dim u32
    features f32 x n_tiles*dim (row-major)
    coords u32 x 2*n_tiles        (flags bit0)
    tile_class u8 x n_tiles       (flags bit1)
    tumor_label u8 x n_tiles      (flags bit2)
"""

from __future__ import annotations

import csv
import io
import re
import struct
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError, IdMismatch, StoreIo, UnknownTarget, ValidationError

MAGIC = b"FBAG"
VERSION = 1
HEADER = struct.Struct("<4sHHII")

FLAG_COORDS = 0x1
FLAG_CLASS = 0x2
FLAG_TUMOR = 0x4

TILE_CLASSES = ("tumor", "stroma", "epithelium", "necrosis", "immune", "other")
TUMOR = 0

MANIFEST_NAME = "manifest.csv"
BAG_DIR = "bags"
BAG_SUFFIX = ".fbag"
META_COLUMNS = (
    "bag_id",
    "cohort_id",
    "timestamp",
    "stain_origin",
    "scanner",
    "tissue_site",
    "procedure",
    "grade",
    "is_primary_site",
)
NA = "NA"

_SAFE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")


def _frozen(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureBag:
    """One slide: ``n_tiles x dim`` float32 features plus optional tile metadata."""

    bag_id: str
    features: np.ndarray
    tile_coords: Optional[np.ndarray] = None
    tile_class: Optional[np.ndarray] = None
    tile_tumor_label: Optional[np.ndarray] = None

    def __post_init__(self):
        if not isinstance(self.bag_id, str) or not _SAFE_ID.match(self.bag_id):
            raise ValidationError(f"bag_id {self.bag_id!r} must match {_SAFE_ID.pattern}")
        feats = np.ascontiguousarray(self.features, dtype="<f4")
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValidationError(f"{self.bag_id}: features must be a nonempty 2-D array, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValidationError(f"{self.bag_id}: non-finite feature values")
        n = feats.shape[0]
        object.__setattr__(self, "features", _frozen(feats))
        for name, dtype, shape in (
            ("tile_coords", "<u4", (n, 2)),
            ("tile_class", "u1", (n,)),
            ("tile_tumor_label", "u1", (n,)),
        ):
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.asarray(value)
            if arr.shape != shape:
                raise ValidationError(f"{self.bag_id}: {name} has shape {arr.shape}, expected {shape}")
            if np.any(arr < 0):
                raise ValidationError(f"{self.bag_id}: {name} has negative entries")
            object.__setattr__(self, name, _frozen(np.ascontiguousarray(arr, dtype=dtype)))
        if self.tile_class is not None and np.any(self.tile_class >= len(TILE_CLASSES)):
            raise ValidationError(f"{self.bag_id}: tile_class code out of range")
        if self.tile_tumor_label is not None and np.any(self.tile_tumor_label > 1):
            raise ValidationError(f"{self.bag_id}: tile_tumor_label must be binary")

    @property
    def n_tiles(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureBag):
            return NotImplemented
        if self.bag_id != other.bag_id:
            return False
        for name in ("features", "tile_coords", "tile_class", "tile_tumor_label"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.tobytes() != b.tobytes()):
                return False
        return True

    __hash__ = None

    def to_bytes(self) -> bytes:
        flags = 0
        parts = [self.features.tobytes()]
        if self.tile_coords is not None:
            flags |= FLAG_COORDS
            parts.append(self.tile_coords.tobytes())
        if self.tile_class is not None:
            flags |= FLAG_CLASS
            parts.append(self.tile_class.tobytes())
        if self.tile_tumor_label is not None:
            flags |= FLAG_TUMOR
            parts.append(self.tile_tumor_label.tobytes())
        return HEADER.pack(MAGIC, VERSION, flags, self.n_tiles, self.dim) + b"".join(parts)

    @classmethod
    def from_bytes(cls, bag_id: str, blob: bytes) -> "FeatureBag":
        if len(blob) < HEADER.size:
            raise FormatError(f"{bag_id}: file shorter than header")
        magic, version, flags, n, dim = HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise FormatError(f"{bag_id}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{bag_id}: unsupported version {version}")
        if flags & ~(FLAG_COORDS | FLAG_CLASS | FLAG_TUMOR):
            raise FormatError(f"{bag_id}: unknown flag bits {flags:#x}")
        expected = HEADER.size + 4 * n * dim
        expected += 8 * n if flags & FLAG_COORDS else 0
        expected += n if flags & FLAG_CLASS else 0
        expected += n if flags & FLAG_TUMOR else 0
        if len(blob) != expected:
            raise FormatError(f"{bag_id}: payload is {len(blob)} bytes, expected {expected}")

        off = HEADER.size

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).copy()
            off += arr.nbytes
            return arr

        features = take("<f4", n * dim).reshape(n, dim)
        coords = take("<u4", 2 * n).reshape(n, 2) if flags & FLAG_COORDS else None
        tile_class = take("u1", n) if flags & FLAG_CLASS else None
        tumor = take("u1", n) if flags & FLAG_TUMOR else None
        return cls(bag_id, features, coords, tile_class, tumor)


@dataclass(frozen=True)
class ManifestRow:
    bag_id: str
    cohort_id: str
    timestamp: date
    stain_origin: str
    scanner: str
    tissue_site: str
    procedure: str
    grade: Optional[str]
    is_primary_site: Optional[bool]
    labels: tuple  # per target: 0, 1 or None (NA)

    def __post_init__(self):
        if self.stain_origin not in ("internal", "external"):
            raise ValidationError(f"{self.bag_id}: stain_origin must be internal/external")
        if self.grade not in (None, "low", "high"):
            raise ValidationError(f"{self.bag_id}: grade must be low/high or missing")
        for v in self.labels:
            if v not in (0, 1, None):
                raise ValidationError(f"{self.bag_id}: label {v!r} not in {{0,1,NA}}")


@dataclass(frozen=True)
class CohortManifest:
    targets: tuple
    rows: tuple
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "rows", tuple(self.rows))
        if len(set(self.targets)) != len(self.targets):
            raise ValidationError("duplicate target columns")
        index = {}
        for i, row in enumerate(self.rows):
            if row.bag_id in index:
                raise ValidationError(f"duplicate bag_id {row.bag_id}")
            if len(row.labels) != len(self.targets):
                raise ValidationError(f"{row.bag_id}: {len(row.labels)} labels for {len(self.targets)} targets")
            index[row.bag_id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.rows)

    @property
    def bag_ids(self) -> list:
        return [r.bag_id for r in self.rows]

    def row(self, bag_id: str) -> ManifestRow:
        return self.rows[self._index[bag_id]]

    def __contains__(self, bag_id):
        return bag_id in self._index

    def subset(self, bag_ids: Iterable[str]) -> "CohortManifest":
        return CohortManifest(self.targets, [self.row(b) for b in bag_ids])

    def target_index(self, target_id: str) -> int:
        try:
            return self.targets.index(target_id)
        except ValueError:
            raise UnknownTarget(f"unknown target {target_id!r}") from None

    def label_matrix(self, bag_ids: Optional[Sequence[str]] = None, targets: Optional[Sequence[str]] = None) -> np.ndarray:
        """Float matrix (bags x targets) with NaN for NA labels."""
        rows = self.rows if bag_ids is None else [self.row(b) for b in bag_ids]
        cols = range(len(self.targets)) if targets is None else [self.target_index(t) for t in targets]
        out = np.full((len(rows), len(cols)), np.nan)
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                if r.labels[c] is not None:
                    out[i, j] = r.labels[c]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(META_COLUMNS + self.targets)
        for r in self.rows:
            w.writerow(
                [
                    r.bag_id,
                    r.cohort_id,
                    r.timestamp.isoformat(),
                    r.stain_origin,
                    r.scanner,
                    r.tissue_site,
                    r.procedure,
                    r.grade if r.grade is not None else NA,
                    NA if r.is_primary_site is None else ("true" if r.is_primary_site else "false"),
                ]
                + [NA if v is None else str(v) for v in r.labels]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CohortManifest":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("manifest is empty") from None
        if tuple(header[: len(META_COLUMNS)]) != META_COLUMNS:
            raise FormatError(f"manifest header must start with {','.join(META_COLUMNS)}")
        targets = tuple(header[len(META_COLUMNS):])
        label_map = {"0": 0, "1": 1, NA: None}
        bool_map = {"true": True, "false": False, NA: None}
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise FormatError(f"manifest line {line_no}: {len(rec)} cells, expected {len(header)}")
            try:
                ts = date.fromisoformat(rec[2])
                grade = None if rec[7] == NA else rec[7]
                primary = bool_map[rec[8]]
                labels = tuple(label_map[v] for v in rec[len(META_COLUMNS):])
            except (ValueError, KeyError) as exc:
                raise ValidationError(f"manifest line {line_no}: {exc}") from None
            rows.append(ManifestRow(rec[0], rec[1], ts, rec[3], rec[4], rec[5], rec[6], grade, primary, labels))
        return cls(targets, rows)


def write_feature_store(bags: Sequence[FeatureBag], manifest: CohortManifest, path) -> None:
    ids = [b.bag_id for b in bags]
    if len(set(ids)) != len(ids):
        raise IdMismatch("duplicate bag_id among bags")
    if set(ids) != set(manifest.bag_ids):
        raise IdMismatch("bag ids of bags and manifest differ")
    root = Path(path)
    try:
        (root / BAG_DIR).mkdir(parents=True, exist_ok=True)
        (root / MANIFEST_NAME).write_bytes(manifest.to_csv().encode("utf-8"))
        for bag in bags:
            (root / BAG_DIR / (bag.bag_id + BAG_SUFFIX)).write_bytes(bag.to_bytes())
    except OSError as exc:
        raise StoreIo(str(exc)) from exc


def read_manifest(path) -> CohortManifest:
    try:
        text = (Path(path) / MANIFEST_NAME).read_bytes().decode("utf-8")
    except OSError as exc:
        raise StoreIo(str(exc)) from exc
    except UnicodeDecodeError as exc:
        raise FormatError(f"manifest is not UTF-8: {exc}") from None
    return CohortManifest.from_csv(text)


def read_bag(path, bag_id: str) -> FeatureBag:
    try:
        blob = (Path(path) / BAG_DIR / (bag_id + BAG_SUFFIX)).read_bytes()
    except OSError as exc:
        raise StoreIo(str(exc)) from exc
    return FeatureBag.from_bytes(bag_id, blob)


def read_feature_store(path) -> tuple:
    """Load every bag listed in the manifest, in manifest order."""
    manifest = read_manifest(path)
    bags = [read_bag(path, b) for b in manifest.bag_ids]
    root = Path(path) / BAG_DIR
    if root.is_dir():
        on_disk = {p.name[: -len(BAG_SUFFIX)] for p in root.glob("*" + BAG_SUFFIX)}
        extra = on_disk - set(manifest.bag_ids)
        if extra:
            raise IdMismatch(f"bag files without manifest rows: {sorted(extra)[:5]}")
    return bags, manifest


@dataclass(frozen=True)
class TargetSpec:
    target_id: str
    positive_count: int
    labeled_count: int
    prevalence: float
    included: bool
    override: bool


def select_targets(manifest: CohortManifest, min_positives: int, overrides: Sequence[str] = ()) -> list:
    """Keep targets with at least ``min_positives`` positives, plus named overrides.

    NA labels count toward neither positives nor the prevalence denominator.
    """
    if min_positives < 1:
        raise ValueError("min_positives must be >= 1")
    unknown = set(overrides) - set(manifest.targets)
    if unknown:
        raise UnknownTarget(f"override names unknown targets: {sorted(unknown)}")
    specs = []
    for j, t in enumerate(manifest.targets):
        vals = [r.labels[j] for r in manifest.rows if r.labels[j] is not None]
        pos = sum(vals)
        prevalence = pos / len(vals) if vals else 0.0
        forced = t in overrides
        specs.append(TargetSpec(t, pos, len(vals), prevalence, pos >= min_positives or forced, forced))
    return specs
