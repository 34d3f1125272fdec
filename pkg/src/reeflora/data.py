"""Dataset construction: tiling, manifests, grouped splits, pixel statistics.

Manifests are JSON-lines files. The first line is a header object
``{"schema_version", "class_names", "tile_size"}``; every following line is one
tile record whose keys are exactly the :class:`TileRecord` fields. Relative
``tile_path`` values resolve against the manifest's directory.

Rasters are 8-bit RGB PNG, or binary PPM for synthetic fixtures.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import rng
from .errors import ConfigError, DataError, GeometryError
from .head import CLASS_NAMES

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TILE_SIZE = 512
SEASONS = ("dry", "wet")
RASTER_SUFFIXES = (".png", ".ppm")
SOURCES_FILE = "sources.json"
_SITE_RE = re.compile(r"^[A-Z]{3}$")


# -- rasters -------------------------------------------------------------------

def read_raster(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit RGB raster as a (H, W, 3) uint8 array."""
    path = Path(path)
    if path.suffix.lower() not in RASTER_SUFFIXES:
        raise DataError(f"{path}: unsupported raster format (use PNG or PPM)")
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L", "P", "RGBA"):
                raise DataError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except DataError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable raster ({exc})") from exc
    return arr


def raster_size(path: str | os.PathLike) -> tuple[int, int]:
    """(width, height) from the file header without decoding pixels."""
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable raster ({exc})") from exc


def write_raster(path: str | os.PathLike, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


# -- tiling ----------------------------------------------------------------------

def tile_offsets(extent: int, tile: int = TILE_SIZE) -> list[int]:
    """Evenly spaced offsets from 0 to extent - tile, rounded half-up.

    ``floor(extent / tile)`` tiles; neighbours overlap slightly when the extent
    is not a multiple of the tile size.
    """
    if extent < tile:
        raise GeometryError(f"extent {extent} is smaller than tile {tile}")
    n = extent // tile
    if n == 1:
        return [0]
    span = extent - tile
    return [(2 * i * span + (n - 1)) // (2 * (n - 1)) for i in range(n)]


def plan_tiles(width: int, height: int, tile: int = TILE_SIZE) -> list[tuple[int, int, int]]:
    """(tile_index, offset_x, offset_y), row-major over the tile grid."""
    if width < tile or height < tile:
        raise GeometryError(f"image {width}x{height} is smaller than tile {tile}x{tile}")
    xs, ys = tile_offsets(width, tile), tile_offsets(height, tile)
    return [(r * len(xs) + c, x, y) for r, y in enumerate(ys) for c, x in enumerate(xs)]


def tile_image(image: np.ndarray, tile: int = TILE_SIZE) -> list[tuple[int, int, np.ndarray]]:
    """Cut an (H, W, C) raster into (offset_x, offset_y, tile) triples."""
    h, w = image.shape[:2]
    return [(x, y, image[y:y + tile, x:x + tile]) for _, x, y in plan_tiles(w, h, tile)]


# -- records and manifests -----------------------------------------------------

@dataclass(frozen=True)
class TileRecord:
    tile_path: str
    source_image_id: str
    tile_index: int
    offset_x: int
    offset_y: int
    labels: tuple[int, ...]
    site: str
    season: str
    depth_m: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        if any(v not in (0, 1) for v in self.labels):
            raise DataError(f"{self.source_image_id}#{self.tile_index}: labels must be 0/1, got {self.labels}")
        if not _SITE_RE.match(self.site):
            raise DataError(f"{self.source_image_id}#{self.tile_index}: site {self.site!r} is not a 3-letter code")
        if self.season not in SEASONS:
            raise DataError(f"{self.source_image_id}#{self.tile_index}: season {self.season!r} not in {SEASONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TileRecord":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        missing = names - set(d) - {"depth_m"}
        if unknown or missing:
            raise DataError(f"tile record keys: unknown {sorted(unknown)}, missing {sorted(missing)}")
        return cls(**d)


@dataclass
class Manifest:
    records: list[TileRecord] = field(default_factory=list)
    class_names: tuple[str, ...] = CLASS_NAMES
    tile_size: int = TILE_SIZE
    schema_version: int = SCHEMA_VERSION
    root: Path | None = None  # directory relative tile paths resolve against; not serialized

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self) -> None:
        seen = set()
        for r in self.records:
            key = (r.source_image_id, r.tile_index)
            if key in seen:
                raise DataError(f"duplicate tile {key[0]}#{key[1]} in manifest")
            seen.add(key)
            if len(r.labels) != len(self.class_names):
                raise DataError(f"{key[0]}#{key[1]}: {len(r.labels)} labels for {len(self.class_names)} classes")

    def source_ids(self) -> list[str]:
        return list(dict.fromkeys(r.source_image_id for r in self.records))

    def sites(self) -> list[str]:
        return sorted({r.site for r in self.records})

    def subset(self, records: Iterable[TileRecord]) -> "Manifest":
        return replace(self, records=list(records))

    def resolve(self, record: TileRecord) -> Path:
        p = Path(record.tile_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def labels(self) -> np.ndarray:
        return np.array([r.labels for r in self.records], dtype=np.int8).reshape(len(self.records), -1)

    def header(self) -> dict:
        return {"schema_version": self.schema_version, "class_names": list(self.class_names),
                "tile_size": self.tile_size}

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"{path}: cannot read manifest ({exc.strerror or exc})") from exc
        lines = [ln for ln in lines if ln.strip()]
        if not lines:
            raise DataError(f"{path}: empty manifest (no header line)")
        try:
            header = json.loads(lines[0])
            records = [TileRecord.from_dict(json.loads(ln)) for ln in lines[1:]]
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest line ({exc})") from exc
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from exc
        if header.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"{path}: schema_version {header.get('schema_version')!r}, expected {SCHEMA_VERSION}")
        m = cls(records=records, class_names=tuple(header.get("class_names", CLASS_NAMES)),
                tile_size=int(header.get("tile_size", TILE_SIZE)), root=path.parent)
        m.validate()
        return m


# -- manifest building ------------------------------------------------------------

@dataclass
class SourceImage:
    image_id: str
    width: int
    height: int
    site: str = "UNK"
    season: str = "dry"
    depth_m: float | None = None
    tile_labels: dict[int, tuple[int, ...]] = field(default_factory=dict)
    path: Path | None = None


def tile_name(image_id: str, index: int) -> str:
    return f"{image_id}_{index:02d}.png"


def build_manifest(sources: Sequence[SourceImage], tile: int = TILE_SIZE, tile_dir: str = "tiles",
                   class_names: Sequence[str] = CLASS_NAMES) -> Manifest:
    """Manifest rows for every tile of every source, without touching pixels."""
    empty = (0,) * len(class_names)
    records = []
    for src in sorted(sources, key=lambda s: s.image_id):
        for idx, x, y in plan_tiles(src.width, src.height, tile):
            records.append(TileRecord(
                tile_path=f"{tile_dir}/{tile_name(src.image_id, idx)}" if tile_dir else tile_name(src.image_id, idx),
                source_image_id=src.image_id, tile_index=idx, offset_x=x, offset_y=y,
                labels=src.tile_labels.get(idx, empty), site=src.site, season=src.season,
                depth_m=src.depth_m))
    m = Manifest(records=records, class_names=tuple(class_names), tile_size=tile)
    m.validate()
    return m


def _metadata_labels(meta: dict, image_id: str, n_classes: int) -> dict[int, tuple[int, ...]]:
    labels = meta.get("labels", {})
    if isinstance(labels, list):
        labels = {i: v for i, v in enumerate(labels)}
    out = {}
    for k, v in labels.items():
        vec = tuple(int(b) for b in v)
        if len(vec) != n_classes:
            raise DataError(f"{SOURCES_FILE}: {image_id} tile {k} has {len(vec)} labels, expected {n_classes}")
        out[int(k)] = vec
    return out


def scan_sources(img_dir: str | os.PathLike, class_names: Sequence[str] = CLASS_NAMES) -> list[SourceImage]:
    """Source images in a directory, with optional ``sources.json`` metadata.

    ``sources.json`` maps image id (file stem) to
    ``{"site", "season", "depth_m", "labels"}`` where ``labels`` is either a
    list of per-tile label vectors or a ``{tile_index: vector}`` object.
    """
    img_dir = Path(img_dir)
    if not img_dir.is_dir():
        raise DataError(f"{img_dir}: not a directory")
    meta_path = img_dir / SOURCES_FILE
    meta = {}
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{meta_path}: invalid JSON ({exc})") from exc
    sources = []
    for path in sorted(img_dir.iterdir()):
        if path.suffix.lower() not in RASTER_SUFFIXES:
            continue
        w, h = raster_size(path)
        info = meta.get(path.stem, {})
        unknown = set(info) - {"site", "season", "depth_m", "labels"}
        if unknown:
            raise DataError(f"{meta_path}: {path.stem} has unknown keys {sorted(unknown)}")
        sources.append(SourceImage(
            image_id=path.stem, width=w, height=h, site=info.get("site", "UNK"),
            season=info.get("season", "dry"), depth_m=info.get("depth_m"),
            tile_labels=_metadata_labels(info, path.stem, len(class_names)), path=path))
    return sources


def tile_directory(img_dir: str | os.PathLike, out_dir: str | os.PathLike, tile: int = TILE_SIZE) -> Manifest:
    """Cut every source raster into tiles under ``out_dir/tiles`` and write ``out_dir/manifest.jsonl``."""
    out_dir = Path(out_dir)
    sources = scan_sources(img_dir)
    if not sources:
        raise DataError(f"{img_dir}: no PNG/PPM images found")
    manifest = build_manifest(sources, tile)
    by_id = {s.image_id: s for s in sources}
    for src_id in manifest.source_ids():
        raster = read_raster(by_id[src_id].path)
        for idx, (x, y, patch) in enumerate(tile_image(raster, tile)):
            write_raster(out_dir / "tiles" / tile_name(src_id, idx), patch)
    manifest.root = out_dir
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def load_tiles(manifest: Manifest, strict: bool = True) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Stack tile rasters as float (N, H, W, 3) in [0, 1] plus labels.

    With ``strict=False`` unreadable tiles are skipped and logged; the third
    element lists the manifest indices actually loaded.
    """
    imgs, keep = [], []
    for i, rec in enumerate(manifest.records):
        try:
            arr = read_raster(manifest.resolve(rec))
        except DataError:
            if strict:
                raise
            log.warning("skipping unreadable tile %s", manifest.resolve(rec))
            continue
        imgs.append(arr)
        keep.append(i)
    if not imgs:
        raise DataError("no readable tiles in manifest")
    labels = manifest.labels()[keep]
    return np.stack(imgs).astype(np.float32) / np.float32(255.0), labels, keep


# -- splits ----------------------------------------------------------------------

SPLIT_MODES = ("mixup", "season_transfer", "site_holdout")


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "mixup"
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    holdout_sites: tuple[str, ...] = ()
    train_season: str = "dry"

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "holdout_sites", tuple(s.upper() for s in self.holdout_sites))
        if self.mode not in SPLIT_MODES:
            raise ConfigError(f"split mode {self.mode!r} not in {SPLIT_MODES}")
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ConfigError(f"split ratios must be three positive numbers, got {self.ratios}")
        if self.mode == "mixup" and not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ConfigError(f"mixup ratios must sum to 1, got {sum(self.ratios)}")
        if self.mode == "site_holdout" and not self.holdout_sites:
            raise ConfigError("site_holdout needs at least one holdout site")
        if self.train_season not in SEASONS:
            raise ConfigError(f"train_season {self.train_season!r} not in {SEASONS}")


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer parts of ``n * ratios`` summing to ``n``; ties favour earlier parts."""
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _shuffled(ids: Iterable[str], gen: np.random.Generator) -> list[str]:
    ids = sorted(set(ids))
    return [ids[i] for i in gen.permutation(len(ids))]


def split_grouped(manifest: Manifest, spec: SplitSpec) -> tuple[Manifest, Manifest, Manifest]:
    """Partition by source image so no photo contributes tiles to two splits."""
    if not len(manifest):
        raise DataError("cannot split an empty manifest")
    gen = rng.stream(spec.seed, "split")
    first = {}
    for r in manifest.records:
        first.setdefault(r.source_image_id, r)

    if spec.mode == "mixup":
        ids = _shuffled(first, gen)
        n_train, n_val, _ = largest_remainder(len(ids), spec.ratios)
        groups = (ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:])
    else:
        if spec.mode == "season_transfer":
            pool = [i for i, r in first.items() if r.season == spec.train_season]
            test = [i for i, r in first.items() if r.season != spec.train_season]
        else:
            present = {r.site for r in first.values()}
            missing = [s for s in spec.holdout_sites if s not in present]
            if missing:
                raise ConfigError(f"holdout sites not in manifest: {missing} (have {sorted(present)})")
            hold = set(spec.holdout_sites)
            pool = [i for i, r in first.items() if r.site not in hold]
            test = [i for i, r in first.items() if r.site in hold]
        ids = _shuffled(pool, gen)
        n_train, _ = largest_remainder(len(ids), spec.ratios[:2])
        groups = (ids[:n_train], ids[n_train:], test)

    out = []
    for name, group in zip(("train", "val", "test"), groups):
        members = set(group)
        part = manifest.subset(r for r in manifest.records if r.source_image_id in members)
        if not len(part):
            raise DataError(f"{spec.mode} split leaves the {name} set empty")
        out.append(part)
    return tuple(out)


# -- statistics --------------------------------------------------------------------

CHANNELS = ("red", "green", "blue")


@dataclass
class ChannelHistogram:
    counts: np.ndarray            # (3, 256) int64
    sampled: list[str]            # tile paths, in sample order
    errors: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"channels": list(CHANNELS), "bins": 256, "sample_size": len(self.sampled),
                "counts": {c: self.counts[i].tolist() for i, c in enumerate(CHANNELS)},
                "errors": self.errors}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "bin", "count"])
        for i, c in enumerate(CHANNELS):
            for b in range(256):
                w.writerow([c, b, int(self.counts[i, b])])
        return buf.getvalue()


def channel_histogram(manifest: Manifest, sample_n: int, seed: int = 0) -> ChannelHistogram:
    """Per-channel 256-bin pixel counts over a seeded random sample of tiles.

    Unreadable tiles are reported in ``errors`` and do not stop the run.
    """
    n = min(int(sample_n), len(manifest))
    gen = rng.stream(seed, "histogram")
    picks = sorted(gen.choice(len(manifest), size=n, replace=False).tolist()) if n else []
    counts = np.zeros((3, 256), dtype=np.int64)
    sampled, errors = [], []
    for i in picks:
        rec = manifest.records[i]
        path = manifest.resolve(rec)
        try:
            arr = read_raster(path)
        except DataError as exc:
            errors.append({"tile_path": str(path), "error": str(exc)})
            continue
        for c in range(3):
            counts[c] += np.bincount(arr[..., c].reshape(-1), minlength=256)
        sampled.append(rec.tile_path)
    return ChannelHistogram(counts=counts, sampled=sampled, errors=errors)


def composition_report(manifest: Manifest) -> dict:
    """Per-site positive-label counts and composition percentages."""
    if not len(manifest):
        raise DataError("composition report needs a non-empty manifest")
    names = list(manifest.class_names)
    rows = []
    for site in manifest.sites():
        recs = [r for r in manifest.records if r.site == site]
        counts = np.array([r.labels for r in recs], dtype=np.int64).sum(axis=0)
        total = int(counts.sum())
        pct = [round(100.0 * c / total, 2) if total else 0.0 for c in counts]
        rows.append({"site": site, "tiles": len(recs), "total_labels": total, "empty": total == 0,
                     "counts": dict(zip(names, (int(c) for c in counts))),
                     "percent": dict(zip(names, pct))})
    return {"class_names": names, "sites": rows}
