"""Multi-band raster tiles: MBT binary format, preprocessing, histograms and CSV manifests"""
import csv
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import cv2
import numpy as np
from tqdm import tqdm

from core.errors import CorruptionError, FormatError, ManifestError, PreconditionError, ShapeError

MAGIC = b'MBT1'
HEADER = struct.Struct('<4s4I')
DTYPE_CODES = {0: np.dtype('<u1'), 1: np.dtype('<f4')}
NUM_CLASSES = 5
NORM_SCALE = 127.5
LABEL_SUFFIX = '.labels.mbt'
DOMAINS = ('source', 'target')
SPLITS = ('train', 'val')
MANIFEST_HEADER = ['path', 'domain', 'split', 'label_path']

logger = logging.getLogger('hrsem.data')


@dataclass(eq=False)
class Tile:
    """A bands x height x width raster with optional per-pixel class ids"""
    pixels: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or min(self.pixels.shape) < 1:
            raise ShapeError(f"Tile pixels must be a non-empty bands x H x W array, got {self.pixels.shape}")
        if self.pixels.dtype == np.uint8:
            pass
        elif self.pixels.dtype == np.float32:
            if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
                raise PreconditionError("float32 tile values must lie in [-1, 1]")
        else:
            raise PreconditionError(f"Unsupported tile dtype: {self.pixels.dtype}")

        if self.labels is not None:
            if self.labels.shape != self.pixels.shape[1:]:
                raise ShapeError(f"Labels {self.labels.shape} do not match tile {self.pixels.shape[1:]}")
            if self.labels.dtype != np.uint8:
                raise PreconditionError(f"Labels must be uint8, got {self.labels.dtype}")
            if self.labels.size and self.labels.max() >= NUM_CLASSES:
                raise PreconditionError(f"Label ids must be in 0..{NUM_CLASSES - 1}")

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def dtype(self) -> np.dtype:
        return self.pixels.dtype

    def equals(self, other: 'Tile') -> bool:
        if self.dtype != other.dtype or self.pixels.shape != other.pixels.shape:
            return False
        if not np.array_equal(self.pixels, other.pixels):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


def label_path_for(path) -> Path:
    """Sibling path holding the label raster of a tile: scene_0001.mbt -> scene_0001.labels.mbt"""
    path = Path(path)
    return path.with_name(path.name[:-len(path.suffix)] + LABEL_SUFFIX if path.suffix else path.name + LABEL_SUFFIX)


def _encode(array: np.ndarray) -> bytes:
    code = 0 if array.dtype == np.uint8 else 1
    bands, height, width = array.shape
    return HEADER.pack(MAGIC, bands, height, width, code) + array.astype(DTYPE_CODES[code]).tobytes(order='C')


def _decode(data: bytes, path) -> np.ndarray:
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, bands, height, width, code = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if bands == 0 or height == 0 or width == 0:
        raise FormatError(f"{path}: empty dimensions {bands}x{height}x{width}")

    dtype = DTYPE_CODES[code]
    expected = bands * height * width * dtype.itemsize
    payload = data[HEADER.size:]
    if len(payload) != expected:
        raise CorruptionError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    array = np.frombuffer(payload, dtype=dtype).reshape(bands, height, width)
    return array.astype(dtype.newbyteorder('='), copy=True)


def write_tile(tile: Tile, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode(tile.pixels))

    label_path = label_path_for(path)
    if tile.labels is not None:
        label_path.write_bytes(_encode(tile.labels[None, :, :]))
    else:
        label_path.unlink(missing_ok=True)


def read_labels(path) -> np.ndarray:
    array = _decode(Path(path).read_bytes(), path)
    if array.shape[0] != 1 or array.dtype != np.uint8:
        raise FormatError(f"{path}: label tiles must be single-band uint8")
    if array.max() >= NUM_CLASSES:
        raise FormatError(f"{path}: label ids outside 0..{NUM_CLASSES - 1}")
    return array[0]


def read_tile(path, label_path=None) -> Tile:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Tile not found: {path}")
    pixels = _decode(path.read_bytes(), path)

    label_path = Path(label_path) if label_path else label_path_for(path)
    labels = read_labels(label_path) if label_path.exists() and label_path != path else None
    return Tile(pixels=pixels, labels=labels)


def normalize(tile: Tile) -> Tile:
    if tile.dtype != np.uint8:
        raise PreconditionError(f"normalize expects a uint8 tile, got {tile.dtype}")
    pixels = (tile.pixels.astype(np.float32) / np.float32(NORM_SCALE) - np.float32(1.0)).astype(np.float32)
    return Tile(pixels=pixels, labels=tile.labels)


def denormalize(tile: Tile) -> Tile:
    if tile.dtype != np.float32:
        raise PreconditionError(f"denormalize expects a float32 tile, got {tile.dtype}")
    pixels = np.clip(np.rint((tile.pixels.astype(np.float64) + 1.0) * NORM_SCALE), 0, 255).astype(np.uint8)
    return Tile(pixels=pixels, labels=tile.labels)


def to_unit_range(tile: Tile) -> Tile:
    return normalize(tile) if tile.dtype == np.uint8 else tile


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian of std sigma truncated at ceil(4 sigma), summing to 1"""
    radius = int(math.ceil(4.0 * sigma))
    return cv2.getGaussianKernel(2 * radius + 1, sigma, cv2.CV_64F)


def gaussian_smooth(tile: Tile, sigma: float) -> Tile:
    """Spatial-only Gaussian smoothing, each band independently, reflected borders"""
    if not sigma > 0:
        raise PreconditionError(f"sigma must be positive, got {sigma}")

    kernel = gaussian_kernel(sigma)
    smoothed = np.stack([
        cv2.sepFilter2D(band.astype(np.float64), cv2.CV_64F, kernel, kernel, borderType=cv2.BORDER_REFLECT)
        for band in tile.pixels
    ])

    if tile.dtype == np.uint8:
        pixels = np.clip(np.rint(smoothed), 0, 255).astype(np.uint8)
    else:
        pixels = np.clip(smoothed, -1.0, 1.0).astype(np.float32)
    return Tile(pixels=pixels, labels=tile.labels)


def histogram(tiles: Iterable[Tile], n_bands: int = 4) -> np.ndarray:
    """Per-band counts of each uint8 value, summed over all tiles -> (bands, 256) int64"""
    counts = None
    for tile in tiles:
        if tile.dtype != np.uint8:
            raise PreconditionError("histogram expects uint8 tiles")
        if counts is None:
            counts = np.zeros((tile.bands, 256), dtype=np.int64)
        elif tile.bands != counts.shape[0]:
            raise ShapeError(f"Mixed band counts: {tile.bands} vs {counts.shape[0]}")
        for b, band in enumerate(tile.pixels):
            counts[b] += np.bincount(band.ravel(), minlength=256)

    return counts if counts is not None else np.zeros((n_bands, 256), dtype=np.int64)


def write_histogram_csv(counts: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['band', 'value', 'count'])
        for band in range(counts.shape[0]):
            for value in range(counts.shape[1]):
                writer.writerow([band, value, int(counts[band, value])])


def read_histogram_csv(path) -> np.ndarray:
    with open(path, newline='') as f:
        rows = list(csv.DictReader(f))
    if not rows or set(rows[0]) != {'band', 'value', 'count'}:
        raise FormatError(f"{path}: expected columns band,value,count")
    try:
        parsed = [(int(r['band']), int(r['value']), int(r['count'])) for r in rows]
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: non-integer histogram entry ({e})")
    for line, (band, value, count) in enumerate(parsed, start=2):
        if band < 0 or not 0 <= value < 256 or count < 0:
            raise FormatError(f"{path}:{line}: band {band}, value {value}, count {count} out of range")
    counts = np.zeros((max(b for b, _, _ in parsed) + 1, 256), dtype=np.int64)
    for band, value, count in parsed:
        counts[band, value] = count
    return counts


@dataclass
class ManifestEntry:
    path: Path
    domain: str
    split: str
    label_path: Optional[Path] = None

    def load(self) -> Tile:
        return read_tile(self.path, self.label_path)


@dataclass
class Manifest:
    entries: List[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def select(self, domain: Optional[str] = None, split: Optional[str] = None) -> 'Manifest':
        return Manifest([e for e in self.entries
                         if (domain is None or e.domain == domain) and (split is None or e.split == split)])

    def require_labels(self) -> None:
        missing = [str(e.path) for e in self.entries if e.label_path is None]
        if missing:
            raise ManifestError(f"{len(missing)} entries lack label_path, e.g. {missing[0]}")

    def check_paths(self) -> None:
        for e in self.entries:
            for p in filter(None, (e.path, e.label_path)):
                if not Path(p).is_file():
                    raise ManifestError(f"Manifest references a missing file: {p}")

    @classmethod
    def load(cls, path) -> 'Manifest':
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"Manifest not found: {path}")
        root = path.parent
        with open(path, newline='') as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != MANIFEST_HEADER:
                raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
            entries = []
            for line, row in enumerate(reader, start=2):
                if row['domain'] not in DOMAINS or row['split'] not in SPLITS:
                    raise ManifestError(f"{path}:{line}: bad domain/split {row['domain']!r}/{row['split']!r}")
                entries.append(ManifestEntry(
                    path=root / row['path'],
                    domain=row['domain'],
                    split=row['split'],
                    label_path=root / row['label_path'] if row['label_path'] else None,
                ))
        return cls(entries)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        root = path.parent.resolve()

        def rel(p):
            return '' if p is None else os.path.relpath(Path(p).resolve(), root)

        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(MANIFEST_HEADER)
            for e in self.entries:
                writer.writerow([rel(e.path), e.domain, e.split, rel(e.label_path)])


def prepare_dataset(manifest: Manifest, out_dir, smooth_sigma: Optional[float] = 1.0,
                    smooth_domains: Sequence[str] = ('target',), quiet: bool = False) -> Manifest:
    """Optionally smooth the chosen domains, normalize everything to float32 and mirror the manifest.

    Per-domain histograms are written before (``histogram_<domain>_raw.csv``) and after
    (``histogram_<domain>.csv``) smoothing, both on the 8-bit values.
    """
    out_dir = Path(out_dir)
    raw = {d: None for d in DOMAINS}
    smoothed = {d: None for d in DOMAINS}

    def accumulate(store, domain, tile):
        counts = histogram([tile])
        store[domain] = counts if store[domain] is None else store[domain] + counts

    entries = []
    for entry in tqdm(manifest.entries, desc='prepare', disable=quiet):
        tile = entry.load()
        if tile.dtype != np.uint8:
            raise PreconditionError(f"prepare expects raw uint8 tiles, got {tile.dtype} in {entry.path}")
        accumulate(raw, entry.domain, tile)
        if smooth_sigma and entry.domain in smooth_domains:
            tile = gaussian_smooth(tile, smooth_sigma)
        accumulate(smoothed, entry.domain, tile)

        out_path = out_dir / entry.domain / entry.path.name
        write_tile(normalize(tile), out_path)
        entries.append(ManifestEntry(path=out_path, domain=entry.domain, split=entry.split,
                                     label_path=label_path_for(out_path) if tile.labels is not None else None))

    prepared = Manifest(entries)
    prepared.save(out_dir / 'manifest.csv')
    for domain in DOMAINS:
        if raw[domain] is not None:
            write_histogram_csv(raw[domain], out_dir / f'histogram_{domain}_raw.csv')
            write_histogram_csv(smoothed[domain], out_dir / f'histogram_{domain}.csv')
    logger.info(f"Prepared {len(entries)} tiles into {out_dir} "
                f"(smoothing sigma={smooth_sigma} on {', '.join(smooth_domains) or 'no domain'})")
    return prepared
