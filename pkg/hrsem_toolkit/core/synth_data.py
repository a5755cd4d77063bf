"""Seeded two-domain synthetic land-cover tiles with controllable style shift"""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from tqdm import tqdm

from core.errors import GenerationError, PreconditionError
from core.raster_io import NUM_CLASSES, Manifest, ManifestEntry, Tile, label_path_for, write_tile
from utils.serialization import dataclass_from_dict

logger = logging.getLogger('hrsem.data')

CLASS_NAMES = ('background', 'vegetation', 'hydro', 'roads', 'buildings')
BACKGROUND, VEGETATION, HYDRO, ROADS, BUILDINGS = range(NUM_CLASSES)

# blue, green, red, near-infrared
PALETTE = np.array([
    [110, 120, 130, 140],   # background: bare soil / fields
    [60, 90, 70, 170],      # vegetation: bright NIR
    [90, 80, 50, 30],       # hydro: dark NIR
    [140, 140, 140, 110],   # roads
    [180, 170, 165, 150],   # buildings
], dtype=np.float64)

# label share profile of the labelled imagery (fractions)
SOURCE_PROPORTIONS = (0.487, 0.382, 0.093, 0.018, 0.020)

PROPORTION_TOLERANCE = 0.05
MAX_LAYOUT_ATTEMPTS = 10


@dataclass
class StyleSpec:
    gains: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    biases: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    noise_std: float = 0.0
    smooth_sigma: Optional[float] = None
    # coarse value quantisation, produces a spiky histogram like raw 8-bit products
    quantize_step: Optional[int] = None

    def validate(self) -> None:
        if len(self.gains) != PALETTE.shape[1] or len(self.biases) != PALETTE.shape[1]:
            raise PreconditionError(f"Style needs {PALETTE.shape[1]} gains and biases")
        if any(g == 0 for g in self.gains):
            raise PreconditionError("Style gains must be nonzero")
        if self.noise_std < 0:
            raise PreconditionError("noise_std must be >= 0")
        if self.smooth_sigma is not None and self.smooth_sigma <= 0:
            raise PreconditionError("smooth_sigma must be positive when set")
        if self.quantize_step is not None and self.quantize_step < 1:
            raise PreconditionError("quantize_step must be >= 1 when set")


@dataclass
class SceneSpec:
    seed: int = 0
    size: Tuple[int, int] = (64, 64)
    class_proportions: Tuple[float, ...] = SOURCE_PROPORTIONS
    style: StyleSpec = field(default_factory=StyleSpec)

    def validate(self) -> None:
        if len(self.size) != 2 or min(self.size) < 32:
            raise PreconditionError(f"Scene size must be at least 32x32, got {self.size}")
        props = np.asarray(self.class_proportions, dtype=np.float64)
        if props.shape != (NUM_CLASSES,) or np.any(props < 0):
            raise PreconditionError(f"Need {NUM_CLASSES} nonnegative class proportions")
        if abs(props.sum() - 1.0) > 1e-6:
            raise PreconditionError(f"Class proportions must sum to 1, got {props.sum():.6f}")
        self.style.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'SceneSpec':
        return dataclass_from_dict(cls, data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> 'SceneSpec':
        return cls.from_dict(json.loads(Path(path).read_text()))


def _paint_lakes(label: np.ndarray, target_px: int, rng: np.random.Generator) -> None:
    h, w = label.shape
    for _ in range(50):
        remaining = target_px - int((label == HYDRO).sum())
        if remaining <= 0:
            break
        radius = min(np.sqrt(remaining / np.pi), min(h, w) / 4)
        if radius < 1.5:
            break
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        n_vertices = int(rng.integers(8, 13))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
        radii = radius * rng.uniform(0.75, 1.25, n_vertices)
        pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        cv2.fillPoly(label, [np.round(pts).astype(np.int32)], HYDRO)


def _edge_point(h: int, w: int, rng: np.random.Generator) -> Tuple[float, float]:
    side = rng.integers(4)
    if side == 0:
        return rng.uniform(0, w), 0.0
    if side == 1:
        return rng.uniform(0, w), h - 1.0
    if side == 2:
        return 0.0, rng.uniform(0, h)
    return w - 1.0, rng.uniform(0, h)


def _paint_roads(label: np.ndarray, target_px: int, rng: np.random.Generator) -> None:
    h, w = label.shape
    for _ in range(100):
        current = int((label == ROADS).sum())
        if current >= target_px:
            break
        thickness = min(int(rng.integers(1, 4)), max(1, target_px // max(h, w)))
        # stop before one more road would overshoot by more than half its area
        if current + thickness * max(h, w) / 2 > target_px and current > 0:
            break
        start, end = _edge_point(h, w, rng), _edge_point(h, w, rng)
        mid = (rng.uniform(0, w), rng.uniform(0, h))
        pts = np.round(np.array([start, mid, end])).astype(np.int32)
        cv2.polylines(label, [pts], isClosed=False, color=ROADS, thickness=thickness)


def _paint_buildings(label: np.ndarray, target_px: int, rng: np.random.Generator) -> None:
    h, w = label.shape
    scale = max(1, min(h, w) // 64)
    for _ in range(2000):
        if int((label == BUILDINGS).sum()) >= target_px:
            break
        bh, bw = (int(rng.integers(2, 6)) * scale for _ in range(2))
        y, x = int(rng.integers(0, h - bh)), int(rng.integers(0, w - bw))
        patch = label[y:y + bh, x:x + bw]
        patch[patch == BACKGROUND] = BUILDINGS


def _paint_vegetation(label: np.ndarray, target_px: int, rng: np.random.Generator) -> None:
    h, w = label.shape
    noise = rng.standard_normal((h, w)).astype(np.float32)
    noise = cv2.GaussianBlur(noise, (0, 0), sigmaX=max(h, w) / 16, borderType=cv2.BORDER_REFLECT)
    free = np.flatnonzero(label.ravel() == BACKGROUND)
    if target_px <= 0 or free.size == 0:
        return
    # the highest-valued free pixels become vegetation blobs
    order = np.argsort(-noise.ravel()[free], kind='stable')
    label.ravel()[free[order[:target_px]]] = VEGETATION


def _layout(size: Tuple[int, int], proportions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = size
    targets = np.round(proportions * h * w).astype(int)
    label = np.zeros((h, w), dtype=np.uint8)
    _paint_lakes(label, targets[HYDRO], rng)
    _paint_roads(label, targets[ROADS], rng)
    _paint_buildings(label, targets[BUILDINGS], rng)
    _paint_vegetation(label, targets[VEGETATION], rng)
    return label


def class_shares(labels: np.ndarray) -> np.ndarray:
    return np.bincount(labels.ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES] / labels.size


def render(label: np.ndarray, style: StyleSpec, rng: np.random.Generator) -> np.ndarray:
    """Colour a label map with the class palette, then apply the per-band style"""
    image = PALETTE[label].transpose(2, 0, 1)
    image = image * np.asarray(style.gains, dtype=np.float64)[:, None, None] \
        + np.asarray(style.biases, dtype=np.float64)[:, None, None]
    if style.noise_std > 0:
        image = image + rng.normal(0.0, style.noise_std, size=image.shape)
    if style.smooth_sigma:
        image = np.stack([cv2.GaussianBlur(band, (0, 0), sigmaX=style.smooth_sigma,
                                           borderType=cv2.BORDER_REFLECT) for band in image])
    if style.quantize_step and style.quantize_step > 1:
        image = np.round(image / style.quantize_step) * style.quantize_step
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec) -> Tuple[Tile, Tile]:
    """Return (label tile, rendered uint8 tile) for one seeded scene"""
    spec.validate()
    proportions = np.asarray(spec.class_proportions, dtype=np.float64)

    best_error = None
    for attempt in range(MAX_LAYOUT_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        label = _layout(tuple(spec.size), proportions, rng)
        error = float(np.abs(class_shares(label) - proportions).max())
        if error <= PROPORTION_TOLERANCE:
            break
        best_error = error if best_error is None else min(best_error, error)
    else:
        raise GenerationError(
            f"Scene seed {spec.seed}: class proportions not realised within "
            f"±{PROPORTION_TOLERANCE * 100:.0f} points after {MAX_LAYOUT_ATTEMPTS} attempts "
            f"(best deviation {best_error * 100:.1f} points)")

    render_rng = np.random.default_rng([spec.seed, MAX_LAYOUT_ATTEMPTS + 1])
    pixels = render(label, spec.style, render_rng)
    label_tile = Tile(pixels=label[None, :, :].copy(), labels=label)
    return label_tile, Tile(pixels=pixels, labels=label)


def generate_dataset(n_scenes: int, spec_source: SceneSpec, spec_target: SceneSpec, out_dir,
                     val_fraction: float = 0.0, quiet: bool = False) -> Manifest:
    """Write n_scenes tiles per domain plus labels, a manifest and the label distribution"""
    if n_scenes < 1:
        raise PreconditionError("n_scenes must be >= 1")
    if spec_source.seed != spec_target.seed or tuple(spec_source.size) != tuple(spec_target.size):
        raise PreconditionError(f"Paired domains need one layout seed and size, got seeds "
                                f"{spec_source.seed}/{spec_target.seed}, sizes {spec_source.size}/{spec_target.size}")
    if not np.allclose(spec_source.class_proportions, spec_target.class_proportions, atol=1e-9):
        raise PreconditionError("Source and target specs must share class proportions")
    spec_source.validate()
    spec_target.validate()

    out_dir = Path(out_dir)
    n_val = int(round(n_scenes * val_fraction))
    entries = []
    for domain, spec in (('source', spec_source), ('target', spec_target)):
        for i in tqdm(range(n_scenes), desc=f'synth {domain}', disable=quiet):
            scene = SceneSpec(seed=spec.seed + i, size=spec.size,
                              class_proportions=spec.class_proportions, style=spec.style)
            _, tile = generate_scene(scene)
            path = out_dir / domain / f'scene_{i:05d}.mbt'
            write_tile(tile, path)
            split = 'val' if i >= n_scenes - n_val else 'train'
            entries.append(ManifestEntry(path=path, domain=domain, split=split, label_path=label_path_for(path)))

    manifest = Manifest(entries)
    manifest.save(out_dir / 'manifest.csv')
    spec_source.save(out_dir / 'source_spec.json')
    spec_target.save(out_dir / 'target_spec.json')
    write_label_distribution(manifest, out_dir / 'label_distribution.csv')
    logger.info(f"Generated {len(entries)} tiles in {out_dir}")
    return manifest


def label_distribution(entries: Sequence[ManifestEntry]) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for e in entries:
        counts += np.bincount(e.load().labels.ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    return counts / max(1, counts.sum())


def write_label_distribution(manifest: Manifest, path) -> None:
    rows: List[list] = []
    for domain in ('source', 'target'):
        entries = manifest.select(domain=domain).entries
        if entries:
            shares = label_distribution(entries)
            rows.extend([domain, CLASS_NAMES[k], f'{shares[k]:.6f}'] for k in range(NUM_CLASSES))
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['domain', 'class', 'share'])
        writer.writerows(rows)
