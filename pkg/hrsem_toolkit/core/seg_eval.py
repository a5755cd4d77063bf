"""Downstream segmentation: mixed training set, compact U-Net, poly LR schedule, IoU evaluation"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from core.da_trainer import resolve_device
from core.errors import CheckpointError, ConfigError, ManifestError, PreconditionError, ShapeError
from core.losses import LossLog, check_finite
from core.networks import ConvBlock, UpBlock, init_weights, seeded_build
from core.raster_io import NUM_CLASSES, Manifest, ManifestEntry, to_unit_range
from core.synth_data import CLASS_NAMES
from utils.serialization import dataclass_from_dict, to_json_dict

logger = logging.getLogger('hrsem.seg')

MIX_MODES = ('mixed', 'stylized', 'source')
RESULTS_HEADER = ['model', 'miou'] + list(CLASS_NAMES)
SEG_LOG_HEADER = ['iter', 'lr', 'loss']


@dataclass
class SegConfig:
    lr_base: float = 1e-4
    weight_decay: float = 5e-4
    power: float = 0.9
    batch_size: int = 8
    iter_max: int = 3000
    num_classes: int = NUM_CLASSES
    in_channels: int = 4
    backbone: str = 'unet'
    widths: Tuple[int, ...] = (16, 32, 64)
    mix_mode: str = 'mixed'
    log_every: int = 100
    num_workers: int = 0
    device: str = 'auto'
    seed: int = 0

    def validate(self) -> None:
        if not self.power > 0:
            raise ConfigError(f"Poly power must be positive, got {self.power}")
        if self.batch_size < 1 or self.iter_max < 1:
            raise ConfigError("batch_size and iter_max must be >= 1")
        if not self.lr_base > 0 or self.weight_decay < 0:
            raise ConfigError("lr_base must be positive and weight_decay >= 0")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"The label set has {NUM_CLASSES} classes")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"Unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ConfigError("The backbone needs at least two positive widths")
        if self.mix_mode not in MIX_MODES:
            raise ConfigError(f"mix_mode must be one of {MIX_MODES}")


def poly_lr(cfg: SegConfig, iteration: int) -> float:
    if not 0 <= iteration <= cfg.iter_max:
        raise PreconditionError(f"Iteration {iteration} outside [0, {cfg.iter_max}]")
    return cfg.lr_base * (1.0 - iteration / cfg.iter_max) ** cfg.power


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions"""
    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def add(self, prediction: np.ndarray, truth: np.ndarray) -> 'ConfusionMatrix':
        if prediction.shape != truth.shape:
            raise ShapeError(f"Prediction {prediction.shape} and truth {truth.shape} differ")
        n = self.n_classes
        index = truth.astype(np.int64).ravel() * n + prediction.astype(np.int64).ravel()
        self.counts += np.bincount(index, minlength=n * n)[:n * n].reshape(n, n)
        return self

    def __add__(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where a class is absent from both truth and prediction"""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        iou = self.iou()
        return float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else float('nan')

    def pixel_accuracy(self) -> float:
        return float(np.diag(self.counts).sum() / max(1, self.total))

    def class_accuracy(self) -> np.ndarray:
        support = self.counts.sum(axis=1)
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(support > 0, np.diag(self.counts) / support, np.nan)


@dataclass
class TrainingSet:
    manifest: Manifest
    band_means: Tuple[float, ...]


def band_means(entries: Sequence[ManifestEntry]) -> Tuple[float, ...]:
    """Per-band arithmetic mean of normalized pixel values over all tiles"""
    sums, count = None, 0
    for e in entries:
        pixels = to_unit_range(e.load()).pixels.astype(np.float64)
        band_sums = pixels.reshape(pixels.shape[0], -1).sum(axis=1)
        sums = band_sums if sums is None else sums + band_sums
        count += pixels.shape[1] * pixels.shape[2]
    if sums is None:
        raise ManifestError("Cannot compute band means of an empty training set")
    return tuple(float(v) for v in sums / count)


def prepare_training_set(source: Manifest, stylized: Optional[Union[Manifest, str, Path]] = None,
                         mix_mode: str = 'mixed') -> TrainingSet:
    """Pair every labelled source tile with its stylized counterpart (matched by file name)"""
    if mix_mode not in MIX_MODES:
        raise ConfigError(f"mix_mode must be one of {MIX_MODES}")
    originals = source.select(domain='source', split='train').entries
    if not originals:
        raise ManifestError("No source training tiles")
    Manifest(originals).require_labels()

    entries: List[ManifestEntry] = []
    if mix_mode in ('mixed', 'source'):
        entries.extend(originals)
    if mix_mode in ('mixed', 'stylized'):
        if stylized is None:
            raise ManifestError(f"mix_mode={mix_mode!r} needs stylized tiles")
        if not isinstance(stylized, Manifest):
            path = Path(stylized)
            stylized = Manifest.load(path / 'manifest.csv' if path.is_dir() else path)
        by_name = {e.path.name: e for e in stylized.entries}
        for e in originals:
            match = by_name.get(e.path.name)
            if match is None:
                raise ManifestError(f"No stylized counterpart for {e.path}")
            # stylized tiles always carry the original label
            entries.append(ManifestEntry(path=match.path, domain='source', split='train', label_path=e.label_path))

    manifest = Manifest(entries)
    return TrainingSet(manifest=manifest, band_means=band_means(manifest.entries))


class SegUNet(nn.Module):
    """Compact encoder-decoder with skip connections"""

    def __init__(self, in_channels: int, num_classes: int, widths: Sequence[int]):
        super().__init__()
        widths = list(widths)
        chain = [in_channels] + widths
        self.encoder = nn.ModuleList(ConvBlock(chain[i], chain[i + 1]) for i in range(len(widths)))
        self.pool = nn.MaxPool2d(2)
        self.decoder = nn.ModuleList(
            UpBlock(widths[i + 1], widths[i], widths[i]) for i in reversed(range(len(widths) - 1)))
        self.head = nn.Conv2d(widths[0], num_classes, 1)
        self.downsample = 2 ** (len(widths) - 1)

    def forward(self, x):
        if x.shape[-2] % self.downsample or x.shape[-1] % self.downsample:
            raise ShapeError(f"Input sides must be divisible by {self.downsample}, got {tuple(x.shape[-2:])}")
        skips = []
        for i, block in enumerate(self.encoder):
            x = block(x)
            if i < len(self.encoder) - 1:
                skips.append(x)
                x = self.pool(x)
        for block, skip in zip(self.decoder, reversed(skips)):
            x = block(x, skip)
        return self.head(x)


BACKBONES = {'unet': SegUNet}


class SegmentationModel(nn.Module):
    """Backbone behind a fixed per-band mean subtraction"""

    def __init__(self, cfg: SegConfig, means: Sequence[float]):
        super().__init__()
        if len(means) != cfg.in_channels:
            raise ShapeError(f"{len(means)} band means for {cfg.in_channels} input channels")
        self.cfg = cfg
        self.backbone = BACKBONES[cfg.backbone](cfg.in_channels, cfg.num_classes, cfg.widths)
        self.register_buffer('band_means', torch.tensor(list(means), dtype=torch.float32))

    def forward(self, x):
        return self.backbone(x - self.band_means[None, :, None, None])

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self(x).argmax(dim=1)


def build_segmentation_model(cfg: SegConfig, means: Sequence[float]) -> SegmentationModel:
    cfg.validate()

    def build():
        model = SegmentationModel(cfg, means)
        model.apply(init_weights)
        return model
    return seeded_build(build, cfg.seed)


class LabelledTileDataset(Dataset):
    def __init__(self, entries):
        self.entries = list(entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index):
        tile = self.entries[index].load()
        if tile.labels is None:
            raise ManifestError(f"Unlabelled entry: {self.entries[index].path}")
        pixels = torch.from_numpy(to_unit_range(tile).pixels.copy())
        return pixels, torch.from_numpy(tile.labels.astype(np.int64))


def save_seg_model(model: SegmentationModel, path, iteration: int, mix_mode: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        'state_dict': model.state_dict(),
        'config': to_json_dict(model.cfg),
        'band_means': model.band_means.tolist(),
        'iteration': iteration,
        'mix_mode': mix_mode,
    }, path)
    return path


def load_seg_model(path, device: str = 'cpu') -> SegmentationModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Segmentation checkpoint not found: {path}")
    payload = torch.load(path, map_location='cpu')
    try:
        cfg = dataclass_from_dict(SegConfig, payload['config'])
        model = SegmentationModel(cfg, payload['band_means'])
        model.load_state_dict(payload['state_dict'])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"{path}: unusable segmentation checkpoint ({e})") from e
    return model.to(resolve_device(device))


def train_segmentation(training_set: TrainingSet, cfg: SegConfig, out_dir, quiet: bool = False) -> Path:
    """Cross-entropy training with Adam + weight decay under the poly schedule; returns model.pt"""
    cfg.validate()
    training_set.manifest.require_labels()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = resolve_device(cfg.device)
    torch.manual_seed(cfg.seed)

    model = build_segmentation_model(cfg, training_set.band_means).to(device)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=poly_lr(cfg, 0), weight_decay=cfg.weight_decay)

    generator = torch.Generator()
    generator.manual_seed(cfg.seed)
    loader = DataLoader(LabelledTileDataset(training_set.manifest.entries), batch_size=cfg.batch_size,
                        shuffle=True, generator=generator, num_workers=cfg.num_workers)
    log_path = out_dir / 'seg_log.csv'
    log_path.unlink(missing_ok=True)
    log = LossLog(log_path, header=SEG_LOG_HEADER)
    training_set.manifest.save(out_dir / 'training_set.csv')

    logger.info(f"Segmentation training ({cfg.mix_mode}): {len(training_set.manifest)} tiles, "
                f"{cfg.iter_max} steps on {device}")

    def batches():
        while True:
            for batch in loader:
                yield batch

    stream = batches()
    for iteration in tqdm(range(cfg.iter_max), desc='train-seg', disable=quiet):
        lr = poly_lr(cfg, iteration)
        for group in optimizer.param_groups:
            group['lr'] = lr
        x, y = next(stream)
        x, y = x.to(device), y.to(device)

        loss = F.cross_entropy(model(x), y)
        check_finite({'seg_ce': loss}, iteration=iteration)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        log.append([iteration, repr(lr), repr(float(loss.item()))])
        if (iteration + 1) % cfg.log_every == 0:
            logger.info(f"iter {iteration + 1}: loss={loss.item():.4f} lr={lr:.2e}")

    return save_seg_model(model, out_dir / 'model.pt', cfg.iter_max, cfg.mix_mode)


@dataclass
class EvalResult:
    confusion: ConfusionMatrix

    @property
    def iou(self) -> np.ndarray:
        return self.confusion.iou()

    @property
    def miou(self) -> float:
        return self.confusion.miou()

    @property
    def pixel_accuracy(self) -> float:
        return self.confusion.pixel_accuracy()

    @property
    def class_accuracy(self) -> np.ndarray:
        return self.confusion.class_accuracy()


@torch.no_grad()
def evaluate(model: Union[SegmentationModel, str, Path], manifest: Manifest, device: str = 'cpu',
             quiet: bool = False) -> EvalResult:
    """Confusion counts over every target tile (all splits)"""
    if not isinstance(model, SegmentationModel):
        model = load_seg_model(model, device=device)
    entries = manifest.select(domain='target').entries
    if not entries:
        raise ManifestError("Evaluation manifest has no target tiles")
    Manifest(entries).require_labels()

    dev = next(model.parameters()).device
    was_training = model.training
    model.eval()
    confusion = ConfusionMatrix(np.zeros((model.cfg.num_classes,) * 2, dtype=np.int64))
    try:
        for e in tqdm(entries, desc='evaluate', disable=quiet):
            tile = e.load()
            if tile.labels is None:
                raise ManifestError(f"Unlabelled target tile: {e.path}")
            x = torch.from_numpy(to_unit_range(tile).pixels.copy())[None].to(dev)
            prediction = model.predict(x)[0].cpu().numpy()
            confusion.add(prediction, tile.labels)
    finally:
        model.train(was_training)
    return EvalResult(confusion)


def _percent(value: float) -> str:
    return 'nan' if np.isnan(value) else f'{100.0 * value:.2f}'


def write_results_csv(rows: Dict[str, EvalResult], path) -> None:
    """One row per model: mIoU then per-class IoU, all in percent"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(RESULTS_HEADER)
        for name, result in rows.items():
            writer.writerow([name, _percent(result.miou)] + [_percent(v) for v in result.iou])


def read_results_csv(path) -> Dict[str, Dict[str, float]]:
    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULTS_HEADER:
            raise ManifestError(f"{path}: expected columns {','.join(RESULTS_HEADER)}")
        return {row['model']: {k: float(v) for k, v in row.items() if k != 'model'} for row in reader}
