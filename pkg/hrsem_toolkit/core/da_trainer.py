"""Domain-adaptation trainer: adversarial style transfer with semantic-consistency losses"""
import logging
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from core.errors import CheckpointError, ConfigError, PreconditionError
from core.losses import (GeneratorLossTerms, LossLog, LossReport, LossWeights, check_finite,
                         gan_loss_discriminator, gan_loss_generator, gradient_loss, l1,
                         total_generator_loss, weighted_total)
from core.networks import (DiscriminatorConfig, Discriminator, EncodedFeatures, Generator, GeneratorConfig,
                           build_discriminator, build_generator)
from core.raster_io import (Manifest, ManifestEntry, Tile, denormalize, histogram, label_path_for,
                            to_unit_range, write_histogram_csv, write_tile)
from core.style_stats import ChannelStats, DomainStats, channel_stats, update_global
from utils.serialization import config_hash, dataclass_from_dict, load_json, save_json, to_json_dict

logger = logging.getLogger('hrsem.train')

COMPONENTS = ('gen_a', 'gen_b', 'disc_a', 'disc_b')
STATS_FILES = {'source': 'stats_source.json', 'target': 'stats_target.json'}
CHECKPOINT_MANIFEST = 'checkpoint.json'


@dataclass
class ScheduleConfig:
    lr_base: float = 1e-4
    iter_max: int = 100000
    iter_decay_start: int = 75000

    def validate(self) -> None:
        if not self.lr_base > 0:
            raise ConfigError(f"lr_base must be positive, got {self.lr_base}")
        if not 0 < self.iter_decay_start < self.iter_max:
            raise ConfigError(f"Need 0 < iter_decay_start ({self.iter_decay_start}) < iter_max ({self.iter_max})")


@dataclass
class DATrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    lr_d_base: float = 1e-5
    betas: Tuple[float, float] = (0.5, 0.999)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    decay_rate: float = 0.99
    checkpoint_every: int = 5000
    log_every: int = 100
    num_workers: int = 0
    device: str = 'auto'
    seed: int = 0

    def validate(self) -> None:
        self.generator.validate()
        self.discriminator.validate()
        self.schedule.validate()
        self.loss_weights.validate()
        if self.discriminator.in_channels != self.generator.out_channels:
            raise ConfigError("Discriminator input channels must match generator output channels")
        if not self.lr_d_base > 0:
            raise ConfigError("lr_d_base must be positive")
        if not 0.0 < self.decay_rate < 1.0:
            raise ConfigError("decay_rate must lie strictly inside (0, 1)")
        if self.checkpoint_every < 1 or self.log_every < 1 or self.num_workers < 0:
            raise ConfigError("checkpoint_every and log_every must be >= 1, num_workers >= 0")

    @property
    def disc_schedule(self) -> ScheduleConfig:
        return replace(self.schedule, lr_base=self.lr_d_base)


def lr_linear(cfg: ScheduleConfig, iteration: int) -> float:
    """Flat lr_base until iter_decay_start, then linear decay to zero at iter_max"""
    if not 0 <= iteration <= cfg.iter_max:
        raise PreconditionError(f"Iteration {iteration} outside [0, {cfg.iter_max}]")
    if iteration <= cfg.iter_decay_start:
        return cfg.lr_base
    return max(0.0, cfg.lr_base * (cfg.iter_max - iteration) / (cfg.iter_max - cfg.iter_decay_start))


def resolve_device(name: str) -> torch.device:
    if name == 'auto':
        return torch.device('cuda' if torch.cuda.is_available() else 'cpu')
    return torch.device(name)


@dataclass
class TrainState:
    cfg: DATrainConfig
    gen_a: Generator
    gen_b: Generator
    disc_a: Discriminator
    disc_b: Discriminator
    opt_gen_a: torch.optim.Adam
    opt_gen_b: torch.optim.Adam
    opt_disc_a: torch.optim.Adam
    opt_disc_b: torch.optim.Adam
    stats_source: DomainStats
    stats_target: DomainStats
    iteration: int = 0
    device: torch.device = torch.device('cpu')
    last_forward: Optional['GeneratorForward'] = None

    @property
    def networks(self) -> dict:
        return {'gen_a': self.gen_a, 'gen_b': self.gen_b, 'disc_a': self.disc_a, 'disc_b': self.disc_b}

    @property
    def optimizers(self) -> dict:
        return {'gen_a': self.opt_gen_a, 'gen_b': self.opt_gen_b,
                'disc_a': self.opt_disc_a, 'disc_b': self.opt_disc_b}

    def current_lrs(self) -> Tuple[float, float]:
        return self.opt_gen_a.param_groups[0]['lr'], self.opt_disc_a.param_groups[0]['lr']


def init_state(cfg: DATrainConfig, device: Optional[str] = None) -> TrainState:
    """Fresh networks, Adam optimizers and zero-initialised domain statistics"""
    cfg.validate()
    dev = resolve_device(device or cfg.device)
    gen_a = build_generator(cfg.generator, seed=cfg.seed).to(dev)
    gen_b = build_generator(cfg.generator, seed=cfg.seed + 1).to(dev)
    disc_a = build_discriminator(cfg.discriminator, seed=cfg.seed + 2).to(dev)
    disc_b = build_discriminator(cfg.discriminator, seed=cfg.seed + 3).to(dev)

    lr_g = lr_linear(cfg.schedule, 0)
    lr_d = lr_linear(cfg.disc_schedule, 0)
    channels = cfg.generator.residual_channels
    return TrainState(
        cfg=cfg,
        gen_a=gen_a, gen_b=gen_b, disc_a=disc_a, disc_b=disc_b,
        opt_gen_a=torch.optim.Adam(gen_a.parameters(), lr=lr_g, betas=cfg.betas),
        opt_gen_b=torch.optim.Adam(gen_b.parameters(), lr=lr_g, betas=cfg.betas),
        opt_disc_a=torch.optim.Adam(disc_a.parameters(), lr=lr_d, betas=cfg.betas),
        opt_disc_b=torch.optim.Adam(disc_b.parameters(), lr=lr_d, betas=cfg.betas),
        stats_source=DomainStats(channels, cfg.decay_rate),
        stats_target=DomainStats(channels, cfg.decay_rate),
        device=dev,
    )


def tile_tensor(tile: Union[Tile, torch.Tensor], device=None) -> torch.Tensor:
    """Tile -> normalized 1 x C x H x W float tensor"""
    if isinstance(tile, Tile):
        x = torch.from_numpy(to_unit_range(tile).pixels.copy())
    else:
        x = tile
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return x.to(device=device, dtype=torch.float32) if device is not None else x


def set_requires_grad(modules, flag: bool) -> None:
    for module in modules:
        for p in module.parameters():
            p.requires_grad_(flag)


@dataclass
class GeneratorForward:
    """Every intermediate of one generator pass, kept for loss evaluation and inspection"""
    feat_s: EncodedFeatures
    feat_t: EncodedFeatures
    stats_s: ChannelStats
    stats_t: ChannelStats
    fake_a: torch.Tensor
    fake_b: torch.Tensor
    rec_s: torch.Tensor
    rec_t: torch.Tensor
    self_s: torch.Tensor
    self_t: torch.Tensor


def forward_generators(state: TrainState, x_s: torch.Tensor, x_t: torch.Tensor) -> GeneratorForward:
    gen_a, gen_b = state.gen_a, state.gen_b
    feat_s = gen_a.encode(x_s)
    feat_t = gen_b.encode(x_t)
    # current-batch statistics drive training; global ones are only accumulated
    stats_s = channel_stats(feat_s.bottleneck)
    stats_t = channel_stats(feat_t.bottleneck)

    fake_b = gen_b.decode(gen_a.style(feat_s.bottleneck, stats_t), feat_s.skips)
    fake_a = gen_a.decode(gen_b.style(feat_t.bottleneck, stats_s), feat_t.skips)

    feat_fake_b = gen_b.encode(fake_b)
    feat_fake_a = gen_a.encode(fake_a)
    rec_s = gen_a.decode(gen_b.style(feat_fake_b.bottleneck, channel_stats(feat_fake_a.bottleneck)),
                         feat_fake_b.skips)
    rec_t = gen_b.decode(gen_a.style(feat_fake_a.bottleneck, channel_stats(feat_fake_b.bottleneck)),
                         feat_fake_a.skips)

    # self-reconstruction bypasses the style stage
    self_s = gen_a.decode(feat_s.bottleneck, feat_s.skips)
    self_t = gen_b.decode(feat_t.bottleneck, feat_t.skips)

    return GeneratorForward(feat_s=feat_s, feat_t=feat_t, stats_s=stats_s, stats_t=stats_t,
                            fake_a=fake_a, fake_b=fake_b, rec_s=rec_s, rec_t=rec_t,
                            self_s=self_s, self_t=self_t)


def generator_loss_terms(state: TrainState, fwd: GeneratorForward,
                         x_s: torch.Tensor, x_t: torch.Tensor) -> GeneratorLossTerms:
    return GeneratorLossTerms(
        adv_st=gan_loss_generator(state.disc_b(fwd.fake_b)),
        adv_ts=gan_loss_generator(state.disc_a(fwd.fake_a)),
        cross=l1(x_s, fwd.rec_s) + l1(x_t, fwd.rec_t),
        self_rec=l1(x_s, fwd.self_s) + l1(x_t, fwd.self_t),
        grad=gradient_loss(x_s, fwd.fake_b) + gradient_loss(x_t, fwd.fake_a),
    )


def _apply_lr(state: TrainState) -> None:
    lr_g = lr_linear(state.cfg.schedule, state.iteration)
    lr_d = lr_linear(state.cfg.disc_schedule, state.iteration)
    for opt, lr in ((state.opt_gen_a, lr_g), (state.opt_gen_b, lr_g),
                    (state.opt_disc_a, lr_d), (state.opt_disc_b, lr_d)):
        for group in opt.param_groups:
            group['lr'] = lr


def train_step(state: TrainState, source, target, capture: bool = False) -> Tuple[TrainState, LossReport]:
    """One iteration: generator update with frozen discriminators, discriminator update, stats update"""
    if state.iteration >= state.cfg.schedule.iter_max:
        raise PreconditionError(f"Training already reached iter_max={state.cfg.schedule.iter_max}")
    x_s = tile_tensor(source, state.device)
    x_t = tile_tensor(target, state.device)
    step = state.iteration + 1
    discs = (state.disc_a, state.disc_b)

    set_requires_grad(discs, False)
    fwd = forward_generators(state, x_s, x_t)
    terms = generator_loss_terms(state, fwd, x_s, x_t)
    report = total_generator_loss(terms, state.cfg.loss_weights, iteration=step)
    state.opt_gen_a.zero_grad(set_to_none=True)
    state.opt_gen_b.zero_grad(set_to_none=True)
    weighted_total(terms, state.cfg.loss_weights).backward()
    state.opt_gen_a.step()
    state.opt_gen_b.step()

    set_requires_grad(discs, True)
    state.opt_disc_a.zero_grad(set_to_none=True)
    state.opt_disc_b.zero_grad(set_to_none=True)
    loss_d_s = gan_loss_discriminator(state.disc_a(x_s), state.disc_a(fwd.fake_a.detach()))
    loss_d_t = gan_loss_discriminator(state.disc_b(x_t), state.disc_b(fwd.fake_b.detach()))
    check_finite({'loss_d_s': loss_d_s, 'loss_d_t': loss_d_t}, iteration=step)
    (loss_d_s + loss_d_t).backward()
    state.opt_disc_a.step()
    state.opt_disc_b.step()

    update_global(state.stats_source, fwd.stats_s)
    update_global(state.stats_target, fwd.stats_t)

    state.iteration = step
    _apply_lr(state)

    report.loss_d_s = float(loss_d_s.item())
    report.loss_d_t = float(loss_d_t.item())
    state.last_forward = fwd if capture else None
    return state, report


class TileDataset(Dataset):
    """Normalized C x H x W tensors for the tiles of a manifest"""

    def __init__(self, entries):
        self.entries = list(entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index):
        tile = self.entries[index].load()
        return torch.from_numpy(to_unit_range(tile).pixels.copy())


def tile_stream(entries, seed: int, num_workers: int = 0) -> Iterator[torch.Tensor]:
    """Endless shuffled stream, reshuffled every epoch from a seeded generator"""
    generator = torch.Generator()
    generator.manual_seed(seed)
    loader = DataLoader(TileDataset(entries), batch_size=1, shuffle=True, generator=generator,
                        num_workers=num_workers, drop_last=False)
    while True:
        for batch in loader:
            yield batch


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    components = {}
    for name in COMPONENTS:
        net = state.networks[name]
        torch.save({'state_dict': net.state_dict(),
                    'optimizer': state.optimizers[name].state_dict(),
                    'config': to_json_dict(net.cfg)}, path / f'{name}.pt')
        components[name] = {'file': f'{name}.pt', 'config_hash': config_hash(net.cfg)}
    state.stats_source.save(path / STATS_FILES['source'])
    state.stats_target.save(path / STATS_FILES['target'])

    save_json({
        'iteration': state.iteration,
        'components': components,
        'stats': STATS_FILES,
        'config': to_json_dict(state.cfg),
        'config_hash': config_hash(state.cfg),
    }, path / CHECKPOINT_MANIFEST)
    return path


def load_checkpoint(path, device: str = 'cpu') -> TrainState:
    path = Path(path)
    manifest_path = path / CHECKPOINT_MANIFEST
    if not manifest_path.is_file():
        raise CheckpointError(f"Not a checkpoint directory (missing {CHECKPOINT_MANIFEST}): {path}")
    meta = load_json(manifest_path)
    cfg = dataclass_from_dict(DATrainConfig, meta['config'])
    if config_hash(cfg) != meta.get('config_hash'):
        raise CheckpointError(f"{path}: config hash mismatch")

    state = init_state(cfg, device=device)
    for name in COMPONENTS:
        archive = path / meta['components'][name]['file']
        if not archive.is_file():
            raise CheckpointError(f"Missing parameter archive: {archive}")
        payload = torch.load(archive, map_location=state.device)
        state.networks[name].load_state_dict(payload['state_dict'])
        state.optimizers[name].load_state_dict(payload['optimizer'])
    state.stats_source = DomainStats.load(path / STATS_FILES['source'])
    state.stats_target = DomainStats.load(path / STATS_FILES['target'])
    state.iteration = int(meta['iteration'])
    return state


def adopt_config(state: TrainState, cfg: DATrainConfig) -> TrainState:
    """Continue a restored state under a new run config; network shapes must be unchanged"""
    cfg.validate()
    for name in ('generator', 'discriminator'):
        if config_hash(getattr(cfg, name)) != config_hash(getattr(state.cfg, name)):
            raise ConfigError(f"Cannot resume: {name} config differs from the checkpoint")
    if state.iteration > cfg.schedule.iter_max:
        raise ConfigError(f"Cannot resume at iteration {state.iteration}: iter_max is {cfg.schedule.iter_max}")
    state.cfg = cfg
    state.stats_source.decay_rate = cfg.decay_rate
    state.stats_target.decay_rate = cfg.decay_rate
    for opt in state.optimizers.values():
        for group in opt.param_groups:
            group['betas'] = cfg.betas
    _apply_lr(state)
    return state


def train(manifest: Manifest, cfg: DATrainConfig, out_dir, resume=None, quiet: bool = False) -> Path:
    """Run the adversarial loop to iter_max, checkpointing periodically; returns the final checkpoint"""
    cfg.validate()
    sources = manifest.select(domain='source', split='train').entries
    targets = manifest.select(domain='target', split='train').entries
    if not sources or not targets:
        raise ConfigError(f"Manifest needs train tiles in both domains "
                          f"(source={len(sources)}, target={len(targets)})")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)

    if resume:
        state = load_checkpoint(resume, device=cfg.device)
        state = adopt_config(state, cfg)
        logger.info(f"Resumed from {resume} at iteration {state.iteration}")
    else:
        state = init_state(cfg)
        for name in ('loss_log.csv', 'lr_log.csv'):
            (out_dir / name).unlink(missing_ok=True)

    loss_log = LossLog(out_dir / 'loss_log.csv')
    lr_log = LossLog(out_dir / 'lr_log.csv', header=['iter', 'lr_g', 'lr_d'])
    if resume:
        loss_log.truncate_after(state.iteration)
        lr_log.truncate_after(state.iteration)

    source_stream = tile_stream(sources, cfg.seed + 100, cfg.num_workers)
    target_stream = tile_stream(targets, cfg.seed + 200, cfg.num_workers)
    iter_max = cfg.schedule.iter_max
    logger.info(f"Training on {state.device}: {len(sources)} source / {len(targets)} target tiles, "
                f"{iter_max - state.iteration} iterations")

    checkpoint = None
    for _ in tqdm(range(state.iteration, iter_max), desc='train-da', disable=quiet):
        state, report = train_step(state, next(source_stream), next(target_stream))
        loss_log.append(report.row(state.iteration))
        lr_g, lr_d = state.current_lrs()
        lr_log.append([state.iteration, repr(lr_g), repr(lr_d)])

        if state.iteration % cfg.log_every == 0:
            logger.info(f"iter {state.iteration}: total_g={report.total_g:.4f} cross={report.cross:.4f} "
                        f"self={report.self_rec:.4f} grad={report.grad:.4f} "
                        f"d_s={report.loss_d_s:.4f} d_t={report.loss_d_t:.4f} lr_g={lr_g:.2e}")
        if state.iteration % cfg.checkpoint_every == 0 or state.iteration == iter_max:
            checkpoint = save_checkpoint(state, out_dir / 'checkpoints' / f'iteration_{state.iteration}')
            logger.info(f"Checkpoint: {checkpoint}")

    if checkpoint is None:
        checkpoint = save_checkpoint(state, out_dir / 'checkpoints' / f'iteration_{state.iteration}')
    return checkpoint


@torch.no_grad()
def stylize(checkpoint: Union[TrainState, str, Path], tile: Tile) -> Tile:
    """Source tile -> target style: Dec_B(AdaIN(Enc_A(x), target global stats)), labels untouched"""
    state = checkpoint if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint)
    was_training = state.gen_a.training, state.gen_b.training
    state.gen_a.eval()
    state.gen_b.eval()
    try:
        x = tile_tensor(tile, state.device)
        features = state.gen_a.encode(x)
        styled = state.gen_a.style(features.bottleneck, state.stats_target.as_channel_stats())
        out = state.gen_b.decode(styled, features.skips)[0]
    finally:
        state.gen_a.train(was_training[0])
        state.gen_b.train(was_training[1])
    pixels = out.clamp(-1.0, 1.0).cpu().numpy().astype(np.float32)
    return Tile(pixels=pixels, labels=tile.labels)


def stylize_manifest(checkpoint, manifest: Manifest, out_dir, device: str = 'cpu', quiet: bool = False) -> Manifest:
    """Stylize every source tile into a mirrored directory of uint8 tiles with copied labels"""
    state = checkpoint if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint, device=device)
    out_dir = Path(out_dir)
    sources = manifest.select(domain='source').entries
    if not sources:
        raise PreconditionError("Manifest has no source tiles to stylize")

    entries, tiles = [], []
    for entry in tqdm(sources, desc='stylize', disable=quiet):
        tile = entry.load()
        styled = denormalize(stylize(state, Tile(pixels=tile.pixels)))
        out_path = out_dir / entry.domain / entry.path.name
        write_tile(styled, out_path)
        label_out = None
        if entry.label_path is not None:
            label_out = label_path_for(out_path)
            shutil.copyfile(entry.label_path, label_out)
        entries.append(ManifestEntry(path=out_path, domain=entry.domain, split=entry.split, label_path=label_out))
        tiles.append(styled)

    stylized = Manifest(entries)
    stylized.save(out_dir / 'manifest.csv')
    write_histogram_csv(histogram(tiles), out_dir / 'histogram.csv')
    logger.info(f"Stylized {len(entries)} tiles into {out_dir}")
    return stylized


class DomainAdaptationTrainer:
    """Stage wrapper: manifest in, checkpoint directory out"""

    def __init__(self, manifest_path: str, out_dir: str, cfg: Optional[DATrainConfig] = None, **kwargs):
        self.manifest_path = Path(manifest_path)
        self.out_dir = Path(out_dir)
        self.cfg = cfg or DATrainConfig()
        self.quiet = kwargs.get('quiet', False)

    def train(self, resume_path=None) -> Path:
        manifest = Manifest.load(self.manifest_path)
        manifest.check_paths()
        logger.info(f"Starting domain adaptation for {self.cfg.schedule.iter_max} iterations...")
        return train(manifest, self.cfg, self.out_dir, resume=resume_path, quiet=self.quiet)

    @staticmethod
    def latest_checkpoint(out_dir) -> Optional[Path]:
        root = Path(out_dir) / 'checkpoints'
        candidates = [p for p in root.glob('iteration_*') if (p / CHECKPOINT_MANIFEST).is_file()]
        if not candidates:
            return None
        return max(candidates, key=lambda p: int(p.name.split('_')[-1]))
