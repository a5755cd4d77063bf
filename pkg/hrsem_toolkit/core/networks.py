"""Generator (U-Net encoder, residual bottleneck, AdaIN stage, skip decoder) and patch discriminator"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import ConfigError, ShapeError
from core.style_stats import AdaIN, ChannelStats

DOWNSAMPLE = 8
DISC_STRIDE_TOTAL = 32


@dataclass
class GeneratorConfig:
    in_channels: int = 4
    encoder_channels: List[int] = field(default_factory=lambda: [64, 128, 256])
    residual_blocks: int = 3
    residual_channels: int = 256
    decoder_channels: List[int] = field(default_factory=lambda: [256, 128, 64])
    out_channels: int = 4

    def validate(self) -> None:
        if len(self.encoder_channels) != 3:
            raise ConfigError("The encoder has exactly three blocks")
        if list(self.decoder_channels) != list(reversed(self.encoder_channels)):
            raise ConfigError(f"decoder_channels {self.decoder_channels} must mirror "
                              f"encoder_channels {self.encoder_channels}")
        if self.residual_channels != self.encoder_channels[-1]:
            raise ConfigError("residual_channels must equal the last encoder width")
        if self.residual_blocks < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("Channel and block counts must be positive")


@dataclass
class DiscriminatorConfig:
    in_channels: int = 4
    channels: List[int] = field(default_factory=lambda: [64, 128, 256, 512, 1])
    kernel_size: int = 4
    stride: int = 2
    leaky_slope: float = 0.2
    dropout: float = 0.5

    def validate(self) -> None:
        if len(self.channels) != 5 or self.channels[-1] != 1:
            raise ConfigError("The discriminator has five convolutions ending in one channel")
        if self.kernel_size != 4 or self.stride != 2:
            raise ConfigError("Discriminator convolutions use a 4x4 kernel with stride 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class EncodedFeatures:
    bottleneck: torch.Tensor
    skips: Tuple[torch.Tensor, ...]


class ConvBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU layers"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class UpBlock(nn.Module):
    """Nearest x2 upsample, 3x3 conv, concatenate the skip, then a ConvBlock"""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode='nearest'),
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )
        self.fuse = ConvBlock(out_channels + skip_channels, out_channels)

    def forward(self, x, skip):
        return self.fuse(torch.cat([self.up(x), skip], dim=1))


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.in_channels] + list(cfg.encoder_channels)
        self.encoder = nn.ModuleList(ConvBlock(widths[i], widths[i + 1]) for i in range(3))
        self.pool = nn.MaxPool2d(2)
        self.residual = nn.Sequential(*[ResidualBlock(cfg.residual_channels) for _ in range(cfg.residual_blocks)])
        self.style = AdaIN()

        skip_widths = list(reversed(cfg.encoder_channels))
        self.skip_widths = skip_widths
        in_widths = [cfg.residual_channels] + list(cfg.decoder_channels[:-1])
        self.decoder = nn.ModuleList(
            UpBlock(in_widths[i], skip_widths[i], cfg.decoder_channels[i]) for i in range(3))
        self.head = nn.Sequential(nn.Conv2d(cfg.decoder_channels[-1], cfg.out_channels, 1), nn.Tanh())

    @property
    def bottleneck_channels(self) -> int:
        return self.cfg.residual_channels

    def encode(self, x: torch.Tensor) -> EncodedFeatures:
        h, w = x.shape[-2:]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ShapeError(f"Input sides must be divisible by {DOWNSAMPLE}, got {h}x{w}")
        if x.shape[-3] != self.cfg.in_channels:
            raise ShapeError(f"Expected {self.cfg.in_channels} input channels, got {x.shape[-3]}")
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        return EncodedFeatures(bottleneck=self.residual(x), skips=tuple(skips))

    def decode(self, bottleneck: torch.Tensor, skips) -> torch.Tensor:
        if len(skips) != 3:
            raise ShapeError(f"Expected three skip tensors, got {len(skips)}")
        if bottleneck.shape[-3] != self.cfg.residual_channels:
            raise ShapeError(f"Bottleneck has {bottleneck.shape[-3]} channels, "
                             f"expected {self.cfg.residual_channels}")
        x = bottleneck
        for block, skip, width in zip(self.decoder, reversed(skips), self.skip_widths):
            if skip.shape[-2:] != (x.shape[-2] * 2, x.shape[-1] * 2) or skip.shape[-3] != width:
                raise ShapeError(f"Skip {tuple(skip.shape)} does not fit decoder input {tuple(x.shape)}")
            x = block(x, skip)
        return self.head(x)

    def translate(self, features: EncodedFeatures, style: ChannelStats) -> torch.Tensor:
        """Decode content features re-styled by the given statistics (skips pass through unmodified)"""
        return self.decode(self.style(features.bottleneck, style), features.skips)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = self.encode(x)
        return self.decode(features.bottleneck, features.skips)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.in_channels] + list(cfg.channels)
        layers = []
        for i in range(5):
            layers.append(nn.Conv2d(widths[i], widths[i + 1], cfg.kernel_size, stride=cfg.stride, padding=1))
            if i == 4:
                break
            if 1 <= i <= 3:
                layers.append(nn.InstanceNorm2d(widths[i + 1]))
            layers.append(nn.LeakyReLU(cfg.leaky_slope, inplace=True))
            layers.append(nn.Dropout(cfg.dropout))
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h < DISC_STRIDE_TOTAL or w < DISC_STRIDE_TOTAL:
            raise ShapeError(f"Discriminator input must be at least {DISC_STRIDE_TOTAL}x{DISC_STRIDE_TOTAL}, got {h}x{w}")
        # pad to a multiple of 32 so the patch grid is exactly ceil(H/32) x ceil(W/32)
        pad_h = math.ceil(h / DISC_STRIDE_TOTAL) * DISC_STRIDE_TOTAL - h
        pad_w = math.ceil(w / DISC_STRIDE_TOTAL) * DISC_STRIDE_TOTAL - w
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode='reflect')
        return torch.sigmoid(self.model(x))


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def seeded_build(build, seed: Optional[int]):
    if seed is None:
        return build()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_generator(cfg: GeneratorConfig, seed: Optional[int] = None) -> Generator:
    cfg.validate()

    def build():
        gen = Generator(cfg)
        gen.apply(init_weights)
        return gen
    return seeded_build(build, seed)


def build_discriminator(cfg: DiscriminatorConfig, seed: Optional[int] = None) -> Discriminator:
    cfg.validate()

    def build():
        disc = Discriminator(cfg)
        disc.apply(init_weights)
        return disc
    return seeded_build(build, seed)


def _batched(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ShapeError(f"Expected C x H x W or N x C x H x W input, got {tuple(x.shape)}")


def encode(gen: Generator, x: torch.Tensor) -> EncodedFeatures:
    """Encoder + residual blocks; 3-D inputs return 3-D features"""
    xb, squeezed = _batched(x)
    feats = gen.encode(xb)
    if squeezed:
        return EncodedFeatures(feats.bottleneck[0], tuple(s[0] for s in feats.skips))
    return feats


def decode(gen: Generator, bottleneck: torch.Tensor, skips) -> torch.Tensor:
    if bottleneck.dim() == 3:
        return gen.decode(bottleneck.unsqueeze(0), tuple(s.unsqueeze(0) for s in skips))[0]
    return gen.decode(bottleneck, skips)


def discriminate(disc: Discriminator, x: torch.Tensor) -> torch.Tensor:
    xb, squeezed = _batched(x)
    out = disc(xb)
    return out[0] if squeezed else out
