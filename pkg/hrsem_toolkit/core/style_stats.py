"""Channel statistics, adaptive instance normalization and global domain statistics"""
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from core.errors import CheckpointError, PreconditionError, ShapeError

EPS = 1e-5
DEFAULT_DECAY_RATE = 0.99


@dataclass
class ChannelStats:
    """Per-channel mean and standard deviation; shape (C,) or (N, C) for batched features"""
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"mu {tuple(self.mu.shape)} and sigma {tuple(self.sigma.shape)} differ")

    @property
    def channels(self) -> int:
        return self.mu.shape[-1]

    def detach(self) -> 'ChannelStats':
        return ChannelStats(self.mu.detach(), self.sigma.detach())


def channel_stats(features: torch.Tensor, eps: float = EPS) -> ChannelStats:
    """Spatial mean and sqrt(population variance + eps) of each channel of a (N x) C x H x W array"""
    if features.dim() not in (3, 4):
        raise ShapeError(f"Expected C x H x W or N x C x H x W features, got {tuple(features.shape)}")
    if features.shape[-1] * features.shape[-2] < 1:
        raise ShapeError("Features have an empty spatial extent")
    mu = features.mean(dim=(-2, -1))
    var = features.var(dim=(-2, -1), unbiased=False)
    return ChannelStats(mu=mu, sigma=torch.sqrt(var + eps))


def adain(content: torch.Tensor, content_stats: ChannelStats, style_stats: ChannelStats) -> torch.Tensor:
    """Scale and shift content channels so their statistics become the style statistics"""
    c = content.shape[-3]
    if content_stats.channels != c or style_stats.channels != c:
        raise ShapeError(f"Channel mismatch: content {c}, content stats {content_stats.channels}, "
                         f"style stats {style_stats.channels}")

    def expand(t: torch.Tensor) -> torch.Tensor:
        return t.to(content.dtype)[..., None, None]

    normalized = (content - expand(content_stats.mu)) / expand(content_stats.sigma)
    return normalized * expand(style_stats.sigma) + expand(style_stats.mu)


class AdaIN(nn.Module):
    """Parameter-free AdaIN stage; a module so the style step can be hooked and inspected"""

    def forward(self, content: torch.Tensor, style: ChannelStats) -> torch.Tensor:
        return adain(content, channel_stats(content), style)


class DomainStats:
    """Exponentially accumulated bottleneck statistics of one domain"""

    def __init__(self, channels: int, decay_rate: float = DEFAULT_DECAY_RATE):
        if not 0.0 < decay_rate < 1.0:
            raise PreconditionError(f"decay_rate must lie strictly inside (0, 1), got {decay_rate}")
        # float64 accumulators keep the geometric series exact over long runs
        self.mu_glob = torch.zeros(channels, dtype=torch.float64)
        self.sigma_glob = torch.zeros(channels, dtype=torch.float64)
        self.decay_rate = float(decay_rate)
        self.updates_seen = 0

    @property
    def channels(self) -> int:
        return self.mu_glob.shape[0]

    def as_channel_stats(self) -> ChannelStats:
        return ChannelStats(mu=self.mu_glob.clone(), sigma=self.sigma_glob.clone())

    def to_json(self) -> dict:
        return {
            'decay_rate': self.decay_rate,
            'updates_seen': self.updates_seen,
            'mu_glob': self.mu_glob.tolist(),
            'sigma_glob': self.sigma_glob.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> 'DomainStats':
        try:
            stats = cls(len(data['mu_glob']), data['decay_rate'])
            if len(data['sigma_glob']) != stats.channels:
                raise ShapeError("mu_glob and sigma_glob lengths differ")
            stats.mu_glob = torch.tensor(data['mu_glob'], dtype=torch.float64)
            stats.sigma_glob = torch.tensor(data['sigma_glob'], dtype=torch.float64)
            stats.updates_seen = int(data['updates_seen'])
        except KeyError as e:
            raise CheckpointError(f"Domain statistics missing field {e}") from e
        return stats

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> 'DomainStats':
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"Missing domain statistics sidecar: {path}")
        return cls.from_json(json.loads(path.read_text()))


def update_global(ds: DomainStats, current: ChannelStats) -> DomainStats:
    """One accumulation step; batched stats are averaged over the batch first"""
    if current.channels != ds.channels:
        raise ShapeError(f"Stats have {current.channels} channels, domain stats {ds.channels}")
    mu_c = current.mu.detach().reshape(-1, ds.channels).mean(dim=0).to(torch.float64).cpu()
    sigma_c = current.sigma.detach().reshape(-1, ds.channels).mean(dim=0).to(torch.float64).cpu()
    d = ds.decay_rate
    ds.mu_glob = d * ds.mu_glob + (1.0 - d) * mu_c
    ds.sigma_glob = d * ds.sigma_glob + (1.0 - d) * sigma_c
    ds.updates_seen += 1
    return ds
