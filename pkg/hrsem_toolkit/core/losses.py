"""Adversarial, cross-reconstruction, self-reconstruction and Sobel gradient losses"""
import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Union

import torch
import torch.nn.functional as F

from core.errors import ConfigError, NumericError, ShapeError

PROB_CLAMP = 1e-7
Scalar = Union[float, torch.Tensor]

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0],
                        [-2.0, 0.0, 2.0],
                        [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.t().contiguous()

LOSS_LOG_HEADER = ['iter', 'adv_g_st', 'adv_g_ts', 'cross', 'self', 'grad', 'total_g', 'loss_d_s', 'loss_d_t']


@dataclass
class LossWeights:
    adv: float = 1.0
    cross: float = 20.0
    self_rec: float = 10.0
    grad: float = 25.0

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"Loss weight {f.name} must be >= 0")


@dataclass
class GeneratorLossTerms:
    adv_st: Scalar
    adv_ts: Scalar
    cross: Scalar
    self_rec: Scalar
    grad: Scalar

    def as_dict(self) -> Dict[str, Scalar]:
        # no deepcopy: the values are non-leaf autograd tensors
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossReport:
    adv_g_st: float
    adv_g_ts: float
    cross: float
    self_rec: float
    grad: float
    total_g: float
    loss_d_s: float = 0.0
    loss_d_t: float = 0.0

    def row(self, iteration: int) -> list:
        values = [self.adv_g_st, self.adv_g_ts, self.cross, self.self_rec, self.grad,
                  self.total_g, self.loss_d_s, self.loss_d_t]
        return [iteration] + [repr(float(v)) for v in values]


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def sobel_grad(x: torch.Tensor) -> torch.Tensor:
    """Horizontal then vertical Sobel responses per channel: (N x) C x H x W -> (N x) 2C x H x W"""
    if x.dim() not in (3, 4) or x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ShapeError(f"sobel_grad needs a (N x) C x H x W input with H, W >= 3, got {tuple(x.shape)}")
    squeeze = x.dim() == 3
    xb = x.unsqueeze(0) if squeeze else x
    c = xb.shape[1]
    kernels = torch.stack([SOBEL_X, SOBEL_Y]).to(dtype=xb.dtype, device=xb.device)
    padded = F.pad(xb, (1, 1, 1, 1), mode='reflect')
    gx = F.conv2d(padded, kernels[0].expand(c, 1, 3, 3), groups=c)
    gy = F.conv2d(padded, kernels[1].expand(c, 1, 3, 3), groups=c)
    out = torch.cat([gx, gy], dim=1)
    return out[0] if squeeze else out


def gradient_loss(image: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    _same_shape(image, fake)
    return l1(sobel_grad(image), sobel_grad(fake))


def _check_probabilities(p: torch.Tensor, name: str) -> None:
    if not torch.isfinite(p).all() or (p < 0).any() or (p > 1).any():
        raise NumericError(f"{name} contains values outside (0, 1)", term=name)


def gan_loss_discriminator(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    _check_probabilities(d_real, 'd_real')
    _check_probabilities(d_fake, 'd_fake')
    real = d_real.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    fake = d_fake.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -torch.log(real).mean() - torch.log(1 - fake).mean()


def gan_loss_generator(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating form -log D(fake)"""
    _check_probabilities(d_fake, 'd_fake')
    return -torch.log(d_fake.clamp(PROB_CLAMP, 1 - PROB_CLAMP)).mean()


def weighted_total(terms: GeneratorLossTerms, weights: LossWeights) -> Scalar:
    return (weights.adv * terms.adv_st + weights.adv * terms.adv_ts + weights.cross * terms.cross
            + weights.self_rec * terms.self_rec + weights.grad * terms.grad)


def _as_float(value: Scalar) -> float:
    return float(value.detach().item()) if isinstance(value, torch.Tensor) else float(value)


def check_finite(values: Dict[str, Scalar], iteration: int = None) -> None:
    for name, value in values.items():
        v = _as_float(value)
        if not math.isfinite(v):
            where = f" at iteration {iteration}" if iteration is not None else ""
            raise NumericError(f"Loss term '{name}' is {v}{where}", term=name, iteration=iteration)


def total_generator_loss(terms: GeneratorLossTerms, weights: LossWeights, iteration: int = None) -> LossReport:
    check_finite(terms.as_dict(), iteration)
    total = _as_float(weighted_total(terms, weights))
    check_finite({'total_g': total}, iteration)
    return LossReport(
        adv_g_st=_as_float(terms.adv_st),
        adv_g_ts=_as_float(terms.adv_ts),
        cross=_as_float(terms.cross),
        self_rec=_as_float(terms.self_rec),
        grad=_as_float(terms.grad),
        total_g=total,
    )


class LossLog:
    """Append-only CSV training log"""

    def __init__(self, path, header=LOSS_LOG_HEADER):
        self.path = Path(path)
        self.header = list(header)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, 'w', newline='') as f:
                csv.writer(f).writerow(self.header)

    def append(self, row: list) -> None:
        with open(self.path, 'a', newline='') as f:
            csv.writer(f).writerow(row)

    def truncate_after(self, iteration: int) -> None:
        """Drop rows beyond a resumed iteration so replays do not duplicate them"""
        with open(self.path, newline='') as f:
            rows = list(csv.reader(f))
        kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= iteration]
        with open(self.path, 'w', newline='') as f:
            csv.writer(f).writerows(kept)
