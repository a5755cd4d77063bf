"""Static figures: per-band pixel distributions and training curves"""
import csv
import logging
from pathlib import Path
from typing import Dict

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from core.diagnostics import alignment_ratio, wasserstein_per_band
from core.errors import FormatError

logger = logging.getLogger('hrsem.plot')

BAND_NAMES = ('blue', 'green', 'red', 'nir')
# no version string in PNG metadata
SAVE_KW = {'dpi': 120, 'metadata': {'Software': None}}


def _band_name(b: int) -> str:
    return BAND_NAMES[b] if b < len(BAND_NAMES) else f'band {b}'


def plot_distributions(histograms: Dict[str, np.ndarray], path, title: str = 'Pixel value distribution') -> Path:
    """One panel per band, one normalized curve per named histogram"""
    if not histograms:
        raise FormatError("No histograms to plot")
    n_bands = max(h.shape[0] for h in histograms.values())
    fig, axes = plt.subplots(1, n_bands, figsize=(4 * n_bands, 3.2), sharey=True, squeeze=False)
    for b, ax in enumerate(axes[0]):
        for name, counts in histograms.items():
            if b >= counts.shape[0]:
                continue
            total = counts[b].sum()
            ax.plot(np.arange(256), counts[b] / total if total else counts[b], label=name, linewidth=1.2)
        ax.set_title(_band_name(b))
        ax.set_xlim(0, 255)
        ax.set_xlabel('pixel value')
    axes[0][0].set_ylabel('share of pixels')
    axes[0][-1].legend(loc='upper right', fontsize='small')
    fig.suptitle(title)
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def plot_loss_curves(loss_log, path, columns=('total_g', 'cross', 'self', 'grad', 'loss_d_s', 'loss_d_t')) -> Path:
    with open(loss_log, newline='') as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise FormatError(f"{loss_log}: empty loss log")
    missing = [c for c in columns if c not in rows[0]]
    if missing:
        raise FormatError(f"{loss_log}: missing columns {', '.join(missing)}")

    iters = np.array([int(r['iter']) for r in rows])
    fig, axes = plt.subplots(len(columns), 1, figsize=(7, 1.8 * len(columns)), sharex=True, squeeze=False)
    for ax, column in zip(axes[:, 0], columns):
        ax.plot(iters, [float(r[column]) for r in rows], linewidth=0.8)
        ax.set_ylabel(column)
    axes[-1, 0].set_xlabel('iteration')
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def write_alignment_csv(source: np.ndarray, target: np.ndarray, stylized: np.ndarray, path) -> np.ndarray:
    """Per-band W1 distances before/after stylization and their ratio"""
    before = wasserstein_per_band(source, target)
    after = wasserstein_per_band(stylized, target)
    ratio = alignment_ratio(source, target, stylized)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['band', 'w1_source_target', 'w1_stylized_target', 'ratio'])
        for b in range(len(ratio)):
            writer.writerow([_band_name(b), f'{before[b]:.6f}', f'{after[b]:.6f}', f'{ratio[b]:.6f}'])
    return ratio
