"""Distribution alignment and edge-preservation measures for stylized tiles"""
from typing import Dict, Sequence

import cv2
import numpy as np
from scipy.stats import pearsonr, wasserstein_distance

from core.errors import PreconditionError, ShapeError
from core.raster_io import Tile, gaussian_smooth, to_unit_range

VALUES = np.arange(256, dtype=np.float64)


def wasserstein_per_band(hist_a: np.ndarray, hist_b: np.ndarray) -> np.ndarray:
    """W1 distance between matching bands of two (bands, 256) count histograms"""
    if hist_a.shape != hist_b.shape or hist_a.ndim != 2 or hist_a.shape[1] != 256:
        raise ShapeError(f"Histograms must share a (bands, 256) shape, got {hist_a.shape} and {hist_b.shape}")
    if np.any(hist_a.sum(axis=1) == 0) or np.any(hist_b.sum(axis=1) == 0):
        raise PreconditionError("Every band histogram needs at least one count")
    return np.array([wasserstein_distance(VALUES, VALUES, u_weights=a, v_weights=b)
                     for a, b in zip(hist_a, hist_b)])


def alignment_ratio(source: np.ndarray, target: np.ndarray, stylized: np.ndarray) -> np.ndarray:
    """Per band W1(stylized, target) / W1(source, target); below 1 means stylization moved towards the target"""
    before = wasserstein_per_band(source, target)
    after = wasserstein_per_band(stylized, target)
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(before > 0, after / before, np.nan)


def sobel_magnitude(tile: Tile) -> np.ndarray:
    """Band-averaged Sobel gradient magnitude, H x W"""
    pixels = to_unit_range(tile).pixels.astype(np.float64)
    mags = []
    for band in pixels:
        gx = cv2.Sobel(band, cv2.CV_64F, 1, 0, ksize=3, borderType=cv2.BORDER_REFLECT)
        gy = cv2.Sobel(band, cv2.CV_64F, 0, 1, ksize=3, borderType=cv2.BORDER_REFLECT)
        mags.append(np.hypot(gx, gy))
    return np.mean(mags, axis=0)


def edge_correlation(tiles_a: Sequence[Tile], tiles_b: Sequence[Tile]) -> float:
    """Mean per-tile Pearson correlation of Sobel magnitudes; flat tiles are skipped"""
    if len(tiles_a) != len(tiles_b) or not tiles_a:
        raise PreconditionError("Need two equally long, non-empty tile sequences")
    scores = []
    for a, b in zip(tiles_a, tiles_b):
        ma, mb = sobel_magnitude(a).ravel(), sobel_magnitude(b).ravel()
        if ma.shape != mb.shape:
            raise ShapeError(f"Tile sizes differ: {a.pixels.shape} vs {b.pixels.shape}")
        if ma.std() == 0 or mb.std() == 0:
            continue
        scores.append(pearsonr(ma, mb)[0])
    return float(np.mean(scores)) if scores else float('nan')


def semantic_consistency(sources: Sequence[Tile], stylized: Sequence[Tile], blur_sigma: float = 2.0) -> Dict[str, float]:
    """Edge agreement of stylized tiles against a Gaussian-blurred reference"""
    blurred = [gaussian_smooth(t, blur_sigma) for t in sources]
    return {
        'stylized_corr': edge_correlation(sources, stylized),
        'blurred_corr': edge_correlation(sources, blurred),
        'blur_sigma': float(blur_sigma),
    }
