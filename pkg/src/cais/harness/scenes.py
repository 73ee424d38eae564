"""Synthetic rectified stereo pairs with piecewise-constant integer disparity."""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..validation import ConfigError


@dataclass
class SyntheticScene:
    left: np.ndarray
    right: np.ndarray
    gt: np.ndarray
    mask: np.ndarray  # True where the left pixel is visible in the right view
    seed: int
    d_max: int


def _texture(rng, shape, sigma, contrast):
    noise = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    noise = (noise - noise.mean()) / noise.std()
    return noise * contrast


def gen_scene(seed, size=(32, 32), n_rects=3, d_max=8, sigma=1.0, contrast=1.0):
    """Background plane plus axis-aligned rectangles at distinct disparities.

    ``left`` is band-limited noise, drawn independently per surface with a
    per-surface brightness offset; ``right`` is ``left`` forward-warped by
    the ground truth (nearer surfaces win), with uncovered pixels filled by
    fresh noise. For every masked left pixel
    ``right[y, x - gt[y, x]] == left[y, x]`` holds exactly.
    """
    h, w = size
    if not 1 <= d_max < w / 2:
        raise ConfigError("d_max must satisfy 1 <= d_max < width/2, got %d for width %d"
                          % (d_max, w))
    if not 0 <= n_rects <= d_max - 1:
        raise ConfigError("need 0 <= rect count <= d_max-1 for distinct disparities, got %d"
                          % n_rects)
    rng = np.random.default_rng(seed)
    disparities = rng.permutation(d_max)[:n_rects + 1]
    background, rect_disp = int(disparities[0]), np.sort(disparities[1:])
    gt = np.full((h, w), background, dtype=np.int64)
    for v in rect_disp:
        rh = int(rng.integers(max(2, h // 6), max(3, h // 2) + 1))
        rw = int(rng.integers(max(2, w // 6), max(3, w // 2) + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        gt[y0:y0 + rh, x0:x0 + rw] = v

    # each surface carries its own texture and brightness, so depth edges are
    # also appearance edges
    left = np.empty((h, w))
    for v in np.unique(gt):
        surface = _texture(rng, (h, w), sigma, contrast) + rng.uniform(-1.5, 1.5) * contrast
        left[gt == v] = surface[gt == v]
    right = _texture(rng, (h, w), sigma, contrast)
    owner = np.full((h, w), -1, dtype=np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    flat = ys * w + xs
    for v in np.unique(gt):  # far to near, near overwrites
        sel = (gt == v) & (xs - v >= 0)
        right[ys[sel], xs[sel] - v] = left[sel]
        owner[ys[sel], xs[sel] - v] = flat[sel]
    xr = xs - gt
    mask = (xr >= 0) & (owner[ys, np.clip(xr, 0, w - 1)] == flat)
    return SyntheticScene(left=left.astype(np.float32), right=right.astype(np.float32),
                          gt=gt.astype(np.float32), mask=mask, seed=seed, d_max=d_max)
