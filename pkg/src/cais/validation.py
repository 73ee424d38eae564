"""Input validation helpers shared by the operators and estimators."""
from dataclasses import dataclass

import numpy as np

SUPPORTED_SCALES = (2, 4, 8)


class ConfigError(ValueError):
    """Invalid configuration value (scale, window, method, ...)."""


class ShapeError(ValueError):
    """Operands whose shapes do not fit together."""


def check_scale(s):
    if s not in SUPPORTED_SCALES:
        raise ConfigError("scale must be one of %s, got %r" % (SUPPORTED_SCALES, s))
    return int(s)


def check_window(w, name="window"):
    if not isinstance(w, (int, np.integer)) or w < 1 or w % 2 == 0:
        raise ConfigError("%s must be a positive odd integer, got %r" % (name, w))
    return int(w)


def check_float_array(a, ndim, name, dtype=None):
    a = np.asarray(a)
    if dtype is not None:
        a = a.astype(dtype, copy=False)
    elif not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float32)
    if a.ndim != ndim:
        raise ShapeError("%s must be %dD, got shape %s" % (name, ndim, a.shape))
    if not np.all(np.isfinite(a)):
        raise ValueError("%s contains non-finite values" % name)
    return a


def check_cost_volume(cv, name="cost volume"):
    """A cost volume is an (H, W, D) float array."""
    return check_float_array(cv, 3, name)


def check_guidance(g, s, coarse_hw, w_s, name="guidance"):
    """Guidance fields are (w_s**2, H*s, W*s)."""
    g = check_float_array(g, 3, name)
    expected = (w_s * w_s, coarse_hw[0] * s, coarse_hw[1] * s)
    if g.shape != expected:
        raise ShapeError("%s has shape %s, expected %s" % (name, g.shape, expected))
    return g


def check_feature_pair(f_fine, f_coarse, s):
    f_fine = check_float_array(f_fine, 3, "fine features")
    f_coarse = check_float_array(f_coarse, 3, "coarse features")
    c, h, w = f_coarse.shape
    if f_fine.shape != (c, h * s, w * s):
        raise ShapeError("fine features %s do not match coarse %s at scale %d"
                         % (f_fine.shape, f_coarse.shape, s))
    return f_fine, f_coarse


@dataclass(frozen=True)
class AggregationConfig:
    """Scale ratio, window sizes and normalization toggles of the aggregation."""
    s: int = 2
    w_s: int = 3
    w_d: int = 3
    block_reduce: str = "mean"
    stage1_renormalize: bool = True
    left_center_scale: bool = True
    border_renormalize_spatial: bool = False
    warp_alignment: str = "block"

    def __post_init__(self):
        check_scale(self.s)
        check_window(self.w_s, "w_s")
        check_window(self.w_d, "w_d")
        if self.block_reduce not in ("mean", "sum"):
            raise ConfigError("block_reduce must be 'mean' or 'sum', got %r" % self.block_reduce)
        if self.warp_alignment not in ("block", "pixel"):
            raise ConfigError("warp_alignment must be 'block' or 'pixel', got %r"
                              % self.warp_alignment)

    @property
    def r_s(self):
        return (self.w_s - 1) // 2

    @property
    def r_d(self):
        return (self.w_d - 1) // 2

    @property
    def n_dirs(self):
        return self.w_s * self.w_s

    def direction_index(self, dir_x, dir_y):
        return (dir_y + self.r_s) * self.w_s + (dir_x + self.r_s)

    def warp_shift(self, x_fine, d_fine):
        """Extra horizontal right-guidance direction for fine ``(x', d')``.

        ``block``: the warped pixel is attributed to coarse cell
        ``x'//s - d'//s`` (shift 0). ``pixel``: it is attributed to the cell
        that actually contains ``x' - d'``; shift is 0 or 1.
        """
        x_fine = np.asarray(x_fine)
        d_fine = np.asarray(d_fine)
        if self.warp_alignment == "block":
            return np.zeros(np.broadcast(x_fine, d_fine).shape, dtype=int)
        s = self.s
        return (x_fine // s - d_fine // s) - (x_fine - d_fine) // s
