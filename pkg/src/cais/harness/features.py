"""Fixed hand-crafted features and the absolute-difference cost volume."""
import numpy as np
from scipy.ndimage import uniform_filter

from ..tensor_io import avg_pool2
from ..validation import ConfigError, ShapeError, check_float_array, check_scale


def extract_features(image):
    """``(4, H, W)``: intensity, horizontal and vertical central gradient, 3x3 variance."""
    img = check_float_array(image, 2, "image")
    p = np.pad(img, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    mean = uniform_filter(img.astype(np.float64), 3, mode="nearest")
    sq = uniform_filter(img.astype(np.float64) ** 2, 3, mode="nearest")
    var = np.maximum(sq - mean * mean, 0.0)
    return np.stack([img, gx, gy, var.astype(img.dtype)])


def downsample_image(image, s):
    """Repeated 2x2 mean pooling down to ratio 1/s."""
    s = check_scale(s)
    out = np.asarray(image, dtype=np.float32)
    while s > 1:
        out = avg_pool2(out)
        s //= 2
    return out


def build_cost_volume(f_left, f_right, n_disp):
    """``CV[y, x, d]`` = channel mean of ``|F_L(y, x) - F_R(y, x - d)|``.

    Columns with ``x - d < 0`` get the largest in-bounds cost of the volume.
    """
    f_left = check_float_array(f_left, 3, "left features")
    f_right = check_float_array(f_right, 3, "right features")
    if f_left.shape != f_right.shape:
        raise ShapeError("feature shapes differ: %s vs %s" % (f_left.shape, f_right.shape))
    c, h, w = f_left.shape
    if not 1 <= n_disp <= w:
        raise ConfigError("disparity count %d must lie in [1, width=%d]" % (n_disp, w))
    cv = np.zeros((h, w, n_disp), dtype=f_left.dtype)
    invalid = np.zeros((h, w, n_disp), dtype=bool)
    for d in range(n_disp):
        acc = np.zeros((h, w - d), dtype=f_left.dtype)
        for ch in range(c):
            acc = acc + np.abs(f_left[ch, :, d:] - f_right[ch, :, :w - d])
        cv[:, d:, d] = acc / f_left.dtype.type(c)
        invalid[:, :d, d] = True
    if invalid.any():
        cv[invalid] = cv[~invalid].max()
    return cv
