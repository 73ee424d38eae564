import numpy as np

from cais.validation import AggregationConfig


def one_hot_center(K, shape):
    g = np.zeros((K,) + tuple(shape), np.float32)
    g[K // 2] = 1
    return g


def random_guidance(rng, K, shape, dtype=np.float32):
    """Positive fields normalized across directions, like a softmax output."""
    g = rng.uniform(0.05, 1.0, size=(K,) + tuple(shape))
    return (g / g.sum(axis=0, keepdims=True)).astype(dtype)


def random_instance(rng, H, W, D, cfg=None, dtype=np.float32):
    cfg = AggregationConfig() if cfg is None else cfg
    cv = rng.uniform(0, 5, size=(H, W, D)).astype(dtype)
    fine = (H * cfg.s, W * cfg.s)
    return cv, random_guidance(rng, cfg.n_dirs, fine, dtype), \
        random_guidance(rng, cfg.n_dirs, fine, dtype)


def nearest3d(cv, s):
    return cv.repeat(s, 0).repeat(s, 1).repeat(s, 2)


def in_view_mask(shape_fine):
    """Fine entries ``(y', x', d')`` whose warped column ``x' - d'`` is inside the image."""
    Hs, Ws, Ds = shape_fine
    xf = np.arange(Ws)[None, :, None]
    df = np.arange(Ds)[None, None, :]
    return np.broadcast_to(xf - df >= 0, shape_fine)
