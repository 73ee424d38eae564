"""Content-aware inter-scale cost aggregation.

Cost volumes are ``(H, W, D)`` arrays (row, column, disparity); guidance
fields are ``(K, H*s, W*s)`` with ``K = w_s**2`` direction channels, where
direction ``(dir_x, dir_y)`` lives at channel ``(dir_y + r) * w_s + dir_x + r``.

The decomposed path runs a 1D disparity stage ``(H, W, D) -> (H, W, D*s)``
driven by right-view guidance sampled along the disparity warp, then a 2D
spatial stage ``-> (H*s, W*s, D*s)`` driven by left-view guidance. The full
3D path forms every spatial-disparity weight as a product of left and
warped right guidance and is kept as the reference operator.

Warped right lookup: for a fine position ``(x', y', d')`` and a coarse
candidate ``(x, y, d)``, the right guidance is read at fine pixel
``(x' - d', y')`` in direction ``((x - d) - c, y - y'//s)`` where ``c`` is the
coarse column the warped pixel is attributed to (see
``AggregationConfig.warp_shift``). Lookups whose warped column leaves the
image, or whose direction leaves the window, weigh zero.

Every window reduction is an explicit accumulation in a fixed tap order so
that results are bitwise reproducible and match scalar loops exactly.
"""
import numpy as np

from .flops import tally
from .validation import (AggregationConfig, ConfigError, ShapeError, check_cost_volume,
                         check_guidance, check_scale)

_EPS_RENORM = 1e-12


def _prepare(cv, g_left, g_right, cfg):
    cv = check_cost_volume(cv)
    H, W, _ = cv.shape
    g_left = check_guidance(g_left, cfg.s, (H, W), cfg.w_s, "left guidance")
    g_right = check_guidance(g_right, cfg.s, (H, W), cfg.w_s, "right guidance")
    dtype = np.result_type(cv, g_left, g_right)
    return cv.astype(dtype, copy=False), g_left.astype(dtype, copy=False), \
        g_right.astype(dtype, copy=False)


def _scatter_add(target, index, values):
    """target.flat[index] += values, deterministic."""
    flat = np.bincount(index.ravel(), weights=values.ravel(), minlength=target.size)
    target += flat.reshape(target.shape).astype(target.dtype, copy=False)


# ---------------------------------------------------------------------------
# 1D disparity stage
# ---------------------------------------------------------------------------

def _disparity_taps(H, W, D, cfg):
    """Index/mask tables for every (candidate offset, block pixel) tap.

    Each block entry holds the flat index into the right guidance array
    ``(K, H*s, W*s)`` and the validity mask, both shaped ``(H, W, D*s)``.
    """
    s, Hs, Ws = cfg.s, H * cfg.s, W * cfg.s
    dp = np.arange(D * s)
    d0 = dp // s
    taps = []
    for t in range(-cfg.r_d, cfg.r_d + 1):
        d = d0 + t
        d_valid = (d >= 0) & (d < D)
        block = []
        for a in range(s):
            for b in range(s):
                xp = np.arange(W) * s + b
                u = xp[:, None] - dp[None, :]  # (W, Ds)
                dir_x = -t + cfg.warp_shift(xp[:, None], dp[None, :])
                valid = ((u >= 0) & (u < Ws) & d_valid[None, :]
                         & (np.abs(dir_x) <= cfg.r_s))
                k = cfg.direction_index(np.clip(dir_x, -cfg.r_s, cfg.r_s), 0)
                rows = np.arange(H) * s + a
                index = (k[None] * Hs + rows[:, None, None]) * Ws + np.clip(u, 0, Ws - 1)[None]
                block.append((index, np.broadcast_to(valid[None], index.shape)))
        taps.append((t, np.clip(d, 0, D - 1), d_valid, block))
    return taps


def _disparity_forward(cv, g_right, g_left, cfg):
    H, W, D = cv.shape
    s = cfg.s
    dtype = cv.dtype
    n1 = H * W * D * s
    inv_block = dtype.type(1.0 / (s * s))
    taps = _disparity_taps(H, W, D, cfg)

    raw = []
    g_flat = g_right.ravel()
    for _, _, _, block in taps:
        acc = np.zeros((H, W, D * s), dtype)
        for index, valid in block:
            acc = acc + np.where(valid, g_flat[index], 0)
        tally("disparity", add=s * s * n1)
        if cfg.block_reduce == "mean":
            acc = acc * inv_block
            tally("disparity", mul=n1)
        raw.append(acc)

    fallback = None
    if cfg.stage1_renormalize:
        total = np.zeros((H, W, D * s), dtype)
        for r in raw:
            total = total + r
        fallback = total < _EPS_RENORM
        safe = np.where(fallback, dtype.type(1), total)
        n_valid = sum(d_valid.astype(dtype) for _, _, d_valid, _ in taps)
        weights = []
        for r, (_, _, d_valid, _) in zip(raw, taps):
            uniform = (d_valid / n_valid).astype(dtype)[None, None, :]
            weights.append(np.where(fallback, uniform, r / safe))
        tally("disparity", add=cfg.w_d * n1, div=cfg.w_d * n1)
    else:
        weights = raw

    out = np.zeros((H, W, D * s), dtype)
    gathered = []
    for w, (_, d_idx, d_valid, _) in zip(weights, taps):
        c = np.where(d_valid[None, None, :], cv[:, :, d_idx], 0)
        gathered.append(c)
        out = out + w * c
    tally("disparity", mul=cfg.w_d * n1, add=cfg.w_d * n1)

    factor = None
    pre = out
    if cfg.left_center_scale:
        center = g_left[cfg.direction_index(0, 0)]
        facc = np.zeros((H, W), dtype)
        for a in range(s):
            for b in range(s):
                facc = facc + center[a::s, b::s]
        tally("left_center", add=s * s * H * W)
        if cfg.block_reduce == "mean":
            facc = facc * inv_block
            tally("left_center", mul=H * W)
        factor = facc
        out = pre * factor[:, :, None]
        tally("left_center", mul=n1)
    cache = dict(taps=taps, raw=raw, weights=weights, fallback=fallback,
                 gathered=gathered, pre=pre, factor=factor)
    return out, cache


def disparity_upsample(cv_coarse, g_right, g_left, cfg=None):
    """Upsample the disparity axis: ``(H, W, D) -> (H, W, D*s)``.

    For every coarse cell and fine disparity ``d'`` the candidates
    ``d'//s + t`` (``|t| <= (w_d-1)/2``, inside ``[0, D)``) are weighted by
    the block-reduced warped right guidance; weights are renormalized to sum
    to one unless disabled. The result is optionally scaled by the
    block-reduced left guidance of the center direction.
    """
    cfg = AggregationConfig() if cfg is None else cfg
    cv, g_left, g_right = _prepare(cv_coarse, g_left, g_right, cfg)
    if cv.shape[2] * cfg.s < cfg.w_d:
        raise ShapeError("D*s = %d is smaller than the disparity window %d"
                         % (cv.shape[2] * cfg.s, cfg.w_d))
    return _disparity_forward(cv, g_right, g_left, cfg)[0]


def _disparity_backward(cv, g_right, g_left, cfg, cache, upstream):
    H, W, D = cv.shape
    s = cfg.s
    dtype = cv.dtype
    inv_block = dtype.type(1.0 / (s * s))
    d_cv = np.zeros_like(cv)
    d_gl = np.zeros_like(g_left)
    d_gr = np.zeros_like(g_right)

    d_pre = upstream
    if cfg.left_center_scale:
        factor = cache["factor"]
        d_pre = upstream * factor[:, :, None]
        d_factor = np.sum(upstream * cache["pre"], axis=2)
        if cfg.block_reduce == "mean":
            d_factor = d_factor * inv_block
        center = cfg.direction_index(0, 0)
        for a in range(s):
            for b in range(s):
                d_gl[center, a::s, b::s] += d_factor

    taps = cache["taps"]
    d_weights = []
    flat_d = np.arange(H * W * D).reshape(H, W, D)
    for w, c, (_, d_idx, d_valid, _) in zip(cache["weights"], cache["gathered"], taps):
        contrib = np.where(d_valid[None, None, :], d_pre * w, 0)
        _scatter_add(d_cv, flat_d[:, :, d_idx], contrib)
        d_weights.append(d_pre * c)

    if cfg.stage1_renormalize:
        total = sum(cache["raw"])
        dot = sum(dw * w for dw, w in zip(d_weights, cache["weights"]))
        live = ~cache["fallback"]
        safe = np.where(live, total, 1)
        d_raw = [np.where(live, (dw - dot) / safe, 0) for dw in d_weights]
    else:
        d_raw = d_weights

    for dr, (_, _, _, block) in zip(d_raw, taps):
        if cfg.block_reduce == "mean":
            dr = dr * inv_block
        for index, valid in block:
            _scatter_add(d_gr, index, np.where(valid, dr, 0))
    return d_cv, d_gl, d_gr


# ---------------------------------------------------------------------------
# 2D spatial stage
# ---------------------------------------------------------------------------

def _spatial_taps(H, W, cfg):
    s = cfg.s
    yq = np.arange(H * s) // s
    xq = np.arange(W * s) // s
    for dy in range(-cfg.r_s, cfg.r_s + 1):
        for dx in range(-cfg.r_s, cfg.r_s + 1):
            yy, xx = yq + dy, xq + dx
            valid = ((yy >= 0) & (yy < H))[:, None] & ((xx >= 0) & (xx < W))[None, :]
            yield (cfg.direction_index(dx, dy), np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1),
                   valid)


def _spatial_forward(cv1, g_left, cfg):
    H, W, Dn = cv1.shape
    s = cfg.s
    dtype = np.result_type(cv1, g_left)
    n_fine = H * s * W * s * Dn
    taps = cfg.w_s * cfg.w_s
    num = np.zeros((H * s, W * s, Dn), dtype)
    norm = np.zeros((H * s, W * s), dtype) if cfg.border_renormalize_spatial else None
    for k, yy, xx, valid in _spatial_taps(H, W, cfg):
        vals = np.where(valid[:, :, None], cv1[yy][:, xx], 0)
        num = num + g_left[k][:, :, None] * vals
        if norm is not None:
            norm = norm + np.where(valid, g_left[k], 0)
    tally("spatial", mul=taps * n_fine, add=taps * n_fine)
    if norm is None:
        return num, None
    safe = np.where(norm < _EPS_RENORM, dtype.type(1), norm)
    tally("spatial", add=taps * H * s * W * s, div=n_fine)
    return num / safe[:, :, None], safe


def spatial_upsample(cv1, g_left, cfg=None):
    """Upsample rows/columns: ``(H, W, Dn) -> (H*s, W*s, Dn)``.

    Each fine pixel mixes the cost vectors of the ``w_s x w_s`` coarse cells
    around its containing cell with its own left-guidance weights.
    """
    cfg = AggregationConfig() if cfg is None else cfg
    cv1 = check_cost_volume(cv1)
    g_left = check_guidance(g_left, cfg.s, cv1.shape[:2], cfg.w_s, "left guidance")
    return _spatial_forward(cv1, g_left, cfg)[0]


def _spatial_backward(cv1, g_left, cfg, norm, out, upstream):
    H, W, Dn = cv1.shape
    s = cfg.s
    d_cv1 = np.zeros_like(cv1)
    d_gl = np.zeros_like(g_left)
    d_num = upstream if norm is None else upstream / norm[:, :, None]
    d_norm = None if norm is None else -np.sum(upstream * out, axis=2) / norm
    for k, yy, xx, valid in _spatial_taps(H, W, cfg):
        vals = np.where(valid[:, :, None], cv1[yy][:, xx], 0)
        d_gl[k] += np.sum(d_num * vals, axis=2)
        if d_norm is not None:
            d_gl[k] += np.where(valid, d_norm, 0)
        contrib = np.where(valid[:, :, None], g_left[k][:, :, None] * d_num, 0)
        # sum fine contributions per source block, then place at the shifted cell
        per_block = contrib.reshape(H, s, W, s, Dn).sum(axis=(1, 3))
        dy = (k // cfg.w_s) - cfg.r_s
        dx = (k % cfg.w_s) - cfg.r_s
        ys = slice(max(0, -dy), min(H, H - dy))
        xs = slice(max(0, -dx), min(W, W - dx))
        yt = slice(max(0, dy), min(H, H + dy))
        xt = slice(max(0, dx), min(W, W + dx))
        d_cv1[yt, xt] += per_block[ys, xs]
    return d_cv1, d_gl


# ---------------------------------------------------------------------------
# decomposed pipeline
# ---------------------------------------------------------------------------

def cais_upsample(cv_coarse, g_left, g_right, cfg=None):
    """Decomposed aggregation ``(H, W, D) -> (H*s, W*s, D*s)``."""
    cfg = AggregationConfig() if cfg is None else cfg
    cv, g_left, g_right = _prepare(cv_coarse, g_left, g_right, cfg)
    cv1, _ = _disparity_forward(cv, g_right, g_left, cfg)
    return _spatial_forward(cv1, g_left, cfg)[0]


def cais_forward_backward(cv_coarse, g_left, g_right, cfg, upstream_fn):
    """Forward pass, then backpropagate ``upstream_fn(out)``.

    Returns ``(out, upstream_result, (d_cv, d_g_left, d_g_right))`` where
    ``upstream_fn`` maps the fine volume to ``(extra, d_out)``.
    """
    cv, g_left, g_right = _prepare(cv_coarse, g_left, g_right, cfg)
    cv1, cache = _disparity_forward(cv, g_right, g_left, cfg)
    out, norm = _spatial_forward(cv1, g_left, cfg)
    extra, upstream = upstream_fn(out)
    grads = _cais_backward(cv, g_left, g_right, cfg, cache, cv1, norm, out, upstream)
    return out, extra, grads


def _cais_backward(cv, g_left, g_right, cfg, cache, cv1, norm, out, upstream):
    upstream = np.asarray(upstream, dtype=out.dtype)
    if upstream.shape != out.shape:
        raise ShapeError("upstream shape %s does not match output %s" % (upstream.shape, out.shape))
    d_cv1, d_gl_sp = _spatial_backward(cv1, g_left, cfg, norm, out, upstream)
    d_cv, d_gl, d_gr = _disparity_backward(cv, g_right, g_left, cfg, cache, d_cv1)
    return d_cv, d_gl + d_gl_sp, d_gr


def cais_backward(cv_coarse, g_left, g_right, cfg, upstream):
    """Vector-Jacobian product of :func:`cais_upsample`.

    Returns gradients with respect to ``(cv_coarse, g_left, g_right)``.
    """
    cfg = AggregationConfig() if cfg is None else cfg
    cv, g_left, g_right = _prepare(cv_coarse, g_left, g_right, cfg)
    cv1, cache = _disparity_forward(cv, g_right, g_left, cfg)
    out, norm = _spatial_forward(cv1, g_left, cfg)
    return _cais_backward(cv, g_left, g_right, cfg, cache, cv1, norm, out, upstream)


# ---------------------------------------------------------------------------
# full 3D reference
# ---------------------------------------------------------------------------

def _full3d_taps(H, W, D, cfg):
    s = cfg.s
    Hs, Ws = H * s, W * s
    yq = np.arange(Hs) // s
    xq = np.arange(Ws) // s
    dp = np.arange(D * s)
    u = np.arange(Ws)[:, None] - dp[None, :]
    u_valid = (u >= 0) & (u < Ws)
    u_clip = np.clip(u, 0, Ws - 1)
    shift = cfg.warp_shift(np.arange(Ws)[:, None], dp[None, :])  # (Ws, Ds)
    rows = np.arange(Hs)[:, None, None]
    for t in range(-cfg.r_d, cfg.r_d + 1):
        d = dp // s + t
        d_valid = (d >= 0) & (d < D)
        for dy in range(-cfg.r_s, cfg.r_s + 1):
            yy = yq + dy
            y_valid = (yy >= 0) & (yy < H)
            for dx in range(-cfg.r_s, cfg.r_s + 1):
                xx = xq + dx
                x_valid = (xx >= 0) & (xx < W)
                rdx = dx - t + shift
                r_valid = u_valid & (np.abs(rdx) <= cfg.r_s)  # (Ws, Ds)
                k_right = cfg.direction_index(np.clip(rdx, -cfg.r_s, cfg.r_s), dy)
                valid = (y_valid[:, None, None] & x_valid[None, :, None]
                         & d_valid[None, None, :])
                yield dict(k_left=cfg.direction_index(dx, dy),
                           right_index=(k_right[None] * Hs + rows) * Ws + u_clip[None],
                           y=np.clip(yy, 0, H - 1), x=np.clip(xx, 0, W - 1),
                           d=np.clip(d, 0, D - 1), valid=valid, r_valid=r_valid)


def _full3d_terms(cv, g_left, g_right, tap):
    gl = g_left[tap["k_left"]][:, :, None]
    gr = np.where(tap["r_valid"][None], g_right.ravel()[tap["right_index"]], 0)
    c = np.where(tap["valid"], cv[tap["y"]][:, tap["x"]][:, :, tap["d"]], 0)
    return gl, gr, c


def full3d_upsample(cv_coarse, g_left, g_right, cfg=None):
    """Reference aggregation over the full ``w_s x w_s x w_d`` coarse window.

    Weight of coarse neighbour ``(x, y, d)`` for fine ``(x', y', d')`` is the
    left guidance toward ``(x, y)`` times the warped right guidance.
    Taps are summed with disparity outermost, then rows, then columns.
    """
    cfg = AggregationConfig() if cfg is None else cfg
    cv, g_left, g_right = _prepare(cv_coarse, g_left, g_right, cfg)
    H, W, D = cv.shape
    s = cfg.s
    out = np.zeros((H * s, W * s, D * s), cv.dtype)
    for tap in _full3d_taps(H, W, D, cfg):
        gl, gr, c = _full3d_terms(cv, g_left, g_right, tap)
        out = out + (gl * gr) * c
    n_taps = cfg.w_s * cfg.w_s * cfg.w_d
    tally("full3d", mul=2 * n_taps * out.size, add=n_taps * out.size)
    return out


def full3d_backward(cv_coarse, g_left, g_right, cfg, upstream):
    """Vector-Jacobian product of :func:`full3d_upsample`."""
    cfg = AggregationConfig() if cfg is None else cfg
    cv, g_left, g_right = _prepare(cv_coarse, g_left, g_right, cfg)
    H, W, D = cv.shape
    s = cfg.s
    Hs, Ws, Ds = H * s, W * s, D * s
    upstream = np.asarray(upstream, dtype=cv.dtype)
    if upstream.shape != (Hs, Ws, Ds):
        raise ShapeError("upstream shape %s does not match output %s"
                         % (upstream.shape, (Hs, Ws, Ds)))
    d_cv = np.zeros_like(cv)
    d_gl = np.zeros_like(g_left)
    d_gr = np.zeros_like(g_right)
    for tap in _full3d_taps(H, W, D, cfg):
        gl, gr, c = _full3d_terms(cv, g_left, g_right, tap)
        d_gl[tap["k_left"]] += np.sum(upstream * gr * c, axis=2)
        d_r = np.where(tap["r_valid"][None], upstream * gl * c, 0)
        _scatter_add(d_gr, np.broadcast_to(tap["right_index"], d_r.shape), d_r)
        d_c = np.where(tap["valid"], upstream * gl * gr, 0)
        index = ((tap["y"][:, None, None] * W + tap["x"][None, :, None]) * D
                 + tap["d"][None, None, :])
        _scatter_add(d_cv, np.broadcast_to(index, d_c.shape), d_c)
    return d_cv, d_gl, d_gr


# ---------------------------------------------------------------------------
# fixed-weight baselines
# ---------------------------------------------------------------------------

BASELINE_METHODS = ("nearest", "trilinear", "deconv_bilinear")


def _linear_axis(a, axis, s, stage):
    """Half-pixel aligned linear interpolation along one axis (edges clamp)."""
    n = a.shape[axis]
    src = (np.arange(n * s) + 0.5) / s - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (src - lo).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = n * s
    frac = frac.reshape(shape)
    a_lo = np.take(a, lo, axis=axis)
    a_hi = np.take(a, hi, axis=axis)
    out = a_lo * (1 - frac) + a_hi * frac
    tally(stage, mul=2 * out.size, add=out.size)
    return out


def bilinear_deconv_kernel(s):
    k = 2 * s - s % 2
    factor = (k + 1) // 2
    center = factor - 1 if k % 2 == 1 else factor - 0.5
    return 1 - np.abs(np.arange(k) - center) / factor


def _deconv_axis(a, axis, s, stage):
    """Transposed convolution with the fixed bilinear kernel, stride s."""
    kernel = bilinear_deconv_kernel(s).astype(a.dtype)
    k = kernel.size
    pad = (k - s) // 2
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    full = np.zeros(a.shape[:-1] + ((n - 1) * s + k,), a.dtype)
    for j in range(k):
        full[..., j:j + (n - 1) * s + 1:s] += a * kernel[j]
    tally(stage, mul=k * a.size, add=k * a.size)
    return np.moveaxis(full[..., pad:pad + n * s], -1, axis)


def upsample_baseline(cv_coarse, s, method="trilinear"):
    """Fixed-weight upsampling ``(H, W, D) -> (H*s, W*s, D*s)``."""
    s = check_scale(s)
    cv = check_cost_volume(cv_coarse)
    if method == "nearest":
        return cv.repeat(s, axis=0).repeat(s, axis=1).repeat(s, axis=2)
    if method == "trilinear":
        out = _linear_axis(cv, 2, s, "trilinear_d")
        out = _linear_axis(out, 1, s, "trilinear_x")
        return _linear_axis(out, 0, s, "trilinear_y")
    if method == "deconv_bilinear":
        out = _deconv_axis(cv, 2, s, "deconv_d")
        out = _deconv_axis(out, 1, s, "deconv_x")
        return _deconv_axis(out, 0, s, "deconv_y")
    raise ConfigError("unknown baseline method %r; expected one of %s"
                      % (method, BASELINE_METHODS))
