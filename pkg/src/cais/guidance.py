"""Guidance generation from a fine/coarse feature-map pair.

For every direction ``(dir_x, dir_y)`` of a ``w_s x w_s`` window the encoder
sees, per fine pixel, the fine feature vector, the coarse feature vector of
the neighbouring coarse cell in that direction (zero outside the image) and
a two-channel location map holding the pixel's signed displacement to that
cell. A shared 3-layer per-pixel MLP turns this into one logit per direction
and a softmax across directions gives the guidance field ``(K, H*s, W*s)``.

Feature maps are ``(C, H, W)`` arrays.
"""
import os
from dataclasses import dataclass, fields

import numpy as np

from .flops import tally
from .tensor_io import read_tensor, write_tensor
from .validation import ConfigError, ShapeError, check_feature_pair, check_scale, check_window


@dataclass
class GuidanceParams:
    """Weights of the shared per-pixel MLP (rows are output units)."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def init(cls, n_in, hidden=16, n_out=1, seed=0, dtype=np.float32):
        """Uniform(+-sqrt(1/fan_in)) initialization."""
        rng = np.random.default_rng(seed)

        def layer(fan_in, fan_out):
            bound = np.sqrt(1.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            return w.astype(dtype), b.astype(dtype)

        w1, b1 = layer(n_in, hidden)
        w2, b2 = layer(hidden, hidden)
        w3, b3 = layer(hidden, n_out)
        return cls(w1, b1, w2, b2, w3, b3)

    @classmethod
    def zeros_like(cls, other):
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    @property
    def n_in(self):
        return self.w1.shape[1]

    @property
    def hidden(self):
        return self.w1.shape[0]

    @property
    def n_out(self):
        return self.w3.shape[0]

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    def names(self):
        return [f.name for f in fields(self)]

    def astype(self, dtype):
        return GuidanceParams(*(a.astype(dtype) for a in self.arrays()))

    def copy(self):
        return GuidanceParams(*(a.copy() for a in self.arrays()))

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec):
        out, i = [], 0
        for a in self.arrays():
            out.append(vec[i:i + a.size].reshape(a.shape).astype(a.dtype))
            i += a.size
        return GuidanceParams(*out)

    def save(self, directory):
        """One CVT1 file per array: ``layer{1,2,3}_{weight,bias}.cvt1``."""
        os.makedirs(directory, exist_ok=True)
        for name, a in zip(self.names(), self.arrays()):
            write_tensor(os.path.join(directory, _FILE_NAMES[name]), a)

    @classmethod
    def load(cls, directory):
        arrays = []
        for f in fields(cls):
            a = read_tensor(os.path.join(directory, _FILE_NAMES[f.name]))
            arrays.append(a if f.name.startswith("w") else a.reshape(-1))
        return cls(*arrays)


_FILE_NAMES = {"w1": "layer1_weight.cvt1", "b1": "layer1_bias.cvt1",
               "w2": "layer2_weight.cvt1", "b2": "layer2_bias.cvt1",
               "w3": "layer3_weight.cvt1", "b3": "layer3_bias.cvt1"}


def nearest_expand(f_coarse, s):
    """Blockwise copy of each coarse value into an ``s x s`` fine block."""
    s = check_scale(s)
    f_coarse = np.asarray(f_coarse)
    return f_coarse.repeat(s, axis=-2).repeat(s, axis=-1)


def _center_offsets(s):
    o = np.arange(s)
    return np.where(o < s // 2, o - s // 2, o - s // 2 + 1)


def make_location_map(s, direction, fine_hw, w_s=3):
    """Integer location map ``(2, H, W)``: channel 0 horizontal, 1 vertical.

    The center direction holds the signed in-block distance to the block
    center (zero skipped, vertical axis positive upward); direction
    ``(dir_x, dir_y)`` subtracts ``s * dir_x`` horizontally and adds
    ``s * dir_y`` vertically.
    """
    s = check_scale(s)
    w_s = check_window(w_s, "w_s")
    r = (w_s - 1) // 2
    dir_x, dir_y = direction
    if abs(dir_x) > r or abs(dir_y) > r:
        raise ConfigError("direction %s outside the %dx%d window" % (direction, w_s, w_s))
    h, w = fine_hw
    offsets = _center_offsets(s)
    ps_x = offsets[np.arange(w) % s] - s * dir_x
    ps_y = -offsets[np.arange(h) % s] + s * dir_y
    out = np.empty((2, h, w), dtype=np.float32)
    out[0] = ps_x[None, :]
    out[1] = ps_y[:, None]
    return out


def _directions(w_s):
    r = (w_s - 1) // 2
    return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _coarse_lookup(f_coarse, s, direction, fine_hw):
    """Coarse features of cell ``(y'//s + dir_y, x'//s + dir_x)``; zero outside."""
    c, h, w = f_coarse.shape
    dir_x, dir_y = direction
    yy = np.arange(fine_hw[0]) // s + dir_y
    xx = np.arange(fine_hw[1]) // s + dir_x
    valid = ((yy >= 0) & (yy < h))[:, None] & ((xx >= 0) & (xx < w))[None, :]
    vals = f_coarse[:, np.clip(yy, 0, h - 1)][:, :, np.clip(xx, 0, w - 1)]
    return np.where(valid[None], vals, 0).astype(f_coarse.dtype), valid


def _encoder_input(f_fine, f_coarse, s, direction, w_s):
    _, h, w = f_fine.shape
    lookup, _ = _coarse_lookup(f_coarse, s, direction, (h, w))
    loc = make_location_map(s, direction, (h, w), w_s).astype(f_fine.dtype)
    return np.concatenate([f_fine, lookup, loc], axis=0)  # (2C+2, H, W)


def _check_params(params, n_in):
    if params.n_in != n_in:
        raise ShapeError("guidance params expect %d input channels, features give %d"
                         % (params.n_in, n_in))


def _mlp_forward(params, x):
    """``x``: (N, n_in) rows -> (N, n_out) plus cache for the backward pass."""
    n = x.shape[0]
    z1 = x @ params.w1.T + params.b1
    a1 = np.maximum(z1, 0)
    z2 = a1 @ params.w2.T + params.b2
    a2 = np.maximum(z2, 0)
    out = a2 @ params.w3.T + params.b3
    macs = n * (params.n_in * params.hidden + params.hidden * params.hidden
                + params.hidden * params.n_out)
    tally("guidance", mul=macs, add=macs)
    return out, (x, z1, a1, z2, a2)


def _mlp_backward(params, cache, d_out):
    x, z1, a1, z2, a2 = cache
    d_z2 = (d_out @ params.w3) * (z2 > 0)
    d_z1 = (d_z2 @ params.w2) * (z1 > 0)
    grads = GuidanceParams(w1=d_z1.T @ x, b1=d_z1.sum(axis=0),
                           w2=d_z2.T @ a1, b2=d_z2.sum(axis=0),
                           w3=d_out.T @ a2, b3=d_out.sum(axis=0))
    return grads, d_z1 @ params.w1


def guidance_logit_map(params, f_fine, f_coarse, direction, s, w_s=3):
    """Pre-softmax logit map ``(H*s, W*s)`` for one direction."""
    s = check_scale(s)
    f_fine, f_coarse = check_feature_pair(f_fine, f_coarse, s)
    if params.n_out != 1:
        raise ShapeError("per-direction logits need a single-output head")
    x = _encoder_input(f_fine, f_coarse, s, direction, w_s)
    _check_params(params, x.shape[0])
    _, h, w = x.shape
    dtype = np.result_type(x, params.w1)
    out, _ = _mlp_forward(params.astype(dtype), x.reshape(x.shape[0], -1).T.astype(dtype))
    return out.reshape(h, w)


def _softmax(logits):
    k = logits.shape[0]
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=0, keepdims=True)
    n_pix = logits[0].size
    tally("guidance", add=2 * k * n_pix, div=k * n_pix, exp=k * n_pix)
    return out


def _forward(params, f_fine, f_coarse, s, w_s):
    s = check_scale(s)
    w_s = check_window(w_s, "w_s")
    f_fine, f_coarse = check_feature_pair(f_fine, f_coarse, s)
    dtype = np.result_type(f_fine, f_coarse, params.w1)
    f_fine = f_fine.astype(dtype, copy=False)
    f_coarse = f_coarse.astype(dtype, copy=False)
    params = params.astype(dtype)
    c, h, w = f_fine.shape
    dirs = _directions(w_s)
    k = len(dirs)
    if params.n_out == 1:
        x = np.stack([_encoder_input(f_fine, f_coarse, s, d, w_s) for d in dirs])
        _check_params(params, x.shape[1])
        rows = x.transpose(0, 2, 3, 1).reshape(k * h * w, -1)
        out, cache = _mlp_forward(params, rows)
        logits = out.reshape(k, h, w)
    elif params.n_out == k:
        # fusion head: unshifted concatenation, one logit per direction
        x = np.concatenate([f_fine, nearest_expand(f_coarse, s)], axis=0)
        _check_params(params, x.shape[0])
        rows = x.reshape(x.shape[0], -1).T
        out, cache = _mlp_forward(params, rows)
        logits = out.T.reshape(k, h, w)
    else:
        raise ShapeError("head width %d fits neither 1 nor %d directions" % (params.n_out, k))
    g = _softmax(logits)
    return g, dict(params=params, cache=cache, dirs=dirs, c=c, s=s, w_s=w_s,
                   f_fine=f_fine, f_coarse=f_coarse)


def guidance_forward(params, f_fine, f_coarse, s, w_s=3):
    """Guidance field ``(w_s**2, H*s, W*s)``; sums to one across directions."""
    return _forward(params, f_fine, f_coarse, s, w_s)[0]


def _backward(g, state, upstream):
    upstream = np.asarray(upstream, dtype=g.dtype)
    if upstream.shape != g.shape:
        raise ShapeError("upstream shape %s does not match guidance %s" % (upstream.shape, g.shape))
    params, dirs, c, s = state["params"], state["dirs"], state["c"], state["s"]
    k, h, w = g.shape
    d_logits = g * (upstream - np.sum(g * upstream, axis=0, keepdims=True))
    f_coarse = state["f_coarse"]
    d_fc = np.zeros_like(f_coarse)
    hc, wc = f_coarse.shape[1:]
    if params.n_out == 1:
        grads, d_rows = _mlp_backward(params, state["cache"], d_logits.reshape(k * h * w, 1))
        d_x = d_rows.reshape(k, h, w, -1).transpose(0, 3, 1, 2)
        d_ff = d_x[:, :c].sum(axis=0)
        for idx, (dx, dy) in enumerate(dirs):
            _, valid = _coarse_lookup(f_coarse, s, (dx, dy), (h, w))
            contrib = np.where(valid[None], d_x[idx, c:2 * c], 0)
            per_block = contrib.reshape(c, hc, s, wc, s).sum(axis=(2, 4))
            ys = slice(max(0, -dy), min(hc, hc - dy))
            xs = slice(max(0, -dx), min(wc, wc - dx))
            yt = slice(max(0, dy), min(hc, hc + dy))
            xt = slice(max(0, dx), min(wc, wc + dx))
            d_fc[:, yt, xt] += per_block[:, ys, xs]
    else:
        grads, d_rows = _mlp_backward(params, state["cache"], d_logits.reshape(k, -1).T)
        d_x = d_rows.T.reshape(-1, h, w)
        d_ff = d_x[:c]
        d_fc += d_x[c:2 * c].reshape(c, hc, s, wc, s).sum(axis=(2, 4))
    return grads, d_ff, d_fc


def guidance_backward(params, f_fine, f_coarse, s, w_s, upstream):
    """Vector-Jacobian product of :func:`guidance_forward`.

    Returns ``(param_grads, d_f_fine, d_f_coarse)``.
    """
    g, state = _forward(params, f_fine, f_coarse, s, w_s)
    return _backward(g, state, upstream)


def guidance_forward_with_state(params, f_fine, f_coarse, s, w_s=3):
    """Forward pass that keeps what :func:`guidance_backward_from_state` needs."""
    return _forward(params, f_fine, f_coarse, s, w_s)


def guidance_backward_from_state(g, state, upstream):
    return _backward(g, state, upstream)


def shared_logit_forward(params, f_fine, f_coarse, s, w_s=3):
    """Field from the center-direction logit copied to every direction.

    Without a per-direction encoding all K logits are equal, so the softmax
    is uniform whatever the params. Returns ``(field, state)``.
    """
    s = check_scale(s)
    w_s = check_window(w_s, "w_s")
    f_fine, f_coarse = check_feature_pair(f_fine, f_coarse, s)
    dtype = np.result_type(f_fine, f_coarse, params.w1)
    params = params.astype(dtype)
    x = _encoder_input(f_fine.astype(dtype), f_coarse.astype(dtype), s, (0, 0), w_s)
    _check_params(params, x.shape[0])
    _, h, w = x.shape
    out, cache = _mlp_forward(params, x.reshape(x.shape[0], -1).T)
    logits = np.broadcast_to(out.reshape(1, h, w), (w_s * w_s, h, w))
    g = _softmax(logits)
    return g, dict(params=params, cache=cache, shape=(h, w))


def shared_logit_backward(g, state, upstream):
    """Param gradients of :func:`shared_logit_forward` (zero up to round-off)."""
    upstream = np.asarray(upstream, dtype=g.dtype)
    if upstream.shape != g.shape:
        raise ShapeError("upstream shape %s does not match guidance %s" % (upstream.shape, g.shape))
    d_logits = g * (upstream - np.sum(g * upstream, axis=0, keepdims=True))
    grads, _ = _mlp_backward(state["params"], state["cache"], d_logits.sum(axis=0).reshape(-1, 1))
    return grads


def fusion_head_params(n_channels, w_s=3, hidden=16, seed=0, dtype=np.float32):
    """Params for the unshifted fine/coarse concatenation with a K-wide head."""
    return GuidanceParams.init(2 * n_channels, hidden, w_s * w_s, seed, dtype)


def encoder_params(n_channels, hidden=16, seed=0, dtype=np.float32):
    """Params for the per-direction encoder with location maps."""
    return GuidanceParams.init(2 * n_channels + 2, hidden, 1, seed, dtype)
