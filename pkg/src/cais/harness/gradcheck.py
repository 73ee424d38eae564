"""Finite-difference verification of every manual backward pass.

All checks run in double precision with central differences of step 1e-4.
The guidance MLP is piecewise linear, so a perturbation of 1e-4 can push a
pre-activation across zero and make the numeric slope meaningless. The
numeric side therefore evaluates a shadow copy of the guidance network whose
ReLU masks are frozen at the base point; at the base point this shadow
coincides with the production forward (checked), and its derivative is the
one the analytic backward claims to compute.
"""
from dataclasses import dataclass

import numpy as np

from ..aggregate import cais_backward, cais_upsample
from ..guidance import _directions, _encoder_input, encoder_params, guidance_backward, \
    guidance_forward, nearest_expand
from ..validation import AggregationConfig, ConfigError
from .losses import smooth_l1, soft_argmin, soft_argmin_backward
from .training import N_FEATURES, TOY_AGGREGATION, StereoSample, loss_and_grads

TARGETS = ("guidance", "cais", "soft_argmin", "loss", "end_to_end")
TOLERANCES = {"guidance": 1e-5, "cais": 1e-5, "soft_argmin": 1e-5, "loss": 1e-5,
              "end_to_end": 1e-4}
STEP = 1e-4


@dataclass
class GradcheckResult:
    target: str
    seed: int
    scale: int
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def to_text(self):
        return "\n".join([
            "target = %s" % self.target, "seed = %d" % self.seed, "scale = %d" % self.scale,
            "n_checked = %d" % self.n_checked, "max_rel_error = %.3e" % self.max_rel_error,
            "tolerance = %.0e" % self.tolerance, "passed = %s" % self.passed])


def relative_error(analytic, numeric):
    """Elementwise ``|a - n| / max(|a|, |n|, 1e-3 * max|n|)``, maximized.

    The floor keeps entries whose true gradient is zero from dividing
    round-off by round-off.
    """
    a = np.ravel(analytic).astype(np.float64)
    n = np.ravel(numeric).astype(np.float64)
    if a.size == 0:
        return 0.0
    floor = 1e-3 * np.abs(n).max()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    diff = np.abs(a - n)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(diff == 0, 0.0, diff / scale)
    return float(rel.max())


def central_difference(f, x, step=STEP):
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f(x)
        flat[i] = old - step
        fm = f(x)
        flat[i] = old
        grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# shadow guidance network with frozen activation pattern
# ---------------------------------------------------------------------------

def _rows(params, f_fine, f_coarse, s, w_s):
    k = w_s * w_s
    _, h, w = f_fine.shape
    if params.n_out == 1:
        x = np.stack([_encoder_input(f_fine, f_coarse, s, d, w_s) for d in _directions(w_s)])
        return x.transpose(0, 2, 3, 1).reshape(k * h * w, -1)
    x = np.concatenate([f_fine, nearest_expand(f_coarse, s)], axis=0)
    return x.reshape(x.shape[0], -1).T


def shadow_guidance(params, f_fine, f_coarse, s, w_s, masks=None):
    """``(field, masks)``; given ``masks`` the ReLUs act as fixed 0/1 gates."""
    k = w_s * w_s
    _, h, w = f_fine.shape
    rows = _rows(params, f_fine, f_coarse, s, w_s)
    z1 = rows @ params.w1.T + params.b1
    m1 = z1 > 0 if masks is None else masks[0]
    z2 = (z1 * m1) @ params.w2.T + params.b2
    m2 = z2 > 0 if masks is None else masks[1]
    out = (z2 * m2) @ params.w3.T + params.b3
    logits = out.reshape(k, h, w) if params.n_out == 1 else out.T.reshape(k, h, w)
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True), (m1, m2)


def _frozen(params, f_fine, f_coarse, s, w_s):
    g, masks = shadow_guidance(params, f_fine, f_coarse, s, w_s)
    ref = guidance_forward(params, f_fine, f_coarse, s, w_s)
    if np.abs(g - ref).max() > 1e-12:
        raise AssertionError("shadow guidance departs from the production forward")
    return masks


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

def _coarse_dims(s):
    # small enough for exhaustive differencing of every input
    return (3, 3, 2) if s == 2 else (1, 2, 2)


def _guidance_field(rng, k, shape):
    g = rng.uniform(0.05, 1.0, size=(k,) + shape)
    return g / g.sum(axis=0, keepdims=True)


def _features(rng, coarse_hw, s):
    h, w = coarse_hw
    return (rng.normal(size=(N_FEATURES, h * s, w * s)),
            rng.normal(size=(N_FEATURES, h, w)))


def _upstream(rng, shape, upstream):
    if upstream == "zero":
        return np.zeros(shape)
    return rng.normal(size=shape)


def _check_guidance(rng, s, cfg, upstream):
    f_f, f_c = _features(rng, (2, 2), s)
    params = encoder_params(N_FEATURES, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    w_s = cfg.w_s
    up = _upstream(rng, (w_s * w_s,) + f_f.shape[1:], upstream)
    grads, d_ff, d_fc = guidance_backward(params, f_f, f_c, s, w_s, up)
    masks = _frozen(params, f_f, f_c, s, w_s)
    n_p = central_difference(lambda v: np.vdot(
        shadow_guidance(params.unflatten(v), f_f, f_c, s, w_s, masks)[0], up), params.flatten())
    n_ff = central_difference(lambda v: np.vdot(
        shadow_guidance(params, v, f_c, s, w_s, masks)[0], up), f_f)
    n_fc = central_difference(lambda v: np.vdot(
        shadow_guidance(params, f_f, v, s, w_s, masks)[0], up), f_c)
    pairs = [(grads.flatten(), n_p), (d_ff, n_ff), (d_fc, n_fc)]
    return pairs


def _check_cais(rng, s, cfg, upstream):
    H, W, D = _coarse_dims(s)
    cv = rng.uniform(0, 5, size=(H, W, D))
    gl = _guidance_field(rng, cfg.n_dirs, (H * s, W * s))
    gr = _guidance_field(rng, cfg.n_dirs, (H * s, W * s))
    up = _upstream(rng, (H * s, W * s, D * s), upstream)
    analytic = cais_backward(cv, gl, gr, cfg, up)
    inputs = [cv, gl, gr]
    pairs = []
    for i, a in enumerate(analytic):
        def f(v, i=i):
            args = list(inputs)
            args[i] = v
            return np.vdot(cais_upsample(*args, cfg), up)
        pairs.append((a, central_difference(f, inputs[i])))
    return pairs


def _check_soft_argmin(rng, s, cfg, upstream):
    cv = rng.normal(size=(4, 4, 2 * s))
    up = _upstream(rng, (4, 4), upstream)
    a = soft_argmin_backward(cv, up)
    return [(a, central_difference(lambda v: np.vdot(soft_argmin(v), up), cv))]


def _check_loss(rng, s, cfg, upstream):
    gt = rng.uniform(0, 8, size=(5, 6))
    pred = gt + rng.uniform(-3, 3, size=gt.shape)
    # keep clear of the |e| = 1 switch where the second derivative jumps
    e = pred - gt
    pred = np.where(np.abs(np.abs(e) - 1) < 0.05, gt + 1.5 * np.sign(e), pred)
    mask = rng.uniform(size=gt.shape) < 0.8
    mask[0, 0] = True
    scale = 0.0 if upstream == "zero" else 1.0
    _, grad = smooth_l1(pred, gt, mask)
    numeric = central_difference(lambda v: scale * smooth_l1(v, gt, mask)[0], pred)
    return [(scale * grad, numeric)]


def _check_end_to_end(rng, s, cfg, upstream):
    H, W, D = _coarse_dims(s)
    f_lf, f_lc = _features(rng, (H, W), s)
    f_rf, f_rc = _features(rng, (H, W), s)
    gt = rng.uniform(0, D * s - 1, size=(H * s, W * s))
    sample = StereoSample(f_left_fine=f_lf, f_left_coarse=f_lc, f_right_fine=f_rf,
                          f_right_coarse=f_rc, cv_coarse=rng.uniform(0, 4, size=(H, W, D)),
                          gt=gt, mask=np.ones(gt.shape, bool))
    params = encoder_params(N_FEATURES, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    scale = 0.0 if upstream == "zero" else 1.0
    _, grads = loss_and_grads(params, sample, cfg)
    w_s = cfg.w_s
    m_l = _frozen(params, f_lf, f_lc, s, w_s)
    m_r = _frozen(params, f_rf, f_rc, s, w_s)

    def loss(v):
        p = params.unflatten(v)
        g_l = shadow_guidance(p, f_lf, f_lc, s, w_s, m_l)[0]
        g_r = shadow_guidance(p, f_rf, f_rc, s, w_s, m_r)[0]
        pred = soft_argmin(cais_upsample(sample.cv_coarse, g_l, g_r, cfg))
        return scale * smooth_l1(pred, gt, sample.mask)[0]

    return [(scale * grads.flatten(), central_difference(loss, params.flatten()))]


_CHECKS = {"guidance": _check_guidance, "cais": _check_cais,
           "soft_argmin": _check_soft_argmin, "loss": _check_loss,
           "end_to_end": _check_end_to_end}


def gradcheck(target, seed=0, s=2, cfg=None, upstream="random"):
    """Compare a manual backward pass against central differences.

    ``upstream="zero"`` backpropagates a zero cotangent, for which both
    sides vanish. The end-to-end chain defaults to the toy training
    aggregation config, the other targets to the operator defaults.
    """
    if target not in _CHECKS:
        raise ConfigError("unknown gradcheck target %r; expected one of %s" % (target, TARGETS))
    if upstream not in ("random", "zero"):
        raise ConfigError("upstream must be 'random' or 'zero'")
    if cfg is None:
        base = TOY_AGGREGATION if target == "end_to_end" else AggregationConfig()
        cfg = AggregationConfig(**{**base.__dict__, "s": s})
    rng = np.random.default_rng([seed, TARGETS.index(target)])
    pairs = _CHECKS[target](rng, cfg.s, cfg, upstream)
    err = max(relative_error(a, n) for a, n in pairs)
    return GradcheckResult(target=target, seed=seed, scale=cfg.s, max_rel_error=err,
                           n_checked=int(sum(np.size(n) for _, n in pairs)),
                           tolerance=TOLERANCES[target])


def adjoint_check(seed=0, s=2, cfg=None):
    """Relative gap in ``<cais(A), Y> = <A, cais_backward_cv(Y)>``."""
    cfg = AggregationConfig(s=s) if cfg is None else cfg
    rng = np.random.default_rng([seed, 99])
    H, W, D = 4, 4, 3
    cv = rng.normal(size=(H, W, D))
    gl = _guidance_field(rng, cfg.n_dirs, (H * cfg.s, W * cfg.s))
    gr = _guidance_field(rng, cfg.n_dirs, (H * cfg.s, W * cfg.s))
    y = rng.normal(size=(H * cfg.s, W * cfg.s, D * cfg.s))
    lhs = np.vdot(cais_upsample(cv, gl, gr, cfg), y)
    rhs = np.vdot(cv, cais_backward(cv, gl, gr, cfg, y)[0])
    return float(abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
