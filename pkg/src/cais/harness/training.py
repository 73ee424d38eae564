"""Toy end-to-end training of the guidance encoder on synthetic scenes."""
from dataclasses import dataclass, field, replace

import numpy as np

from ..aggregate import cais_forward_backward, cais_upsample, upsample_baseline
from ..guidance import (GuidanceParams, encoder_params, fusion_head_params,
                        guidance_backward_from_state, guidance_forward_with_state,
                        shared_logit_backward, shared_logit_forward)
from ..validation import AggregationConfig, ConfigError
from .features import build_cost_volume, downsample_image, extract_features
from .losses import smooth_l1, soft_argmin, soft_argmin_backward
from .optim import AdamState, adam_step
from .scenes import gen_scene

# none: separate left/right fields; left_only: the left field plays both
# roles; no_encoding: one center-direction logit reused for every direction;
# fusion_head: unshifted fine/coarse concatenation with one output per direction
ABLATIONS = ("none", "left_only", "no_encoding", "fusion_head")
N_FEATURES = 4


@dataclass
class StereoSample:
    """Everything the aggregation needs for one scene."""
    f_left_fine: np.ndarray
    f_left_coarse: np.ndarray
    f_right_fine: np.ndarray
    f_right_coarse: np.ndarray
    cv_coarse: np.ndarray
    gt: np.ndarray
    mask: np.ndarray


def prepare_sample(left, right, s, d_max, gt=None, mask=None, cost_gain=1.0):
    """Fine/coarse features for both views and the coarse cost volume.

    ``cost_gain`` scales the matching cost, i.e. sets the sharpness of the
    soft-argmin regression.
    """
    if d_max % s:
        raise ConfigError("d_max=%d must be a multiple of the scale %d" % (d_max, s))
    left_c = downsample_image(left, s)
    right_c = downsample_image(right, s)
    f_lc = extract_features(left_c)
    f_rc = extract_features(right_c)
    return StereoSample(
        f_left_fine=extract_features(left), f_left_coarse=f_lc,
        f_right_fine=extract_features(right), f_right_coarse=f_rc,
        cv_coarse=build_cost_volume(f_lc, f_rc, d_max // s) * np.float32(cost_gain),
        gt=gt, mask=mask)


def sample_from_scene(scene, s, cost_gain=1.0):
    return prepare_sample(scene.left, scene.right, s, scene.d_max, scene.gt, scene.mask,
                          cost_gain)


# Toy-scale aggregation: the warped right lookup is attributed per pixel so
# that stage 1 can interpolate odd fine disparities, and the left-center
# factor is off because it damps every cost by roughly 1/K at initialization.
TOY_AGGREGATION = AggregationConfig(left_center_scale=False, warp_alignment="pixel")


@dataclass
class ToyConfig:
    seed: int = 0
    iterations: int = 500
    s: int = 2
    size: tuple = (32, 32)
    d_max: int = 8
    n_rects: int = 3
    contrast: float = 1.0
    cost_gain: float = 20.0
    ablation: str = "none"
    hidden: int = 16
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    n_heldout: int = 8
    batch_size: int = 4
    agg: AggregationConfig = field(default_factory=lambda: TOY_AGGREGATION)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError("ablation must be one of %s, got %r" % (ABLATIONS, self.ablation))
        if self.agg.s != self.s:
            self.agg = replace(self.agg, s=self.s)


def init_params(cfg):
    if cfg.ablation == "fusion_head":
        return fusion_head_params(N_FEATURES, cfg.agg.w_s, cfg.hidden, seed=cfg.seed)
    return encoder_params(N_FEATURES, cfg.hidden, seed=cfg.seed)


def _field(params, f_fine, f_coarse, s, w_s, ablation):
    if ablation == "no_encoding":
        g, state = shared_logit_forward(params, f_fine, f_coarse, s, w_s)
        return g, (shared_logit_backward, state)
    g, state = guidance_forward_with_state(params, f_fine, f_coarse, s, w_s)
    return g, (guidance_backward_from_state, state)


def _field_grads(g, handle, upstream):
    backward, state = handle
    out = backward(g, state, upstream)
    return out if isinstance(out, GuidanceParams) else out[0]


def predict_guidance(params, sample, s, w_s, ablation="none"):
    g_left, _ = _field(params, sample.f_left_fine, sample.f_left_coarse, s, w_s, ablation)
    if ablation == "left_only":
        return g_left, g_left
    g_right, _ = _field(params, sample.f_right_fine, sample.f_right_coarse, s, w_s, ablation)
    return g_left, g_right


def predict_disparity(params, sample, agg, ablation="none"):
    g_left, g_right = predict_guidance(params, sample, agg.s, agg.w_s, ablation)
    return soft_argmin(cais_upsample(sample.cv_coarse, g_left, g_right, agg))


def loss_and_grads(params, sample, agg, ablation="none"):
    """Smooth-L1 disparity loss and its gradient w.r.t. the guidance params."""
    s, w_s = agg.s, agg.w_s
    g_left, h_left = _field(params, sample.f_left_fine, sample.f_left_coarse, s, w_s, ablation)
    if ablation == "left_only":
        g_right, h_right = g_left, None
    else:
        g_right, h_right = _field(params, sample.f_right_fine, sample.f_right_coarse, s, w_s,
                                  ablation)

    def head(volume):
        pred = soft_argmin(volume)
        loss, d_pred = smooth_l1(pred, sample.gt, sample.mask)
        return loss, soft_argmin_backward(volume, d_pred)

    _, loss, (_, d_gl, d_gr) = cais_forward_backward(sample.cv_coarse, g_left, g_right, agg, head)
    if h_right is None:
        return loss, _field_grads(g_left, h_left, d_gl + d_gr)
    gl = _field_grads(g_left, h_left, d_gl)
    gr = _field_grads(g_right, h_right, d_gr)
    return loss, GuidanceParams(*(a + b for a, b in zip(gl.arrays(), gr.arrays())))


def heldout_samples(cfg):
    base = 1_000_003 + 7919 * cfg.seed
    return [sample_from_scene(gen_scene(base + i, cfg.size, cfg.n_rects, cfg.d_max,
                                        contrast=cfg.contrast), cfg.s, cfg.cost_gain)
            for i in range(cfg.n_heldout)]


def pooled_epe(preds, samples):
    err = np.concatenate([np.abs(p - smp.gt)[smp.mask] for p, smp in zip(preds, samples)])
    return float(err.mean())


def evaluate(params, samples, agg, ablation="none"):
    return pooled_epe([predict_disparity(params, smp, agg, ablation) for smp in samples], samples)


def baseline_epe(samples, s, method):
    preds = [soft_argmin(upsample_baseline(smp.cv_coarse, s, method)) for smp in samples]
    return pooled_epe(preds, samples)


def optimize(params, batch_at, iterations, agg, ablation="none", state=None, progress=None):
    """Adam on the batch-mean loss; ``batch_at(it)`` yields the samples of step ``it``.

    Returns ``(params, losses)``. A non-finite loss aborts the run.
    """
    state = AdamState() if state is None else state
    losses = []
    for it in range(iterations):
        batch = batch_at(it)
        loss, grads = 0.0, None
        for sample in batch:
            l, g = loss_and_grads(params, sample, agg, ablation)
            loss += l / len(batch)
            g = [a / len(batch) for a in g.arrays()]
            grads = g if grads is None else [x + y for x, y in zip(grads, g)]
        if not np.isfinite(loss):
            raise FloatingPointError("training diverged at iteration %d (loss=%r)" % (it, loss))
        params = GuidanceParams(*adam_step(state, params.arrays(), grads))
        losses.append(loss)
        if progress is not None:
            progress(it, loss)
    return params, losses


def train_toy(cfg, progress=None):
    """Train the guidance encoder; return ``(params, report)``.

    The report holds per-iteration training losses plus held-out EPEs of the
    initial and trained CAIS pipelines and of the fixed baselines.
    """
    params = init_params(cfg)
    heldout = heldout_samples(cfg)
    report = {
        "seed": cfg.seed, "iterations": cfg.iterations, "scale": cfg.s,
        "ablation": cfg.ablation,
        "epe_nearest": baseline_epe(heldout, cfg.s, "nearest"),
        "epe_trilinear": baseline_epe(heldout, cfg.s, "trilinear"),
        "epe_deconv_bilinear": baseline_epe(heldout, cfg.s, "deconv_bilinear"),
        "losses": [],
    }
    if cfg.iterations == 0:
        return params, report
    report["epe_initial"] = evaluate(params, heldout, cfg.agg, cfg.ablation)

    def batch_at(it):
        return [sample_from_scene(gen_scene((cfg.seed, it, b), cfg.size, cfg.n_rects,
                                            cfg.d_max, contrast=cfg.contrast),
                                  cfg.s, cfg.cost_gain)
                for b in range(cfg.batch_size)]

    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    params, report["losses"] = optimize(params, batch_at, cfg.iterations, cfg.agg,
                                        cfg.ablation, state, progress)
    report["epe_final"] = evaluate(params, heldout, cfg.agg, cfg.ablation)
    return params, report


def format_report(report):
    """``key = value`` lines; losses are summarized, not listed."""
    lines = []
    for key, value in report.items():
        if key == "losses":
            if value:
                lines.append("loss_first = %.6f" % value[0])
                lines.append("loss_last = %.6f" % value[-1])
            continue
        if isinstance(value, float):
            lines.append("%s = %.6f" % (key, value))
        else:
            lines.append("%s = %s" % (key, value))
    return "\n".join(lines)
