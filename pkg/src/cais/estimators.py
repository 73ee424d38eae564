"""scikit-learn style wrappers around the guidance encoder and baselines.

Samples are stereo pairs: ``X`` is a sequence of ``(left, right)`` images
(2D float arrays of identical shape) and ``y`` the matching fine-resolution
disparity maps. Every pair is turned into fine/coarse features and a coarse
cost volume inside the estimator, so callers only handle images.
"""
from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .aggregate import BASELINE_METHODS, cais_upsample, upsample_baseline
from .guidance import GuidanceParams
from .harness.losses import soft_argmin
from .harness.optim import AdamState
from .harness.training import (ABLATIONS, N_FEATURES, TOY_AGGREGATION, ToyConfig,
                               init_params, optimize, predict_guidance, prepare_sample)
from .validation import ConfigError, ShapeError, check_float_array


def _check_pairs(X):
    pairs = []
    for i, pair in enumerate(X):
        if len(pair) != 2:
            raise ShapeError("sample %d is not a (left, right) pair" % i)
        left = check_float_array(pair[0], 2, "left image %d" % i)
        right = check_float_array(pair[1], 2, "right image %d" % i)
        if left.shape != right.shape:
            raise ShapeError("sample %d: left %s and right %s differ"
                             % (i, left.shape, right.shape))
        pairs.append((left, right))
    if not pairs:
        raise ValueError("no samples given")
    return pairs


def _check_targets(y, pairs, name="y"):
    if y is None:
        return [None] * len(pairs)
    if len(y) != len(pairs):
        raise ShapeError("%d %s maps for %d samples" % (len(y), name, len(pairs)))
    out = []
    for (left, _), t in zip(pairs, y):
        t = np.asarray(t)
        if t.shape != left.shape:
            raise ShapeError("%s map %s does not match image %s" % (name, t.shape, left.shape))
        out.append(t)
    return out


class _StereoBase(BaseEstimator):

    def _samples(self, X, y=None, masks=None):
        pairs = _check_pairs(X)
        ys = _check_targets(y, pairs)
        ms = _check_targets(masks, pairs, "mask")
        samples = []
        for (left, right), gt, m in zip(pairs, ys, ms):
            if gt is not None:
                gt = gt.astype(np.float32)
                m = np.ones(gt.shape, bool) if m is None else m.astype(bool)
            samples.append(prepare_sample(left, right, self.scale, self.d_max, gt, m,
                                          self.cost_gain))
        return samples

    def predict(self, X):
        """Soft-argmin disparity map per pair."""
        return [soft_argmin(v) for v in self.transform(X)]

    def score(self, X, y, masks=None):
        """Negative pooled EPE, so that larger is better."""
        preds = self.predict(X)
        ms = _check_targets(masks, _check_pairs(X), "mask")
        err = [np.abs(p - np.asarray(t))[np.ones(p.shape, bool) if m is None else m]
               for p, t, m in zip(preds, y, ms)]
        return -float(np.concatenate(err).mean())


class CAISUpsampler(TransformerMixin, _StereoBase):
    """Learned content-aware upsampling of coarse stereo cost volumes.

    ``fit`` trains the shared guidance encoder with Adam on smooth-L1
    disparity loss; ``transform`` returns fine cost volumes and ``predict``
    their soft-argmin disparities.
    """

    def __init__(self, scale=2, d_max=8, w_s=3, w_d=3, hidden=16, iterations=500,
                 batch_size=4, lr=1e-2, cost_gain=20.0, ablation="none",
                 warp_alignment="pixel", left_center_scale=False, random_state=0):
        self.scale = scale
        self.d_max = d_max
        self.w_s = w_s
        self.w_d = w_d
        self.hidden = hidden
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.cost_gain = cost_gain
        self.ablation = ablation
        self.warp_alignment = warp_alignment
        self.left_center_scale = left_center_scale
        self.random_state = random_state

    def _config(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError("ablation must be one of %s" % (ABLATIONS,))
        agg = replace(TOY_AGGREGATION, s=self.scale, w_s=self.w_s, w_d=self.w_d,
                      warp_alignment=self.warp_alignment,
                      left_center_scale=self.left_center_scale)
        return ToyConfig(seed=self.random_state, s=self.scale, d_max=self.d_max,
                         hidden=self.hidden, lr=self.lr, ablation=self.ablation,
                         cost_gain=self.cost_gain, batch_size=self.batch_size, agg=agg)

    def fit(self, X, y, masks=None):
        cfg = self._config()
        samples = self._samples(X, y, masks)
        rng = np.random.default_rng(self.random_state)
        order = [rng.permutation(len(samples)) for _ in range(
            -(-self.iterations * self.batch_size // len(samples)))]
        order = np.concatenate(order) if order else np.zeros(0, int)

        def batch_at(it):
            idx = order[it * self.batch_size:(it + 1) * self.batch_size]
            return [samples[i] for i in idx]

        params = init_params(cfg)
        self.params_, self.loss_curve_ = optimize(
            params, batch_at, self.iterations, cfg.agg, self.ablation,
            AdamState(lr=self.lr))
        self.agg_ = cfg.agg
        return self

    def set_guidance_params(self, params):
        """Use already trained params (for example loaded from disk) without fitting."""
        if not isinstance(params, GuidanceParams):
            raise TypeError("expected GuidanceParams")
        self.params_ = params
        self.loss_curve_ = []
        self.agg_ = self._config().agg
        return self

    def guidance(self, X):
        """``(G_L, G_R)`` per pair."""
        check_is_fitted(self, "params_")
        return [predict_guidance(self.params_, smp, self.agg_.s, self.agg_.w_s, self.ablation)
                for smp in self._samples(X)]

    def transform(self, X):
        check_is_fitted(self, "params_")
        out = []
        for smp in self._samples(X):
            g_l, g_r = predict_guidance(self.params_, smp, self.agg_.s, self.agg_.w_s,
                                        self.ablation)
            out.append(cais_upsample(smp.cv_coarse, g_l, g_r, self.agg_))
        return out


class FixedUpsampler(TransformerMixin, _StereoBase):
    """Fixed-weight baseline (nearest, trilinear or bilinear deconvolution)."""

    def __init__(self, method="trilinear", scale=2, d_max=8, cost_gain=20.0):
        self.method = method
        self.scale = scale
        self.d_max = d_max
        self.cost_gain = cost_gain

    def fit(self, X=None, y=None, masks=None):
        if self.method not in BASELINE_METHODS:
            raise ConfigError("method must be one of %s" % (BASELINE_METHODS,))
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        return [upsample_baseline(smp.cv_coarse, self.scale, self.method)
                for smp in self._samples(X)]


__all__ = ["CAISUpsampler", "FixedUpsampler", "N_FEATURES"]
