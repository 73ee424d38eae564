"""Disparity regression, training loss and evaluation metrics."""
import numpy as np

from ..validation import ShapeError


def soft_argmin(cv):
    """Expected disparity under ``softmax(-cv)`` along the last axis."""
    cv = np.asarray(cv)
    if cv.shape[-1] < 1:
        raise ShapeError("cost volume needs at least one disparity")
    p = _neg_softmax(cv)
    d = np.arange(cv.shape[-1], dtype=cv.dtype)
    return p @ d


def _neg_softmax(cv):
    z = -cv
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_argmin_backward(cv, upstream):
    cv = np.asarray(cv)
    p = _neg_softmax(cv)
    d = np.arange(cv.shape[-1], dtype=cv.dtype)
    pred = p @ d
    return -p * (d - pred[..., None]) * np.asarray(upstream, dtype=cv.dtype)[..., None]


def _check(pred, gt, mask):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError("prediction %s and ground truth %s differ" % (pred.shape, gt.shape))
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != gt.shape:
        raise ShapeError("mask %s does not match %s" % (mask.shape, gt.shape))
    if not mask.any():
        raise ValueError("empty evaluation mask")
    return pred, gt, mask


def smooth_l1(pred, gt, mask=None):
    """Masked mean of the Huber(1) loss; returns ``(loss, d_loss/d_pred)``."""
    pred, gt, mask = _check(pred, gt, mask)
    e = pred - gt
    a = np.abs(e)
    per = np.where(a < 1, 0.5 * e * e, a - 0.5)
    n = mask.sum()
    loss = per[mask].sum() / n
    grad = np.where(mask, np.where(a < 1, e, np.sign(e)), 0) / n
    return float(loss), grad.astype(pred.dtype)


def epe(pred, gt, mask=None):
    pred, gt, mask = _check(pred, gt, mask)
    return float(np.abs(pred - gt)[mask].mean())


def bad_ratio(pred, gt, mask=None, delta=1.0):
    pred, gt, mask = _check(pred, gt, mask)
    return float((np.abs(pred - gt)[mask] > delta).mean())
