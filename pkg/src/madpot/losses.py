"""Segmentation and classification losses with their analytic gradients.

Maps are stacked class-first: ``pred[..., 0, :, :]`` is the normal-class
probability and ``pred[..., 1, :, :]`` the abnormal one.  Labels follow the
score convention ``y = 1`` for abnormal; :func:`label_to_target` converts
from the dataset convention (1 normal, 0 abnormal).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, ShapeError
from .numkit import as_float

__all__ = [
    "LossWeights",
    "GDICE_EPS",
    "PROB_CLAMP",
    "label_to_target",
    "gdice",
    "gdice_grad",
    "focal",
    "focal_grad",
    "bce",
    "bce_grad",
    "level_loss",
    "total_loss",
]

GDICE_EPS = 1e-5
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_gdice: float = 1.0
    w_focal: float = 1.0
    w_bce: float = 1.0

    def __post_init__(self):
        if min(self.w_gdice, self.w_focal, self.w_bce) < 0:
            raise InvalidConfigError("loss weights must be nonnegative")


def label_to_target(label):
    """Dataset label (1 normal, 0 abnormal) to anomaly target (1 abnormal)."""
    return 1.0 - np.asarray(label, dtype=np.float64)


def _one_hot(mask):
    mask = np.asarray(mask, dtype=np.float64)
    return np.stack([1.0 - mask, mask], axis=-3)


def _gdice_parts(pred, mask):
    pred = as_float(pred)
    r = _one_hot(mask)
    if r.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} and mask {np.shape(mask)} disagree")
    w = 1.0 / (r.sum(axis=(-2, -1)) ** 2 + GDICE_EPS)
    inter = (w * (r * pred).sum(axis=(-2, -1))).sum(axis=-1)
    union = (w * (r + pred).sum(axis=(-2, -1))).sum(axis=-1)
    return r, w, inter, union


def gdice(pred, mask):
    """Generalized Dice loss with inverse squared class-volume weights.

    Parameters
    ----------
    pred : ndarray, shape (..., 2, H, W)
        Per-class probability maps.
    mask : ndarray, shape (..., H, W)
        Binary abnormal mask.
    """
    _, _, inter, union = _gdice_parts(pred, mask)
    return 1.0 - 2.0 * (inter + GDICE_EPS) / (union + GDICE_EPS)


def gdice_grad(pred, mask):
    r, w, inter, union = _gdice_parts(pred, mask)
    den = (union + GDICE_EPS)[..., None, None, None]
    num = (inter + GDICE_EPS)[..., None, None, None]
    w = w[..., None, None]
    return -2.0 * (w * r * den - num * w) / den**2


def _complement(pred, pred_normal):
    if pred_normal is None:
        return 1.0 - pred
    q = as_float(pred_normal)
    if q.shape != pred.shape:
        raise ShapeError(f"complement {q.shape} and prediction {pred.shape} disagree")
    return q


def _focal_terms(pred, target, alpha_f, pred_normal):
    raw = as_float(pred)
    t = np.asarray(target, dtype=np.float64)
    if raw.shape != t.shape:
        raise ShapeError(f"prediction {raw.shape} and target {t.shape} disagree")
    comp = _complement(raw, pred_normal)
    pt_raw = np.where(t > 0.5, raw, comp)
    pt = np.clip(pt_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    at = np.where(t > 0.5, alpha_f, 1.0 - alpha_f)
    # 1 - pt is the other class probability; take it directly when available
    one_m = np.clip(np.where(t > 0.5, comp, raw), PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (pt_raw > PROB_CLAMP) & (pt_raw < 1.0 - PROB_CLAMP)
    return pt, one_m, at, t, inside


def focal(pred, target, gamma_f=2.0, alpha_f=0.25, pred_normal=None):
    """Pixel-mean focal loss on abnormal-class probabilities.

    ``pred_normal`` optionally supplies ``1 - pred`` computed without
    cancellation (e.g. the other softmax output).
    """
    pt, one_m, at, _, _ = _focal_terms(pred, target, alpha_f, pred_normal)
    return np.mean(-at * one_m**gamma_f * np.log(pt), axis=(-2, -1))


def focal_grad(pred, target, gamma_f=2.0, alpha_f=0.25, pred_normal=None):
    """Gradient w.r.t. ``pred``; with ``pred_normal`` given, returns ``(d_pred, d_pred_normal)``."""
    pt, one_m, at, t, inside = _focal_terms(pred, target, alpha_f, pred_normal)
    raw = as_float(pred)
    n = raw.shape[-1] * raw.shape[-2]
    log_pt = np.log(pt)
    # loss = -at * one_m**g * log(pt); pt and one_m are the two class probs
    d_pt = np.where(inside, -at * one_m**gamma_f / pt, 0.0) / n
    if gamma_f == 0:
        d_one_m = np.zeros_like(pt)
    else:
        d_one_m = np.where(inside, -at * gamma_f * one_m ** (gamma_f - 1.0) * log_pt, 0.0) / n
    pos = t > 0.5
    d_ab = np.where(pos, d_pt, d_one_m)
    d_n = np.where(pos, d_one_m, d_pt)
    if pred_normal is None:
        return d_ab - d_n
    return d_ab, d_n


def bce(pred, target, pred_normal=None):
    """Binary cross-entropy; ``target`` is 1 for abnormal.

    ``pred_normal`` optionally supplies ``1 - pred`` computed without
    cancellation.
    """
    raw = as_float(pred)
    p = np.maximum(raw, PROB_CLAMP)
    q = np.maximum(_complement(raw, pred_normal), PROB_CLAMP)
    y = np.asarray(target, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(q))


def bce_grad(pred, target, pred_normal=None):
    """Gradient w.r.t. ``pred``; with ``pred_normal`` given, returns ``(d_pred, d_pred_normal)``."""
    raw = as_float(pred)
    comp = _complement(raw, pred_normal)
    y = np.asarray(target, dtype=np.float64)
    d_p = np.where(raw > PROB_CLAMP, -y / np.maximum(raw, PROB_CLAMP), 0.0)
    d_q = np.where(comp > PROB_CLAMP, -(1.0 - y) / np.maximum(comp, PROB_CLAMP), 0.0)
    if pred_normal is None:
        return d_p - d_q
    return d_p, d_q


def level_loss(maps, c_prob, mask, target, has_mask, weights=LossWeights()):
    """Loss of one feature level for a batch, with gradients.

    Parameters
    ----------
    maps : ndarray, shape (B, 2, H, W)
    c_prob : ndarray, shape (B, 2)
        Image-level (normal, abnormal) probabilities.
    mask : ndarray, shape (B, H, W)
        Ignored where ``has_mask`` is False.
    target : ndarray, shape (B,)
        1 for abnormal.
    has_mask : ndarray of bool, shape (B,)

    Returns
    -------
    loss : ndarray, shape (B,)
    d_maps : ndarray, shape (B, 2, H, W)
    d_c : ndarray, shape (B, 2)
    """
    hm = np.asarray(has_mask, dtype=bool)
    loss = weights.w_bce * bce(c_prob[:, 1], target, c_prob[:, 0])
    d_ab, d_n = bce_grad(c_prob[:, 1], target, c_prob[:, 0])
    d_c = weights.w_bce * np.stack([d_n, d_ab], axis=-1)
    d_maps = np.zeros_like(maps)
    if hm.any():
        m, mk = maps[hm], mask[hm]
        seg = weights.w_gdice * gdice(m, mk) + weights.w_focal * focal(m[:, 1], mk, pred_normal=m[:, 0])
        loss = loss.copy()
        loss[hm] += seg
        g = weights.w_gdice * gdice_grad(m, mk)
        f_ab, f_n = focal_grad(m[:, 1], mk, pred_normal=m[:, 0])
        g[:, 1] += weights.w_focal * f_ab
        g[:, 0] += weights.w_focal * f_n
        d_maps[hm] = g
    return loss, d_maps, d_c


def total_loss(levels, target, mask=None, weights=LossWeights()):
    """Sum of per-level losses for one sample.

    ``levels`` is a sequence of ``(maps, c_abnormal)`` pairs with maps of
    shape (2, H, W).  Without a mask only the BCE term contributes.
    """
    total = 0.0
    for maps, c_ab in levels:
        term = weights.w_bce * float(bce(c_ab, target))
        if mask is not None:
            term += weights.w_gdice * float(gdice(maps, mask))
            term += weights.w_focal * float(focal(maps[1], mask, pred_normal=maps[0]))
        total += term
    return total
