"""ROC-AUC for image scores and pooled pixel maps, and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetricError
from .numkit import Rng

__all__ = ["roc_auc", "pixel_auc", "EvalReport", "PIXEL_CAP"]

PIXEL_CAP = 1_000_000


def roc_auc(scores, labels):
    """Mann-Whitney AUC; ties between a positive and a negative count 1/2.

    Uses the rank-sum identity with mid-ranks, so it runs in O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auc(maps, masks, seed=0, cap=PIXEL_CAP):
    """AUC over all pixels pooled across images.

    Pools larger than ``cap`` are reduced to a uniform subsample of ``cap``
    pixels drawn with a splitmix64 stream seeded by ``seed``.
    """
    scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    labels = np.concatenate([np.asarray(m).ravel() > 0.5 for m in masks])
    if scores.size != labels.size:
        raise ShapeError("maps and masks have different pixel counts")
    if scores.size > cap:
        # partial Fisher-Yates: first `cap` slots of a seeded permutation
        rng = Rng(seed)
        idx = np.arange(scores.size)
        draws = rng.random(cap)
        for i in range(cap):
            j = i + int(draws[i] * (scores.size - i))
            idx[i], idx[j] = idx[j], idx[i]
        keep = idx[:cap]
        scores, labels = scores[keep], labels[keep]
    return roc_auc(scores, labels)


@dataclass
class EvalReport:
    ac_auc: float
    as_auc: float | None
    n_images: int
    variant: str
    config: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)
    timing: dict | None = None

    def to_dict(self):
        doc = {"ac_auc": self.ac_auc}
        if self.as_auc is not None:
            doc["as_auc"] = self.as_auc
        doc["n_images"] = self.n_images
        doc["variant"] = self.variant
        doc["config"] = self.config
        doc["scores"] = self.scores
        if self.timing is not None:
            doc["timing"] = self.timing
        return doc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"
