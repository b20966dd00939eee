"""Finite-difference check of the full training gradient.

The loss is re-evaluated in ``np.longdouble`` with the transport plans held
at the values used by the analytic pass, so roundoff in the differences is
far below the 1e-4 tolerance.  Entries whose +-h evaluations land on
different sides of a ReLU or probability clamp are reported separately:
the loss is not differentiable across those points and central
differences there measure the kink, not the gradient.
"""

import numpy as np

from madpot.losses import PROB_CLAMP
from madpot.model import FrozenEncoder, ModelConfig, init_params
from madpot.numkit import Rng
from madpot.scoring import ScoringConfig
from madpot.training import Batch, TrainConfig, batch_loss, forward_backward

LD = np.longdouble
H = 1e-5
TOL = 1e-4
FLOOR = 1e-8


def small_problem(trial, variant="cl+pot", vision="both"):
    """A G=4, d=4, K=2 configuration with one normal and one abnormal image."""
    mc = ModelConfig(
        image_side=4, patch_side=2, feat_dim=4, token_dim=3, num_prompts=2, context_len=2, encoder_seed=trial
    )
    cfg = TrainConfig(model=mc, scoring=ScoringConfig(variant=variant), vision=vision, seed=trial)
    enc = FrozenEncoder.from_config(mc)
    params = init_params(mc, 1000 + trial)
    rng = Rng(trial + 77)
    images = rng.uniform(0, 1, (2, 4, 4))
    masks = (rng.uniform(0, 1, (2, 4, 4)) > 0.6).astype(float)
    masks[0] = 0.0
    batch = Batch(images, np.array([0.0, 1.0]), masks, np.array([True, True]))
    return params, enc, batch, cfg


def _pattern(fwd):
    """Boolean signature of every non-smooth point the loss passes through."""
    parts = []
    for cache in (fwd["a1"], fwd["a2"]):
        if cache is not None:
            parts += [cache[k] > 0 for k in ("z", "zd", "zg")]
    for lv in (1, 2):
        for arr in (fwd["c_prob"][lv], fwd["maps"][lv]):
            parts += [arr > PROB_CLAMP, arr < 1 - PROB_CLAMP]
    return np.concatenate([np.ravel(p) for p in parts])


def check(params, enc, batch, cfg):
    """Return ``(worst_rel_error, n_failures, n_kinks, n_checked)``."""
    _, grads, plans = forward_backward(batch, params, enc, cfg)
    base = params.copy()
    for key in base.arrays:
        base.arrays[key] = base.arrays[key].astype(LD)
    worst, fails, kinks, checked = 0.0, 0, 0, 0
    for key, g in grads.items():
        for idx in np.ndindex(g.shape):
            plus, minus = base.copy(), base.copy()
            plus.arrays[key][idx] += LD(H)
            minus.arrays[key][idx] -= LD(H)
            fp, fwd_p, _ = batch_loss(plus, enc, batch, cfg, plans)
            fm, fwd_m, _ = batch_loss(minus, enc, batch, cfg, plans)
            numeric = float((fp - fm) / (2 * LD(H)))
            analytic = float(g[idx])
            if abs(analytic) < FLOOR and abs(numeric) < FLOOR:
                continue
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
            if rel > TOL and not np.array_equal(_pattern(fwd_p), _pattern(fwd_m)):
                kinks += 1
                continue
            checked += 1
            worst = max(worst, rel)
            fails += rel > TOL
    return worst, fails, kinks, checked
