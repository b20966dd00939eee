"""Two-stage optimisation: transport plans with parameters fixed, then Adam.

The forward pass is batched over images.  Transport plans enter the
backward pass as constants, so gradients flow through the cost matrices
only.  Every derivative is written out by hand next to its forward step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, NumericalDegeneracyError, TrainingError
from .losses import LossWeights, label_to_target, level_loss
from .model import (
    ADAPTER_KEYS,
    PROJECTOR_KEYS,
    PROMPT_KEYS,
    VISION_MODES,
    FrozenEncoder,
    ModelConfig,
    ModelParams,
    _prompt_forward,
    init_params,
    patchify,
    prompt_vjp,
)
from .numkit import (
    Rng,
    bicubic_resize,
    bicubic_resize_adjoint,
    l2_normalize_rows,
    l2_normalize_rows_vjp,
    softmax,
    softmax_vjp,
)
from .scoring import ScoringConfig, learns_prompts, solve_plans, transport_mode, uses_cl

__all__ = [
    "TrainConfig",
    "Batch",
    "OptimizerState",
    "TrainResult",
    "trainable_keys",
    "forward",
    "forward_backward",
    "adam_step",
    "train",
    "predict",
]

log = logging.getLogger(__name__)

LEVELS = (1, 2)
HEADS = ("det", "seg")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    vision: str = "both"
    weights: LossWeights = field(default_factory=LossWeights)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise InvalidConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise InvalidConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.vision not in VISION_MODES:
            raise InvalidConfigError(f"unknown vision mode {self.vision!r}; expected one of {VISION_MODES}")


@dataclass
class Batch:
    """Stacked images with anomaly targets (1 = abnormal) and optional masks."""

    images: np.ndarray
    target: np.ndarray
    masks: np.ndarray
    has_mask: np.ndarray

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        if not samples:
            raise InvalidInputError("batch is empty")
        images = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])
        target = label_to_target([s.label for s in samples])
        has_mask = np.array([s.mask is not None for s in samples])
        masks = np.stack(
            [np.zeros(images.shape[1:]) if s.mask is None else np.asarray(s.mask, dtype=np.float64) for s in samples]
        )
        return cls(images, target, masks, has_mask)

    def __len__(self):
        return len(self.images)

    def take(self, idx):
        return Batch(self.images[idx], self.target[idx], self.masks[idx], self.has_mask[idx])


def _adapts(vision):
    return vision in ("adapter", "both"), vision in ("projector", "both")


def trainable_keys(variant, vision):
    """Names of the parameter tensors that receive gradient updates."""
    adapt1, adapt2 = _adapts(vision)
    keys = []
    if adapt1:
        keys += ADAPTER_KEYS
    if adapt2:
        keys += PROJECTOR_KEYS
    if learns_prompts(variant):
        keys += PROMPT_KEYS
    return keys


# --- forward -----------------------------------------------------------------


def _heads(f, prefix, params, gamma):
    """Adapter/projector forward with the pre-activations kept for backward."""
    z = f @ params[f"{prefix}.shared"]
    s = np.maximum(z, 0.0)
    zd = s @ params[f"{prefix}.det"]
    zg = s @ params[f"{prefix}.seg"]
    out = {"f": f, "z": z, "s": s, "zd": zd, "zg": zg, "det": np.maximum(zd, 0.0), "seg": np.maximum(zg, 0.0)}
    if gamma is not None:
        out["res"] = gamma * s + (1.0 - gamma) * f
    return out


def forward(params, encoder, images, scoring, vision="both", plans=None):
    """Full model forward for a stack of images.

    Parameters
    ----------
    plans : dict, optional
        Transport plans keyed ``(level, head, class_index)`` with arrays of
        shape (B, G, K).  Solved from the current costs when omitted.

    Returns
    -------
    dict
        ``c_prob`` (level -> (B, 2)), ``c_total``, ``maps`` (level ->
        (B, 2, H, W)), ``plans`` and intermediates used by the backward pass.
    """
    cfg = params.config
    adapt1, adapt2 = _adapts(vision)
    images = np.asarray(images, dtype=np.float64)
    b, h, w = images.shape
    side = cfg.grid_side
    g, k = cfg.num_patches, cfg.num_prompts
    tau = scoring.tau
    mode = transport_mode(scoring.variant)
    cl = uses_cl(scoring.variant)

    f1 = np.tanh(patchify(images, cfg.patch_side) @ encoder.w1)
    feats = {}
    if adapt1:
        a1 = _heads(f1, "adapter", params, cfg.gamma)
        feats[1] = (a1["det"], a1["seg"])
        res = a1["res"]
    else:
        a1 = None
        feats[1] = (f1, f1)
        res = f1
    f2 = np.tanh(encoder.mix @ res @ encoder.w2)
    if adapt2:
        a2 = _heads(f2, "projector", params, None)
        feats[2] = (a2["det"], a2["seg"])
    else:
        a2 = None
        feats[2] = (f2, f2)

    text = {}
    for j, (key, cls_key) in enumerate(zip(PROMPT_KEYS, ("normal", "abnormal"))):
        text[j] = _prompt_forward(params[key], encoder.cls_tokens[cls_key], encoder.w_txt)
    prompts = [text[j][1] for j in (0, 1)]
    fused = np.stack([p.mean(axis=0) for p in prompts])
    fused_hat = l2_normalize_rows(fused)

    unit = {}
    costs = {}
    for lv in LEVELS:
        for hi, head in enumerate(HEADS):
            o_hat = l2_normalize_rows(feats[lv][hi])
            unit[lv, head] = o_hat
            if mode is not None:
                for j in (0, 1):
                    costs[lv, head, j] = 1.0 - o_hat @ prompts[j].T

    if mode is not None and plans is None:
        keys = list(costs)
        stacked = solve_plans(np.stack([costs[key] for key in keys]), scoring)
        plans = dict(zip(keys, stacked))

    out = {
        "c_prob": {},
        "c_total": {},
        "maps": {},
        "plans": plans,
        "unit": unit,
        "feats": feats,
        "costs": costs,
        "a1": a1,
        "a2": a2,
        "f2": f2,
        "text": text,
        "fused": fused,
        "fused_hat": fused_hat,
        "shape": (b, h, w),
    }
    n_active = scoring.n_active
    for lv in LEVELS:
        c_total = np.zeros((b, 2), dtype=fused.dtype)
        seg_logits = np.zeros((b, g, 2), dtype=fused.dtype)
        if mode is not None:
            pot_raw = np.stack(
                [np.sum(1.0 - costs[lv, "det", j] * plans[lv, "det", j], axis=(1, 2)) for j in (0, 1)], axis=-1
            )
            c_pot = softmax(pot_raw, tau, axis=-1)
            out[lv, "c_pot"] = c_pot
            c_total += c_pot
            seg_logits += np.stack(
                [np.sum(1.0 - costs[lv, "seg", j] * plans[lv, "seg", j], axis=-1) for j in (0, 1)], axis=-1
            )
        if cl:
            q = softmax(unit[lv, "det"] @ fused_hat.T, tau, axis=-1)
            out[lv, "q"] = q
            c_total += q.mean(axis=1)
            seg_logits += unit[lv, "seg"] @ fused_hat.T
        grid = seg_logits.transpose(0, 2, 1).reshape(b, 2, side, side)
        maps = softmax(bicubic_resize(grid, h, w), tau, axis=1)
        out["c_total"][lv] = c_total
        out["c_prob"][lv] = c_total / n_active
        out["maps"][lv] = maps
    return out


# --- backward ----------------------------------------------------------------


def _heads_backward(cache, prefix, params, d_det, d_seg, d_res, gamma, grads):
    """Accumulate head gradients; returns the gradient w.r.t. the block input."""
    gd = d_det * (cache["zd"] > 0)
    gg = d_seg * (cache["zg"] > 0)
    s = cache["s"]
    grads[f"{prefix}.det"] += np.einsum("bgi,bgj->ij", s, gd)
    grads[f"{prefix}.seg"] += np.einsum("bgi,bgj->ij", s, gg)
    d_s = gd @ params[f"{prefix}.det"].T + gg @ params[f"{prefix}.seg"].T
    d_f = np.zeros_like(cache["f"])
    if d_res is not None:
        d_s = d_s + gamma * d_res
        d_f = d_f + (1.0 - gamma) * d_res
    d_z = d_s * (cache["z"] > 0)
    grads[f"{prefix}.shared"] += np.einsum("bgi,bgj->ij", cache["f"], d_z)
    return d_f + d_z @ params[f"{prefix}.shared"].T


def _backward(params, encoder, fwd, d_c_prob, d_maps, scoring, vision):
    cfg = params.config
    adapt1, adapt2 = _adapts(vision)
    b, h, w = fwd["shape"]
    side = cfg.grid_side
    g = cfg.num_patches
    tau = scoring.tau
    mode = transport_mode(scoring.variant)
    cl = uses_cl(scoring.variant)
    grads = {key: np.zeros_like(val) for key, val in params.arrays.items()}

    prompts = [fwd["text"][j][1] for j in (0, 1)]
    d_prompts = [np.zeros_like(p) for p in prompts]
    d_fused_hat = np.zeros_like(fwd["fused_hat"])
    d_feats = {}

    for lv in LEVELS:
        d_total = d_c_prob[lv] / scoring.n_active
        d_up = softmax_vjp(fwd["maps"][lv], d_maps[lv], tau, axis=1)
        d_grid = bicubic_resize_adjoint(d_up, side, side)
        d_seg_logits = d_grid.reshape(b, 2, g).transpose(0, 2, 1)
        d_unit = {head: np.zeros_like(fwd["unit"][lv, head]) for head in HEADS}

        if mode is not None:
            c_pot = fwd[lv, "c_pot"]
            d_pot_raw = softmax_vjp(c_pot, d_total, tau, axis=-1)
            for j in (0, 1):
                # plans are constants: d(1 - C*T)/dC = -T
                d_cost = {
                    "det": -d_pot_raw[:, j, None, None] * fwd["plans"][lv, "det", j],
                    "seg": -d_seg_logits[:, :, j, None] * fwd["plans"][lv, "seg", j],
                }
                for head in HEADS:
                    # cost = 1 - o_hat @ P.T
                    d_unit[head] -= d_cost[head] @ prompts[j]
                    d_prompts[j] -= np.einsum("bgk,bgd->kd", d_cost[head], fwd["unit"][lv, head])
        if cl:
            q = fwd[lv, "q"]
            d_q = np.broadcast_to(d_total[:, None, :] / g, q.shape)
            d_sims = {"det": softmax_vjp(q, d_q, tau, axis=-1), "seg": d_seg_logits}
            for head in HEADS:
                d_unit[head] += d_sims[head] @ fwd["fused_hat"]
                d_fused_hat += np.einsum("bgj,bgd->jd", d_sims[head], fwd["unit"][lv, head])

        d_feats[lv] = tuple(
            l2_normalize_rows_vjp(fwd["feats"][lv][hi], fwd["unit"][lv, head], d_unit[head])
            for hi, head in enumerate(HEADS)
        )

    # vision path, top down
    if adapt2:
        d_f2 = _heads_backward(fwd["a2"], "projector", params, *d_feats[2], None, None, grads)
    else:
        d_f2 = d_feats[2][0] + d_feats[2][1]
    if adapt1:
        f2 = fwd["f2"]
        d_mixed = (d_f2 * (1.0 - f2 * f2)) @ encoder.w2.T
        d_res = encoder.mix.T @ d_mixed
        _heads_backward(fwd["a1"], "adapter", params, *d_feats[1], d_res, cfg.gamma, grads)

    # text path
    if learns_prompts(scoring.variant):
        d_fused = l2_normalize_rows_vjp(fwd["fused"], fwd["fused_hat"], d_fused_hat)
        k = prompts[0].shape[0]
        for j, (key, cls_key) in enumerate(zip(PROMPT_KEYS, ("normal", "abnormal"))):
            d_p = d_prompts[j] + d_fused[j] / k
            grads[key] += prompt_vjp(params[key], encoder.cls_tokens[cls_key], encoder.w_txt, d_p)

    keep = set(trainable_keys(scoring.variant, vision))
    return {key: val for key, val in grads.items() if key in keep}


def _locate_solver_failure(params, encoder, batch, scoring, vision):
    g, k = params.config.num_patches, params.config.num_prompts
    for i in range(len(batch)):
        dummy = {(lv, head, j): np.zeros((1, g, k)) for lv in LEVELS for head in HEADS for j in (0, 1)}
        fwd = forward(params, encoder, batch.images[i : i + 1], scoring, vision, plans=dummy)
        for lv in LEVELS:
            level_costs = np.stack([c for key, c in fwd["costs"].items() if key[0] == lv])
            try:
                solve_plans(level_costs, scoring)
            except NumericalDegeneracyError as exc:
                return f"sample {i}, level {lv}: {exc}"
    return "an unidentified sample"


def batch_loss(params, encoder, batch, cfg, plans=None):
    """Mean total loss over the batch; returns ``(loss, forward_cache, parts)``.

    The loss is a numpy scalar in the working precision of ``params``.
    """
    fwd = forward(params, encoder, batch.images, cfg.scoring, cfg.vision, plans=plans)
    total = 0.0
    parts = {}
    for lv in LEVELS:
        loss, d_maps, d_c = level_loss(
            fwd["maps"][lv],
            fwd["c_prob"][lv],
            batch.masks,
            batch.target,
            batch.has_mask,
            cfg.weights,
        )
        total = total + loss
        parts[lv] = (d_maps, d_c)
    return total.mean(), fwd, parts


def forward_backward(batch, params, encoder, cfg, plans=None):
    """Loss and gradients for one batch.

    Plans are solved once from the current parameters (inner stage) and are
    then held fixed while gradients are taken (outer stage).  Gradients are
    averaged over the batch and returned only for trainable tensors.

    Returns ``(loss, grads, plans)``.
    """
    if len(batch) == 0:
        raise InvalidInputError("batch is empty")
    try:
        loss, fwd, parts = batch_loss(params, encoder, batch, cfg, plans=plans)
    except NumericalDegeneracyError as exc:
        where = _locate_solver_failure(params, encoder, batch, cfg.scoring, cfg.vision)
        raise TrainingError(f"transport solver failed at {where}") from exc
    n = len(batch)
    d_c_prob = {}
    d_maps = {}
    for lv in LEVELS:
        dm, dc = parts[lv]
        d_maps[lv] = dm / n
        d_c_prob[lv] = dc / n
    grads = _backward(params, encoder, fwd, d_c_prob, d_maps, cfg.scoring, cfg.vision)
    return loss, grads, fwd["plans"]


# --- optimiser ---------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction.

    Returns new ``(params, state)``; the inputs are left untouched.
    Tensors absent from ``grads`` are not updated.
    """
    step = state.step + 1
    new_arrays = dict(params.arrays)
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for key, g in grads.items():
        mk = beta1 * m.get(key, 0.0) + (1.0 - beta1) * g
        vk = beta2 * v.get(key, 0.0) + (1.0 - beta2) * g * g
        m[key], v[key] = mk, vk
        new_arrays[key] = params.arrays[key] - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
    return ModelParams(params.config, new_arrays), OptimizerState(m, v, step)


# --- loops -------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list
    steps: int


def train(samples, cfg, progress=None):
    """Train from scratch on ``samples`` (a sequence of data.Sample).

    Deterministic given ``(cfg, samples)``: parameter init and the epoch
    shuffles both draw from streams derived from ``cfg.seed``.
    """
    data = Batch.from_samples(samples) if not isinstance(samples, Batch) else samples
    n = len(data)
    if n == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    side = cfg.model.image_side
    if data.images.shape[1:] != (side, side):
        raise InvalidInputError(f"images are {data.images.shape[1:]}, model expects {side}x{side}")
    encoder = FrozenEncoder.from_config(cfg.model)
    root = Rng(cfg.seed)
    params = init_params(cfg.model, root.spawn(0).next_u64())
    shuffler = root.spawn(1)
    state = OptimizerState()
    epoch_losses = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffler.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = data.take(idx)
            loss, grads, _ = forward_backward(batch, params, encoder, cfg)
            loss = float(loss)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            params, state = adam_step(params, grads, state, cfg.lr)
            total += loss * len(idx)
        epoch_losses.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, epoch_losses[-1])
        if progress is not None:
            progress(epoch, epoch_losses[-1])
    return TrainResult(params, epoch_losses, state.step)


def predict(params, images, scoring, vision="both", encoder=None, batch_size=32):
    """Image scores and anomaly maps averaged over both levels.

    Returns ``(ac_scores, as_maps)``: the mean abnormal component of the
    per-level ``c_total`` and the mean abnormal-class map.
    """
    encoder = encoder or FrozenEncoder.from_config(params.config)
    images = np.asarray(images, dtype=np.float64)
    scores, maps = [], []
    for start in range(0, len(images), batch_size):
        fwd = forward(params, encoder, images[start : start + batch_size], scoring, vision)
        scores.append(np.mean([fwd["c_total"][lv][:, 1] for lv in LEVELS], axis=0))
        maps.append(np.mean([fwd["maps"][lv][:, 1] for lv in LEVELS], axis=0))
    return np.concatenate(scores), np.concatenate(maps)
