"""Detection scores, segmentation maps and multi-level aggregation.

Class axis order is always (normal, abnormal).  The public single-image
functions wrap batched helpers that the training pipeline also uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, ShapeError
from .numkit import bicubic_resize, cosine_cost, l2_normalize_rows, softmax
from .transport import SolverConfig, partial_ot_batch, sinkhorn_batch

__all__ = [
    "VARIANTS",
    "ScoringConfig",
    "LevelScores",
    "uses_cl",
    "transport_mode",
    "learns_prompts",
    "solve_plans",
    "pot_detection_score",
    "cl_detection_score",
    "segmentation_map",
    "aggregate_inference",
]

VARIANTS = ("fixed", "cl", "ot", "pot", "cl+ot", "cl+pot")


def uses_cl(variant):
    """Whether the fused-prompt cosine term is active.

    The fixed-prompt baseline scores with plain cosine similarity to frozen
    prompts, which is the same term with untrained tokens.
    """
    return variant in ("fixed", "cl", "cl+ot", "cl+pot")


def transport_mode(variant):
    """``"pot"``, ``"ot"`` or ``None``."""
    if variant.endswith("pot"):
        return "pot"
    if variant.endswith("ot"):
        return "ot"
    return None


def learns_prompts(variant):
    return variant != "fixed"


@dataclass(frozen=True)
class ScoringConfig:
    tau: float = 0.07
    variant: str = "cl+pot"
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidConfigError(f"tau must be > 0, got {self.tau}")
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def n_active(self):
        return int(uses_cl(self.variant)) + int(transport_mode(self.variant) is not None)


@dataclass
class LevelScores:
    c_pot: np.ndarray
    c_cl: np.ndarray

    @property
    def c_total(self):
        return self.c_pot + self.c_cl


def solve_plans(costs, cfg):
    """Transport plans for a stack of (G x K) patch-to-prompt costs.

    Rows (patches) carry uniform mass 1/G.  Columns (prompts) carry
    ``frac/K`` each under POT and ``1/K`` under OT.
    """
    costs = np.asarray(costs, dtype=np.float64)
    mode = transport_mode(cfg.variant)
    if mode is None:
        raise InvalidConfigError(f"variant {cfg.variant!r} uses no transport")
    g, k = costs.shape[-2:]
    alpha = np.full(g, 1.0 / g)
    if mode == "pot":
        beta = np.full(k, cfg.solver.frac / k)
        plans, _, _ = partial_ot_batch(costs.reshape(-1, g, k), alpha, beta, cfg.solver)
    else:
        beta = np.full(k, 1.0 / k)
        plans, _, _ = sinkhorn_batch(costs.reshape(-1, g, k), alpha, beta, cfg.solver)
    return plans.reshape(costs.shape)


def _fused_unit(fused_n, fused_ab):
    return l2_normalize_rows(np.stack([fused_n, fused_ab]))


def pot_detection_score(o_det, p_n, p_ab, cfg=ScoringConfig()):
    """Image-level class probabilities from transport distances.

    Each class logit is ``sum(1 - C*T) / tau`` over all patches and prompts.
    Returns ``(scores, [dis_normal, dis_abnormal])``.
    """
    o_det = np.asarray(o_det, dtype=np.float64)
    if o_det.ndim != 2:
        raise ShapeError("o_det must be a (G, d) feature grid")
    dis = []
    for ps in (p_n, p_ab):
        c = cosine_cost(o_det, ps.prompts)
        dis.append(c * solve_plans(c, cfg))
    logits = np.array([np.sum(1.0 - d) for d in dis])
    return softmax(logits, cfg.tau), dis


def cl_detection_score(o_det, fused_n, fused_ab, tau=0.07):
    """Per-patch class softmax of cosine similarities, averaged over patches."""
    o_hat = l2_normalize_rows(o_det)
    sims = o_hat @ _fused_unit(fused_n, fused_ab).T
    return softmax(sims, tau, axis=-1).mean(axis=-2)


def segmentation_map(o_seg, p_n, p_ab, cfg, out_h, out_w):
    """Per-class (2, out_h, out_w) probability maps for one image.

    Patch logits add the prompt-summed transport term and the cosine
    similarity to the fused prompt (whichever the variant enables), are laid
    out on the square patch grid, upsampled bicubically, then pass through a
    per-pixel class softmax.
    """
    o_seg = np.asarray(o_seg, dtype=np.float64)
    g = o_seg.shape[0]
    side = int(round(np.sqrt(g)))
    if side * side != g:
        raise ShapeError(f"number of patches {g} is not a perfect square")
    logits = np.zeros((g, 2))
    if transport_mode(cfg.variant) is not None:
        for j, ps in enumerate((p_n, p_ab)):
            c = cosine_cost(o_seg, ps.prompts)
            logits[:, j] += np.sum(1.0 - c * solve_plans(c, cfg), axis=-1)
    if uses_cl(cfg.variant):
        logits += l2_normalize_rows(o_seg) @ _fused_unit(p_n.fused, p_ab.fused).T
    grid = logits.T.reshape(2, side, side)
    return softmax(bicubic_resize(grid, out_h, out_w), cfg.tau, axis=0)


def aggregate_inference(levels):
    """Average per-level outputs into one image score and one anomaly map.

    Parameters
    ----------
    levels : sequence of (LevelScores, maps)
        ``maps`` has shape (2, H, W).

    Returns
    -------
    (float, ndarray)
        Mean abnormal component of ``c_total`` and mean abnormal map.
    """
    levels = list(levels)
    if not levels:
        raise InvalidInputError("aggregate_inference needs at least one level")
    ac = float(np.mean([s.c_total[1] for s, _ in levels]))
    amap = np.mean([np.asarray(m)[1] for _, m in levels], axis=0)
    return ac, amap
