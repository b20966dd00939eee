"""Entropic OT (Sinkhorn), entropic partial OT (Dykstra) and an exact LP oracle.

Plans are written ``T = diag(u) K diag(v)`` with the Gibbs kernel
``K = exp(-C / lam)``.  Both solvers have a batched form operating on a
stack of cost matrices sharing the same marginals; the single-problem
functions are thin wrappers around it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import (
    InfeasibleError,
    InvalidConfigError,
    InvalidInputError,
    NumericalDegeneracyError,
    ShapeError,
)

__all__ = [
    "SolverConfig",
    "TransportPlan",
    "sinkhorn",
    "partial_ot",
    "sinkhorn_batch",
    "partial_ot_batch",
    "exact_lp_oracle",
    "transport_distance",
    "uniform_marginals",
]

_MASS_TOL = 1e-9
_LP_MAX_SIDE = 6


@dataclass(frozen=True)
class SolverConfig:
    """Hyper-parameters shared by both entropic solvers.

    ``early_stop_tol`` bounds the largest relative change of any entry of
    the scaling vectors between two successive iterations.
    """

    lam: float = 0.1
    max_iter: int = 100
    early_stop_tol: float = 1e-3
    frac: float = 0.8

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidConfigError(f"lambda must be > 0, got {self.lam}")
        if int(self.max_iter) < 1:
            raise InvalidConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.early_stop_tol > 0:
            raise InvalidConfigError(f"early_stop_tol must be > 0, got {self.early_stop_tol}")
        if not 0.0 < self.frac <= 1.0:
            raise InvalidConfigError(f"frac must lie in (0, 1], got {self.frac}")


@dataclass
class TransportPlan:
    plan: np.ndarray
    iterations: int
    converged: bool
    row_residual: float
    col_residual: float

    def cost(self, c):
        """Frobenius product <C, T>."""
        return float(np.sum(np.asarray(c) * self.plan))


def uniform_marginals(n, m, frac=1.0):
    """Rows uniform with mass 1, columns uniform with mass ``frac``."""
    return np.full(n, 1.0 / n), np.full(m, frac / m)


def _as_hist(w, name):
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidInputError(f"{name} must be a finite nonnegative vector")
    return w


def _check_costs(c, n, m):
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-2:] != (n, m):
        raise ShapeError(f"cost matrix shape {c.shape[-2:]} does not match marginals ({n}, {m})")
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("cost matrix has non-finite entries")
    return c


def _gibbs_kernel(c, lam):
    k = np.exp(-c / lam)
    if np.any(~k.any(axis=-1)) or np.any(~k.any(axis=-2)):
        raise NumericalDegeneracyError(
            f"exp(-C/lambda) has an all-zero row or column at lambda={lam}; use a larger lambda"
        )
    return k


def _rel_change(new, old):
    return np.max(np.abs(new - old) / np.maximum(np.abs(new), 1e-300), axis=-1)


def _solve_batch(c, alpha, beta, cfg, partial):
    k = _gibbs_kernel(c, cfg.lam)
    kt = np.ascontiguousarray(np.swapaxes(k, -1, -2))
    nb, n, m = k.shape
    u = np.ones((nb, n))
    v = np.ones((nb, m))
    q = np.ones((nb, n))  # Dykstra correction for the row inequality
    iters = np.zeros(nb, dtype=np.int64)
    converged = np.zeros(nb, dtype=bool)
    active = np.ones(nb, dtype=bool)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, int(cfg.max_iter) + 1):
            if partial:
                # column equality is affine: a plain KL projection, no correction
                v_new = beta / (kt @ u[..., None])[..., 0]
                ut = u * q
                rows = ut * (k @ v_new[..., None])[..., 0]
                shrink = np.minimum(1.0, alpha / rows)
                u_new = ut * shrink
                q_new = 1.0 / shrink
            else:
                u_new = alpha / (k @ v[..., None])[..., 0]
                v_new = beta / (kt @ u_new[..., None])[..., 0]
                q_new = q
            err = np.maximum(_rel_change(u_new, u), _rel_change(v_new, v))
            if not np.isfinite(err).all():
                raise NumericalDegeneracyError(
                    f"scaling vectors overflowed at iteration {it} (lambda={cfg.lam}); use a larger lambda"
                )
            if active.all():
                u, v, q = u_new, v_new, q_new
            else:
                a = active[:, None]
                u = np.where(a, u_new, u)
                v = np.where(a, v_new, v)
                q = np.where(a, q_new, q)
            done = active & (err < cfg.early_stop_tol)
            if done.any():
                iters[done] = it
                converged |= done
                active &= ~done
                if not active.any():
                    break
        iters[active] = it

    plans = u[..., :, None] * k * v[..., None, :]
    return plans, iters, converged


def _residuals(plan, alpha, beta, partial):
    rows = plan.sum(axis=-1)
    cols = plan.sum(axis=-2)
    if partial:
        row_res = np.maximum(rows - alpha, 0.0).max(axis=-1)
    else:
        row_res = np.abs(rows - alpha).max(axis=-1)
    col_res = np.abs(cols - beta).max(axis=-1)
    return row_res, col_res


def _prepare(c, alpha, beta):
    alpha = _as_hist(alpha, "alpha")
    beta = _as_hist(beta, "beta")
    c = _check_costs(c, alpha.size, beta.size)
    return c, alpha, beta


def _validate_balanced(alpha, beta):
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise InvalidInputError("sinkhorn requires strictly positive marginals")
    if abs(alpha.sum() - beta.sum()) > _MASS_TOL:
        raise InfeasibleError(f"marginal masses differ: {alpha.sum():.12g} vs {beta.sum():.12g}")


def _validate_partial(alpha, beta, cfg):
    target = cfg.frac * alpha.sum()
    if abs(beta.sum() - target) > _MASS_TOL:
        raise InfeasibleError(
            f"target mass {beta.sum():.12g} != frac * source mass {target:.12g}"
        )


def sinkhorn_batch(c, alpha, beta, cfg):
    """Sinkhorn on a stack of cost matrices ``c`` of shape (B, n, m).

    Returns ``(plans, iterations, converged)`` with per-problem entries.
    Problems that meet the tolerance are frozen while the rest continue.
    """
    c, alpha, beta = _prepare(c, alpha, beta)
    _validate_balanced(alpha, beta)
    return _solve_batch(c.reshape(-1, alpha.size, beta.size), alpha, beta, cfg, partial=False)


def partial_ot_batch(c, alpha, beta, cfg):
    """Dykstra partial OT on a stack of cost matrices; see :func:`partial_ot`."""
    c, alpha, beta = _prepare(c, alpha, beta)
    _validate_partial(alpha, beta, cfg)
    return _solve_batch(c.reshape(-1, alpha.size, beta.size), alpha, beta, cfg, partial=True)


def _single(solver, c, alpha, beta, cfg, partial):
    plans, iters, conv = solver(np.asarray(c, dtype=np.float64)[None], alpha, beta, cfg)
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    beta = np.asarray(beta, dtype=np.float64).ravel()
    row_res, col_res = _residuals(plans[0], alpha, beta, partial)
    return TransportPlan(
        plan=plans[0],
        iterations=int(iters[0]),
        converged=bool(conv[0]),
        row_residual=float(row_res),
        col_residual=float(col_res),
    )


def sinkhorn(c, alpha, beta, cfg=SolverConfig()):
    r"""Entropic optimal transport by Sinkhorn scaling.

    Solves :math:`\min_{T\mathbf 1=\alpha,\,T^\top\mathbf 1=\beta}
    \langle C,T\rangle + \lambda\langle T,\log T\rangle`.

    Parameters
    ----------
    c : ndarray, shape (n, m)
    alpha, beta : ndarray
        Strictly positive marginals of equal mass.
    cfg : SolverConfig
        ``cfg.frac`` is ignored.

    Raises
    ------
    InfeasibleError
        Masses differ by more than 1e-9.
    NumericalDegeneracyError
        The Gibbs kernel has an all-zero row or column.
    """
    return _single(sinkhorn_batch, c, alpha, beta, cfg, partial=False)


def partial_ot(c, alpha, beta, cfg=SolverConfig()):
    r"""Entropic partial OT by Dykstra's alternating KL projections.

    Feasible set: :math:`T\mathbf 1\le\alpha`, :math:`T^\top\mathbf 1=\beta`
    with ``beta.sum() == cfg.frac * alpha.sum()``.  Each iteration scales the
    columns onto ``beta`` and then shrinks every row whose mass exceeds its
    ``alpha`` entry; the row step carries the Dykstra correction vector.
    """
    return _single(partial_ot_batch, c, alpha, beta, cfg, partial=True)


def exact_lp_oracle(c, alpha, beta, frac=1.0):
    """Exact (vertex) solution of the transport LP for small instances.

    For ``frac < 1`` a zero-cost sink column absorbs the unshipped row mass
    and the balanced problem is solved.  Returns ``(plan, cost)`` where
    ``plan`` excludes the sink column.
    """
    c, alpha, beta = _prepare(c, alpha, beta)
    n, m = c.shape
    if n > _LP_MAX_SIDE or m > _LP_MAX_SIDE:
        raise InvalidInputError(f"LP oracle is limited to {_LP_MAX_SIDE}x{_LP_MAX_SIDE}, got {n}x{m}")
    if not 0.0 < frac <= 1.0:
        raise InvalidConfigError(f"frac must lie in (0, 1], got {frac}")
    if abs(beta.sum() - frac * alpha.sum()) > _MASS_TOL:
        raise InfeasibleError("beta mass must equal frac * alpha mass")

    slack = alpha.sum() - beta.sum()
    if slack > _MASS_TOL:
        c_aug = np.hstack([c, np.zeros((n, 1))])
        b_aug = np.append(beta, slack)
    else:
        c_aug, b_aug = c, beta
    ma = c_aug.shape[1]
    a_rows = np.kron(np.eye(n), np.ones((1, ma)))
    a_cols = np.kron(np.ones((1, n)), np.eye(ma))
    res = linprog(
        c_aug.ravel(),
        A_eq=np.vstack([a_rows, a_cols]),
        b_eq=np.concatenate([alpha, b_aug]),
        bounds=(0, None),
        method="highs-ds",
    )
    if res.status != 0:
        raise InfeasibleError(f"LP solver failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, ma)[:, :m], 0.0)
    return plan, float(np.sum(c * plan))


def transport_distance(c, t):
    """Elementwise transport distances ``C * T``."""
    t = t.plan if isinstance(t, TransportPlan) else np.asarray(t, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if c.shape != t.shape:
        raise ShapeError(f"cost {c.shape} and plan {t.shape} differ")
    return c * t
