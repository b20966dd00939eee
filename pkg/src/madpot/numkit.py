"""Dense numerical kernels used across the package.

Everything here works in float64, except that extended-precision input
stays extended (see :func:`as_float`).  Where a kernel is needed inside the
training loop its vector-Jacobian product lives next to it (``*_vjp``).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError, ShapeError

__all__ = [
    "as_float",
    "softmax",
    "softmax_vjp",
    "l2_normalize_rows",
    "l2_normalize_rows_vjp",
    "cosine_cost",
    "cubic_kernel",
    "bicubic_matrix",
    "bicubic_resize",
    "bicubic_resize_adjoint",
    "Rng",
    "rng_next",
    "splitmix64_block",
]

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def as_float(x):
    """Array view of ``x`` as float64, or wider if ``x`` already is wider.

    Keeping ``np.longdouble`` intact lets finite-difference checks run the
    forward pass with less roundoff than the float64 gradients they test.
    """
    a = np.asarray(x)
    return a.astype(np.result_type(a.dtype, np.float64), copy=False)


def softmax(logits, tau=1.0, axis=-1):
    """Temperature softmax along ``axis`` with max-subtraction.

    >>> softmax(np.array([np.log(2.0), 0.0]))
    array([0.66666667, 0.33333333])
    """
    z = as_float(logits)
    if not tau > 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax received non-finite logits")
    z = z / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(probs, grad_out, tau=1.0, axis=-1):
    """Pull ``grad_out`` (w.r.t. the softmax output) back to the logits."""
    inner = (grad_out * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_out - inner) / tau


def l2_normalize_rows(m):
    """Scale each row (last axis) to unit Euclidean norm; zero rows stay zero."""
    m = as_float(m)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return m / safe


def l2_normalize_rows_vjp(m, normalized, grad_out):
    """Gradient of :func:`l2_normalize_rows`; zero rows get zero gradient."""
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    proj = (normalized * grad_out).sum(axis=-1, keepdims=True)
    g = (grad_out - normalized * proj) / np.where(norms > 0.0, norms, 1.0)
    return np.where(norms > 0.0, g, 0.0)


def cosine_cost(o, p):
    """Cosine distance ``1 - <o_g, p_k>`` between the rows of ``o`` and ``p``.

    Parameters
    ----------
    o : ndarray, shape (..., G, d)
        Feature rows. Leading batch axes are allowed.
    p : ndarray, shape (K, d)
        Prompt rows.

    Returns
    -------
    ndarray, shape (..., G, K)
        Entries in ``[0, 2]``.  Zero rows have cost exactly 1 to everything.
    """
    o = as_float(o)
    p = as_float(p)
    if o.shape[-1] != p.shape[-1] or o.shape[-1] < 1:
        raise ShapeError(f"feature dims differ: {o.shape} vs {p.shape}")
    sim = l2_normalize_rows(o) @ l2_normalize_rows(p).T
    return np.clip(1.0 - sim, 0.0, 2.0)


# --- bicubic ---------------------------------------------------------------


def cubic_kernel(x, a=-0.5):
    """Keys cubic convolution kernel; ``a=-0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def _bicubic_matrix_cached(n_in, n_out):
    r = np.zeros((n_out, n_in))
    scale = (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
    for i in range(n_out):
        src = i * scale
        base = int(np.floor(src))
        t = src - base
        for off in (-1, 0, 1, 2):
            w = float(cubic_kernel(t - off))
            j = min(max(base + off, 0), n_in - 1)
            r[i, j] += w
    r.setflags(write=False)
    return r


def bicubic_matrix(n_in, n_out):
    """1-D resampling matrix (n_out x n_in): Catmull-Rom, clamped edges, align-corners."""
    if n_in < 2:
        raise InvalidInputError(f"bicubic input side must be >= 2, got {n_in}")
    if n_out < 1:
        raise InvalidInputError(f"output side must be >= 1, got {n_out}")
    return _bicubic_matrix_cached(int(n_in), int(n_out))


def bicubic_resize(grid, out_h, out_w):
    """Resize the last two axes of ``grid`` to (out_h, out_w).

    The 2-D kernel is separable, so the resize is ``R_h @ grid @ R_w.T``.
    """
    grid = as_float(grid)
    if grid.ndim < 2:
        raise ShapeError("bicubic_resize needs at least a 2-D grid")
    rh = bicubic_matrix(grid.shape[-2], out_h)
    rw = bicubic_matrix(grid.shape[-1], out_w)
    return rh @ grid @ rw.T


def bicubic_resize_adjoint(grad_out, in_h, in_w):
    """Adjoint of :func:`bicubic_resize` (its exact gradient, since it is linear)."""
    rh = bicubic_matrix(in_h, grad_out.shape[-2])
    rw = bicubic_matrix(in_w, grad_out.shape[-1])
    return rh.T @ grad_out @ rw


# --- splitmix64 ------------------------------------------------------------


def _mix(z):
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def rng_next(state):
    """One splitmix64 step on a plain integer state.

    Returns ``(value, new_state)``; the input is not modified.
    """
    state = (int(state) + _GOLDEN_GAMMA) & _MASK64
    return _mix(state), state


def splitmix64_block(state, n):
    """The next ``n`` splitmix64 outputs from ``state`` as a uint64 array.

    Splitmix64 states form an arithmetic progression, so a block can be
    produced without a Python loop.  Returns ``(values, new_state)``.
    """
    n = int(n)
    k = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(int(state) & _MASK64) + k * np.uint64(_GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    new_state = (int(state) + n * _GOLDEN_GAMMA) & _MASK64
    return z, new_state


@dataclass
class Rng:
    """Splitmix64 generator.

    Each instance owns its state; pass instances explicitly rather than
    sharing one between components.
    """

    state: int = 0

    def __post_init__(self):
        self.state = int(self.state) & _MASK64

    def next_u64(self):
        value, self.state = rng_next(self.state)
        return value

    def random(self, size=None):
        """Uniform floats in [0, 1) built from the top 53 bits."""
        n = 1 if size is None else int(np.prod(size))
        bits, self.state = splitmix64_block(self.state, n)
        out = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(out[0]) if size is None else out.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def integers(self, low, high, size=None):
        """Integers in the closed range [low, high]."""
        u = self.random(size)
        span = high - low + 1
        if size is None:
            return low + min(int(u * span), span - 1)
        return low + np.minimum((u * span).astype(np.int64), span - 1)

    def permutation(self, n):
        """Fisher-Yates permutation of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def spawn(self, index):
        """Independent child stream keyed by ``index`` (does not advance self)."""
        value, _ = rng_next((self.state ^ _mix((index * _GOLDEN_GAMMA) & _MASK64)) & _MASK64)
        return Rng(value)
