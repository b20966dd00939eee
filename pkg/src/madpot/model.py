"""Frozen toy encoder, trainable adapter/projector, and prompt encoder.

The vision side has two tap levels.  Level 1 features come from a fixed
random patch embedding; level 2 re-encodes the (optionally adapted) level-1
features after mixing each patch with its 3x3 grid neighbourhood.  The
adapter sits on level 1 and feeds its residual blend forward; the
projector sits on level 2 and has no residual.

All frozen tensors derive from ``ModelConfig.encoder_seed`` via splitmix64,
so two processes with the same config build bit-identical encoders.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, ParseError, ShapeError
from .numkit import Rng, as_float, l2_normalize_rows, l2_normalize_rows_vjp

__all__ = [
    "ModelConfig",
    "FrozenEncoder",
    "PromptSet",
    "ModelParams",
    "NORMAL_NAMES",
    "ABNORMAL_NAMES",
    "VISION_MODES",
    "fnv1a64",
    "patchify",
    "encode_level1",
    "adapter_apply",
    "encode_level2",
    "encode_prompts",
    "init_params",
    "save_params",
    "load_params",
    "PARAMS_FORMAT",
    "PARAMS_VERSION",
]

NORMAL_NAMES = ("flawless", "healthy", "normal", "unblemished")
ABNORMAL_NAMES = ("pathological", "anomalous", "diseased", "with anomalies")
CLASSES = ("normal", "abnormal")
VISION_MODES = ("none", "adapter", "projector", "both")

PARAMS_FORMAT = "madpot-params"
PARAMS_VERSION = 1

# binomial neighbourhood average; weights sum to 1
_MIX_STENCIL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 64
    patch_side: int = 8
    feat_dim: int = 32
    token_dim: int = 16
    num_prompts: int = 4
    context_len: int = 8
    gamma: float = 0.2
    encoder_seed: int = 0

    def __post_init__(self):
        if self.patch_side < 1 or self.image_side % self.patch_side:
            raise InvalidConfigError("image_side must be a positive multiple of patch_side")
        if self.num_prompts < 1 or self.context_len < 1:
            raise InvalidConfigError("num_prompts and context_len must be >= 1")
        if self.feat_dim < 1 or self.token_dim < 1:
            raise InvalidConfigError("feature and token dims must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidConfigError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def grid_side(self):
        return self.image_side // self.patch_side

    @property
    def num_patches(self):
        return self.grid_side**2

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def fnv1a64(data):
    """64-bit FNV-1a hash of a byte string (or UTF-8 text)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _mix_matrix(side):
    """Dense (G x G) operator applying the 3x3 stencil with clamped edges."""
    g = side * side
    m = np.zeros((g, g))
    for r in range(side):
        for c in range(side):
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr = min(max(r + dr, 0), side - 1)
                    cc = min(max(c + dc, 0), side - 1)
                    m[r * side + c, rr * side + cc] += _MIX_STENCIL[dr + 1, dc + 1]
    return m


def _class_tokens(names, k, token_dim):
    rows = []
    for i in range(k):
        rng = Rng(fnv1a64(names[i % len(names)]))
        rows.append(rng.uniform(-1.0, 1.0, token_dim))
    return np.stack(rows)


@dataclass
class FrozenEncoder:
    """Fixed weights standing in for the pretrained vision and text towers."""

    config: ModelConfig
    w1: np.ndarray
    w2: np.ndarray
    w_txt: np.ndarray
    mix: np.ndarray
    cls_tokens: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, config):
        rng = Rng(config.encoder_seed)
        p2, d, t = config.patch_side**2, config.feat_dim, config.token_dim
        w1 = rng.uniform(-1.0, 1.0, (p2, d)) / math.sqrt(p2)
        w2 = rng.uniform(-1.0, 1.0, (d, d)) / math.sqrt(d)
        w_txt = rng.uniform(-1.0, 1.0, (t, d)) / math.sqrt(t)
        tokens = {
            "normal": _class_tokens(NORMAL_NAMES, config.num_prompts, t),
            "abnormal": _class_tokens(ABNORMAL_NAMES, config.num_prompts, t),
        }
        enc = cls(config, w1, w2, w_txt, _mix_matrix(config.grid_side), tokens)
        for arr in (enc.w1, enc.w2, enc.w_txt, enc.mix, *tokens.values()):
            arr.setflags(write=False)
        return enc


@dataclass
class PromptSet:
    """K unit-norm prompt embeddings of one class and their mean."""

    prompts: np.ndarray
    fused: np.ndarray


# --- vision path -------------------------------------------------------------


def patchify(images, patch_side):
    """Split (..., H, W) images into (..., G, patch_side**2) patch vectors.

    Patches are ordered row-major over the grid, pixels row-major inside
    each patch.
    """
    images = as_float(images)
    h, w = images.shape[-2:]
    if h % patch_side or w % patch_side:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch_side}-pixel patches")
    gh, gw = h // patch_side, w // patch_side
    lead = images.shape[:-2]
    x = images.reshape(*lead, gh, patch_side, gw, patch_side)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, gh * gw, patch_side * patch_side)


def encode_level1(patches, enc):
    """Level-1 features ``tanh(patch @ W1)``."""
    if patches.shape[-1] != enc.w1.shape[0]:
        raise ShapeError(f"patch length {patches.shape[-1]} != {enc.w1.shape[0]}")
    return np.tanh(patches @ enc.w1)


def adapter_apply(f, w_shared, w_det, w_seg, gamma=None):
    """Shared ReLU layer followed by detection and segmentation heads.

    Returns ``(o_det, o_seg, f_res)``; ``f_res`` is the residual blend
    ``gamma * shared + (1 - gamma) * f`` when ``gamma`` is given (adapter
    form) and ``None`` otherwise (projector form).
    """
    shared = np.maximum(f @ w_shared, 0.0)
    o_det = np.maximum(shared @ w_det, 0.0)
    o_seg = np.maximum(shared @ w_seg, 0.0)
    f_res = None if gamma is None else gamma * shared + (1.0 - gamma) * f
    return o_det, o_seg, f_res


def encode_level2(f_res, enc):
    """Neighbour-mix level-1 output over the grid, then ``tanh(mixed @ W2)``."""
    return np.tanh(enc.mix @ f_res @ enc.w2)


# --- text path ---------------------------------------------------------------


def _prompt_forward(tokens, cls_tokens, w_txt):
    n_tok = tokens.shape[1] + 1
    pooled = (tokens.sum(axis=1) + cls_tokens) / n_tok
    h = np.tanh(pooled @ w_txt)
    prompts = l2_normalize_rows(h)
    return h, prompts


def encode_prompts(tokens, cls_tokens, w_txt):
    """Encode K prompts from learnable context tokens plus class-name tokens.

    Parameters
    ----------
    tokens : ndarray, shape (K, L, token_dim)
    cls_tokens : ndarray, shape (K, token_dim)
    w_txt : ndarray, shape (token_dim, d)
    """
    _, prompts = _prompt_forward(tokens, cls_tokens, w_txt)
    return PromptSet(prompts=prompts, fused=prompts.mean(axis=0))


def prompt_vjp(tokens, cls_tokens, w_txt, d_prompts):
    """Gradient w.r.t. ``tokens`` given the gradient w.r.t. the prompt rows."""
    h, prompts = _prompt_forward(tokens, cls_tokens, w_txt)
    d_h = l2_normalize_rows_vjp(h, prompts, d_prompts)
    d_pooled = (d_h * (1.0 - h * h)) @ w_txt.T
    n_tok = tokens.shape[1] + 1
    return np.broadcast_to(d_pooled[:, None, :] / n_tok, tokens.shape).copy()


# --- trainable parameters ----------------------------------------------------


ADAPTER_KEYS = ("adapter.shared", "adapter.det", "adapter.seg")
PROJECTOR_KEYS = ("projector.shared", "projector.det", "projector.seg")
PROMPT_KEYS = ("prompt.normal", "prompt.abnormal")


@dataclass
class ModelParams:
    """Trainable tensors keyed by name, plus the config they belong to."""

    config: ModelConfig
    arrays: dict

    def __getitem__(self, key):
        return self.arrays[key]

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def init_params(config, seed):
    """Fresh parameters: uniform(+-1/sqrt(d)) linear maps, uniform(+-0.02) tokens."""
    rng = Rng(seed)
    d = config.feat_dim
    bound = 1.0 / math.sqrt(d)
    arrays = {}
    for key in ADAPTER_KEYS + PROJECTOR_KEYS:
        arrays[key] = rng.uniform(-bound, bound, (d, d))
    shape = (config.num_prompts, config.context_len, config.token_dim)
    for key in PROMPT_KEYS:
        arrays[key] = rng.uniform(-0.02, 0.02, shape)
    return ModelParams(config, arrays)


def save_params(path, params, run_info=None):
    """Write parameters as a versioned JSON document.

    Floats are emitted with Python's shortest round-trip repr, which
    reproduces every value exactly on reading.
    """
    doc = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "model": asdict(params.config),
        "encoder_seed": params.config.encoder_seed,
        "run": run_info or {},
        "arrays": [
            {"name": k, "shape": list(v.shape), "values": [float(x) for x in v.ravel()]}
            for k, v in params.arrays.items()
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_params(path):
    """Read a file written by :func:`save_params`; returns ``(params, run_info)``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("format") != PARAMS_FORMAT:
        raise ParseError(f"{path}: not a {PARAMS_FORMAT} file")
    if doc.get("version") != PARAMS_VERSION:
        raise ParseError(f"{path}: unsupported version {doc.get('version')!r}")
    try:
        config = ModelConfig.from_dict(doc["model"])
        arrays = {}
        for entry in doc["arrays"]:
            arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            arrays[entry["name"]] = arr
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed parameter record: {exc}") from exc
    expected = init_params(config, 0).arrays
    for key, ref in expected.items():
        if key not in arrays:
            raise ParseError(f"{path}: missing array {key!r}")
        if arrays[key].shape != ref.shape:
            raise ParseError(f"{path}: array {key!r} has shape {arrays[key].shape}, expected {ref.shape}")
    return ModelParams(config, arrays), doc.get("run", {})
