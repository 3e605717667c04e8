"""Per-category visual experts and confidence-weighted aggregation.

Each category gets its own 3-layer MLP binary classifier over the
mean-pooled patch features. The penultimate activation is that expert's
evidence vector f_i; the final scalar is its logit s_i. Aggregation
scales each f_i by the confidence sigmoid(s_i), concatenates, and
projects into model space.
"""

from __future__ import annotations

import numpy as np

from .config import ConfigError, ModelConfig
from .tensor import (
    Tensor,
    affine,
    broadcast_rows,
    concat_all,
    matmul,
    permute,
    reshape,
    row_scale,
    sigmoid,
    tanh,
    tile_leading,
    tmean,
)


def init_expert_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    p = {}
    dv, de, d = cfg.d_vision, cfg.d_exp, cfg.d_model
    for i in range(cfg.n_categories):
        p[f"expert.{i}.layer1.w"] = Tensor(rng.normal(0, dv ** -0.5, (dv, de)).astype(dtype), requires_grad=True)
        p[f"expert.{i}.layer1.b"] = Tensor(np.zeros(de, dtype=dtype), requires_grad=True)
        p[f"expert.{i}.layer2.w"] = Tensor(rng.normal(0, de ** -0.5, (de, de)).astype(dtype), requires_grad=True)
        p[f"expert.{i}.layer2.b"] = Tensor(np.zeros(de, dtype=dtype), requires_grad=True)
        p[f"expert.{i}.layer3.w"] = Tensor(rng.normal(0, de ** -0.5, (de, 1)).astype(dtype), requires_grad=True)
        p[f"expert.{i}.layer3.b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
    p["expert_proj.w"] = Tensor(rng.normal(0, (cfg.n_categories * de) ** -0.5, (cfg.n_categories * de, d)).astype(dtype), requires_grad=True)
    p["expert_proj.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    return p


def _stacked(params: dict, cfg: ModelConfig, layer: int, leaf: str) -> Tensor:
    parts = [params[f"expert.{i}.layer{layer}.{leaf}"] for i in range(cfg.n_categories)]
    shape = (1,) + parts[0].shape
    return concat_all([reshape(t, shape) for t in parts], axis=0)


def expert_forward(params: dict, cfg: ModelConfig, vf: Tensor) -> tuple:
    """(logits s, evidence features f) for every category at once.

    vf is [n_patches, d_vision] or [B, n_patches, d_vision]; returns
    s [.., C] and f [.., C, d_exp].
    """
    single = vf.ndim == 2
    if single:
        vf = reshape(vf, (1,) + vf.shape)
    if vf.shape[-1] != cfg.d_vision:
        raise ConfigError(f"visual features carry {vf.shape[-1]} channels, config says {cfg.d_vision}")
    C, B = cfg.n_categories, vf.shape[0]
    pooled = tmean(vf, axis=1)                 # [B, dv]
    x = tile_leading(pooled, C)                # [C, B, dv]
    w1, b1 = _stacked(params, cfg, 1, "w"), _stacked(params, cfg, 1, "b")
    w2, b2 = _stacked(params, cfg, 2, "w"), _stacked(params, cfg, 2, "b")
    w3, b3 = _stacked(params, cfg, 3, "w"), _stacked(params, cfg, 3, "b")
    h1 = tanh(matmul(x, w1) + broadcast_rows(b1, B))   # [C, B, de]
    f = tanh(matmul(h1, w2) + broadcast_rows(b2, B))   # [C, B, de]  penultimate activation
    s = matmul(f, w3) + broadcast_rows(b3, B)          # [C, B, 1]
    s = permute(reshape(s, (C, B)), (1, 0))            # [B, C]
    f = permute(f, (1, 0, 2))                          # [B, C, de]
    if single:
        s = reshape(s, (C,))
        f = reshape(f, (C, cfg.d_exp))
    return s, f


def aggregate_confidence(params: dict, cfg: ModelConfig, s: Tensor, f: Tensor) -> Tensor:
    """e = Proj(concat_i sigmoid(s_i) * f_i), an affine projection."""
    single = s.ndim == 1
    if single:
        s = reshape(s, (1,) + s.shape)
        f = reshape(f, (1,) + f.shape)
    C, de = cfg.n_categories, cfg.d_exp
    if s.shape[-1] != C or f.shape[-2:] != (C, de):
        raise ConfigError(f"expert outputs s{s.shape} / f{f.shape} do not match C={C}, d_exp={de}")
    p = sigmoid(s)                            # [B, C]
    weighted = row_scale(f, p)                # [B, C, de]
    flat = reshape(weighted, (s.shape[0], C * de))
    e = affine(flat, params["expert_proj.w"], params["expert_proj.b"])
    if single:
        e = reshape(e, (cfg.d_model,))
    return e


def expert_embedding(params: dict, cfg: ModelConfig, vf: Tensor) -> tuple:
    """Full expert path: (s, f, e)."""
    s, f = expert_forward(params, cfg, vf)
    return s, f, aggregate_confidence(params, cfg, s, f)
