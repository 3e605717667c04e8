"""Layer-wise expert injection: adaptive projection and gated fusion.

Every decoder layer receives its own projection of the expert embedding
(one shared projection in shared_gate mode). The gate reads the
concatenated [hidden; expert] pair per position and interpolates
h' = (1-g) * h + g * e, so a closed gate leaves the backbone untouched.
"""

from __future__ import annotations

import numpy as np

from .config import INJECTION_MODES, ConfigError, ModelConfig
from .tensor import (
    Tensor,
    affine,
    broadcast_rows,
    concat,
    hadamard,
    mul,
    sigmoid,
    silu,
)

GATE_BIAS_INIT = -2.0


def _mlp_params(rng, d_in, d_hidden, d_out, dtype, out_bias=0.0):
    return {
        "w1": Tensor(rng.normal(0, d_in ** -0.5, (d_in, d_hidden)).astype(dtype), requires_grad=True),
        "b1": Tensor(np.zeros(d_hidden, dtype=dtype), requires_grad=True),
        "w2": Tensor(rng.normal(0, d_hidden ** -0.5, (d_hidden, d_out)).astype(dtype), requires_grad=True),
        "b2": Tensor(np.full(d_out, out_bias, dtype=dtype), requires_grad=True),
    }


def init_lead_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Allocate exactly the blocks the injection mode uses."""
    mode = cfg.injection_mode
    d = cfg.d_model
    p = {}
    if mode in ("none", "aux_only"):
        return p
    proj_keys = ["shared"] if mode == "shared_gate" else list(range(cfg.n_layers))
    for k in proj_keys:
        for leaf, t in _mlp_params(rng, d, d, d, dtype).items():
            p[f"lead.{k}.proj.{leaf}"] = t
    if mode in ("shared_gate", "layer_gate"):
        for l in range(cfg.n_layers):
            for leaf, t in _mlp_params(rng, 2 * d, d, d, dtype, out_bias=GATE_BIAS_INIT).items():
                p[f"lead.{l}.gate.{leaf}"] = t
    return p


def _mlp(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = silu(affine(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return affine(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def project_layer(params: dict, cfg: ModelConfig, e: Tensor, layer: int) -> Tensor:
    """e^l = phi^l(e); shared_gate uses one phi for every layer."""
    if not (0 <= layer < cfg.n_layers):
        raise IndexError(f"layer {layer} outside [0, {cfg.n_layers})")
    key = "shared" if cfg.injection_mode == "shared_gate" else layer
    return _mlp(params, f"lead.{key}.proj", e)


def project_all(params: dict, cfg: ModelConfig, e: Tensor) -> list:
    return [project_layer(params, cfg, e, l) for l in range(cfg.n_layers)]


def gate_values(params: dict, cfg: ModelConfig, h: Tensor, e_l: Tensor, layer: int) -> Tensor:
    pair = concat(h, e_l, axis=-1)
    return sigmoid(_mlp(params, f"lead.{layer}.gate", pair))


def gated_fuse(params: dict, cfg: ModelConfig, h: Tensor, e_l: Tensor, layer: int,
               gate_sink: list | None = None) -> Tensor:
    """h' = (1-g) * h + g * e^l with g = sigmoid(gate MLP([h; e^l]))."""
    if h.shape != e_l.shape:
        raise ConfigError(f"hidden {h.shape} and expert embedding {e_l.shape} must match")
    g = gate_values(params, cfg, h, e_l, layer)
    if gate_sink is not None:
        gate_sink.append((layer, g.data.copy()))
    keep = mul(g, -1.0) + 1.0
    return hadamard(keep, h) + hadamard(g, e_l)


def apply_injection(params: dict, cfg: ModelConfig, hidden: Tensor, e_l: Tensor, layer: int,
                    gate_sink: list | None = None) -> Tensor:
    """Rewrite one layer's text hidden states with the expert embedding.

    hidden is [.., T, d]; e_l is the already-projected [.., d] embedding,
    broadcast across the T positions.
    """
    mode = cfg.injection_mode
    if mode not in INJECTION_MODES:
        raise ConfigError(f"unknown injection_mode {mode!r}")
    if mode in ("none", "aux_only"):
        return hidden
    expanded = broadcast_rows(e_l, hidden.shape[-2]) if e_l.ndim == hidden.ndim - 1 else e_l
    if mode == "layer_add":
        return hidden + expanded
    return gated_fuse(params, cfg, hidden, expanded, layer, gate_sink)


def gate_table(gate_sink: list) -> list:
    """(layer, position, mean_gate, max_gate, min_gate) rows from collected gates."""
    rows = []
    for layer, g in gate_sink:
        arr = g if g.ndim == 3 else g[None]
        for t in range(arr.shape[1]):
            vals = arr[:, t, :]
            rows.append((layer, t, float(vals.mean()), float(vals.max()), float(vals.min())))
    return rows
