"""Multimodal backbone: patch vision encoder, MLP connector, causal
decoder with low-rank adapters, parameter freezing, and checkpoint IO.

The decoder consumes [image-patch prefix ; text tokens] under one causal
mask. Expert embeddings, when provided, rewrite each layer's text hidden
states after the block (see fusion module); prefix positions are never
rewritten. Text positions are numbered from zero regardless of prefix
length, so a text-only pretrained decoder transfers unchanged.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from . import fusion
from .config import (
    INJECTING_MODES,
    ConfigError,
    ModelConfig,
    ParameterPartition,
    group_of,
    stream,
)
from .experts import expert_forward, aggregate_confidence, init_expert_params
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add_constant,
    affine,
    concat,
    embedding,
    layer_norm,
    matmul,
    mul,
    narrow,
    no_grad,
    permute,
    reshape,
    silu,
    softmax,
    transpose_last2,
)

CHECKPOINT_VERSION = 1
ATTN_MASK_VALUE = -1e9


class CapacityError(ContractError):
    """Sequence does not fit the configured context window."""


class CheckpointError(RuntimeError):
    """Checkpoint incompatible with the model; carries every mismatch."""

    def __init__(self, mismatches):
        self.mismatches = list(mismatches)
        super().__init__("checkpoint mismatch:\n" + "\n".join(self.mismatches))


# -- initialization ---------------------------------------------------------

def _linear(rng, d_in, d_out, dtype, scale=1.0):
    w = Tensor((rng.normal(0, d_in ** -0.5, (d_in, d_out)) * scale).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
    return w, b


def _ln(d, dtype):
    return (Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(d, dtype=dtype), requires_grad=True))


def init_vision_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    dv = cfg.d_vision
    res = (2 * 2) ** -0.5  # two residual-writing layers per block, two blocks
    p = {}
    p["vision.patch_embed.w"], p["vision.patch_embed.b"] = _linear(rng, cfg.patch_size ** 2, dv, dtype)
    p["vision.pos"] = Tensor(rng.normal(0, 0.02, (cfg.n_patches, dv)).astype(dtype), requires_grad=True)
    for i in range(2):
        pre = f"vision.blocks.{i}"
        p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"] = _ln(dv, dtype)
        for name in ("wq", "wk", "wv"):
            p[f"{pre}.attn.{name}.w"], p[f"{pre}.attn.{name}.b"] = _linear(rng, dv, dv, dtype)
        p[f"{pre}.attn.wo.w"], p[f"{pre}.attn.wo.b"] = _linear(rng, dv, dv, dtype, scale=res)
        p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"] = _ln(dv, dtype)
        p[f"{pre}.ffn.w1.w"], p[f"{pre}.ffn.w1.b"] = _linear(rng, dv, 2 * dv, dtype)
        p[f"{pre}.ffn.w2.w"], p[f"{pre}.ffn.w2.b"] = _linear(rng, 2 * dv, dv, dtype, scale=res)
    p["vision.final_ln.g"], p["vision.final_ln.b"] = _ln(dv, dtype)
    return p


def init_connector_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    p = {}
    p["connector.w1"], p["connector.b1"] = _linear(rng, cfg.d_vision, cfg.d_model, dtype)
    p["connector.w2"], p["connector.b2"] = _linear(rng, cfg.d_model, cfg.d_model, dtype)
    return p


def init_decoder_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    d, r = cfg.d_model, cfg.lora_rank
    res = (2 * cfg.n_layers) ** -0.5
    p = {}
    p["decoder.tok_emb"] = Tensor(rng.normal(0, 0.05, (cfg.vocab_size, d)).astype(dtype), requires_grad=True)
    p["decoder.pos_emb"] = Tensor(rng.normal(0, 0.05, (cfg.max_seq_len, d)).astype(dtype), requires_grad=True)

    def adapted(prefix, d_in, d_out, scale=1.0):
        p[f"{prefix}.w"], p[f"{prefix}.b"] = _linear(rng, d_in, d_out, dtype, scale=scale)
        p[f"{prefix}.lora_A"] = Tensor(rng.normal(0, 0.01, (d_in, r)).astype(dtype), requires_grad=True)
        p[f"{prefix}.lora_B"] = Tensor(np.zeros((r, d_out), dtype=dtype), requires_grad=True)

    for i in range(cfg.n_layers):
        pre = f"decoder.blocks.{i}"
        p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"] = _ln(d, dtype)
        adapted(f"{pre}.attn.wq", d, d)
        adapted(f"{pre}.attn.wk", d, d)
        adapted(f"{pre}.attn.wv", d, d)
        adapted(f"{pre}.attn.wo", d, d, scale=res)
        p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"] = _ln(d, dtype)
        adapted(f"{pre}.ffn.w1", d, cfg.d_ff)
        adapted(f"{pre}.ffn.w2", cfg.d_ff, d, scale=res)
    p["decoder.final_ln.g"], p["decoder.final_ln.b"] = _ln(d, dtype)
    p["decoder.head.w"], p["decoder.head.b"] = _linear(rng, d, cfg.vocab_size, dtype)
    return p


# -- forward pieces ----------------------------------------------------------

def lora_linear(x: Tensor, w_frozen: Tensor, a: Tensor, b: Tensor, alpha: float, rank: int,
                bias: Tensor | None = None) -> Tensor:
    """x @ W + (alpha/rank) * x @ A @ B; the base weight stays frozen."""
    if a.shape[-1] != rank or b.shape[0] != rank:
        raise DimensionError(f"adapter rank mismatch: A{a.shape}, B{b.shape}, rank={rank}")
    out = matmul(x, w_frozen)
    if bias is not None:
        out = out + bias
    return out + mul(matmul(matmul(x, a), b), alpha / rank)


_MASK_CACHE: dict = {}


def _causal_mask(s: int, dtype) -> np.ndarray:
    key = (s, np.dtype(dtype).str)
    if key not in _MASK_CACHE:
        m = np.triu(np.full((s, s), ATTN_MASK_VALUE, dtype=dtype), k=1)
        _MASK_CACHE[key] = m
    return _MASK_CACHE[key]


def _mha(x: Tensor, lin, n_heads: int, mask: np.ndarray | None) -> Tensor:
    b, s, d = x.shape
    dh = d // n_heads

    def heads(t):
        return permute(reshape(t, (b, s, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(lin("wq", x)), heads(lin("wk", x)), heads(lin("wv", x))
    att = mul(matmul(q, transpose_last2(k)), dh ** -0.5)
    if mask is not None:
        att = add_constant(att, mask)
    out = matmul(softmax(att, axis=-1), v)
    out = reshape(permute(out, (0, 2, 1, 3)), (b, s, d))
    return lin("wo", out)


def _vision_block(params: dict, cfg: ModelConfig, x: Tensor, i: int) -> Tensor:
    pre = f"vision.blocks.{i}"

    def lin(name, t):
        return affine(t, params[f"{pre}.attn.{name}.w"], params[f"{pre}.attn.{name}.b"])

    h = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    x = x + _mha(h, lin, cfg.n_heads, mask=None)
    h = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    h = silu(affine(h, params[f"{pre}.ffn.w1.w"], params[f"{pre}.ffn.w1.b"]))
    return x + affine(h, params[f"{pre}.ffn.w2.w"], params[f"{pre}.ffn.w2.b"])


def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """[B, image_size, image_size] (or flat) -> [B, n_patches, patch_size^2]."""
    arr = np.asarray(images)
    single = arr.ndim == 1 or arr.shape == (cfg.image_size, cfg.image_size)
    if single:
        arr = arr[None]
    b = arr.shape[0]
    if arr.size != b * cfg.image_size ** 2:
        raise DimensionError(f"image of {arr.size // max(1, b)} pixels, config wants {cfg.image_size}^2")
    g, ps = cfg.image_size // cfg.patch_size, cfg.patch_size
    arr = arr.reshape(b, g, ps, g, ps).transpose(0, 1, 3, 2, 4).reshape(b, g * g, ps * ps)
    return arr[0] if single else arr


def encode_image(params: dict, cfg: ModelConfig, images) -> Tensor:
    """Patch features [.., n_patches, d_vision] from raw pixels in [0,1]."""
    patches = patchify(images, cfg)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    dtype = params["vision.patch_embed.w"].dtype
    x = affine(Tensor(patches.astype(dtype)), params["vision.patch_embed.w"], params["vision.patch_embed.b"])
    x = x + params["vision.pos"]
    for i in range(2):
        x = _vision_block(params, cfg, x, i)
    x = layer_norm(x, params["vision.final_ln.g"], params["vision.final_ln.b"])
    return reshape(x, x.shape[1:]) if single else x


def connect(params: dict, vf: Tensor) -> Tensor:
    """Map each patch feature into token space with a 2-layer MLP."""
    h = silu(affine(vf, params["connector.w1"], params["connector.b1"]))
    return affine(h, params["connector.w2"], params["connector.b2"])


def decoder_forward(
    params: dict,
    cfg: ModelConfig,
    token_ids,
    prefix: Tensor | None = None,
    lead_ctx: list | None = None,
    lora_active: bool = False,
    gate_sink: list | None = None,
    return_hidden: bool = False,
):
    """Causal decoding over [prefix ; tokens]; logits for text positions.

    lead_ctx, when given under an injecting mode, holds one projected
    expert embedding per layer; each block's text hidden states are
    rewritten before the next block.
    """
    ids = np.asarray(token_ids)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    b, t = ids.shape
    p_len = 0
    if prefix is not None:
        if prefix.ndim == 2:
            prefix = reshape(prefix, (1,) + prefix.shape)
        p_len = prefix.shape[1]
        if prefix.shape[0] != b:
            raise DimensionError(f"prefix batch {prefix.shape[0]} vs token batch {b}")
    if p_len + t > cfg.max_seq_len:
        raise CapacityError(f"sequence {p_len}+{t} exceeds max_seq_len {cfg.max_seq_len}")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise ContractError("token id outside vocabulary")

    x = embedding(params["decoder.tok_emb"], ids) + embedding(params["decoder.pos_emb"], np.arange(t))
    if prefix is not None:
        x = concat(prefix, x, axis=1)
    mask = _causal_mask(p_len + t, x.dtype)
    inject = lead_ctx is not None and cfg.injection_mode in INJECTING_MODES
    hidden = []
    for l in range(cfg.n_layers):
        x = _decoder_block(params, cfg, x, l, mask, lora_active)
        if inject:
            if p_len:
                head = narrow(x, 1, 0, p_len)
                text = narrow(x, 1, p_len, t)
                text = fusion.apply_injection(params, cfg, text, lead_ctx[l], l, gate_sink)
                x = concat(head, text, axis=1)
            else:
                x = fusion.apply_injection(params, cfg, x, lead_ctx[l], l, gate_sink)
        if return_hidden:
            hidden.append(x)
    if p_len:
        x = narrow(x, 1, p_len, t)
    x = layer_norm(x, params["decoder.final_ln.g"], params["decoder.final_ln.b"])
    logits = affine(x, params["decoder.head.w"], params["decoder.head.b"])
    if single:
        logits = reshape(logits, logits.shape[1:])
    return (logits, hidden) if return_hidden else logits


def _decoder_block(params: dict, cfg: ModelConfig, x: Tensor, i: int, mask, lora_active: bool) -> Tensor:
    pre = f"decoder.blocks.{i}"

    def lin(name, t):
        return _adapted_linear(params, cfg, f"{pre}.attn.{name}", t, lora_active)

    h = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    x = x + _mha(h, lin, cfg.n_heads, mask)
    h = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    h = silu(_adapted_linear(params, cfg, f"{pre}.ffn.w1", h, lora_active))
    return x + _adapted_linear(params, cfg, f"{pre}.ffn.w2", h, lora_active)


def _adapted_linear(params: dict, cfg: ModelConfig, key: str, x: Tensor, lora_active: bool) -> Tensor:
    if lora_active:
        return lora_linear(x, params[f"{key}.w"], params[f"{key}.lora_A"], params[f"{key}.lora_B"],
                           cfg.lora_alpha, cfg.lora_rank, bias=params[f"{key}.b"])
    return affine(x, params[f"{key}.w"], params[f"{key}.b"])


# -- the assembled model -------------------------------------------------------

class LeadModel:
    """Parameter container plus the forward paths the trainer needs.

    Component weights draw from independent named seed streams, so two
    models built with different injection modes but one seed share every
    non-lead parameter bit-for-bit.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32, text_only: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.text_only = text_only
        self.params: dict = init_decoder_params(cfg, stream(seed, "decoder"), dtype)
        if not text_only:
            self.params.update(init_vision_params(cfg, stream(seed, "vision"), dtype))
            self.params.update(init_connector_params(cfg, stream(seed, "connector"), dtype))
            self.params.update(init_expert_params(cfg, stream(seed, "expert"), dtype))
            self.params.update(fusion.init_lead_params(cfg, stream(seed, "lead"), dtype))
        self.lora_active = False

    # -- parameter management ------------------------------------------------
    def trainable(self) -> dict:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def set_all_trainable(self, flag: bool = True):
        for t in self.params.values():
            t.requires_grad = flag

    def refresh_lora_active(self):
        anyb = any(np.any(t.data) for n, t in self.params.items() if n.endswith(".lora_B"))
        trainable = any(t.requires_grad for n, t in self.params.items() if ".lora_" in n)
        self.lora_active = bool(anyb or trainable)

    # -- forward paths ---------------------------------------------------------
    def visual_features(self, images) -> Tensor:
        return encode_image(self.params, self.cfg, images)

    def prefix_embeddings(self, vf: Tensor) -> Tensor:
        return connect(self.params, vf)

    def expert_outputs(self, vf: Tensor) -> tuple:
        s, f = expert_forward(self.params, self.cfg, vf)
        return s, f

    def text_logits(self, ids, return_hidden: bool = False):
        return decoder_forward(self.params, self.cfg, ids, lora_active=self.lora_active,
                               return_hidden=return_hidden)

    def multimodal_logits(self, images, ids, gate_sink=None, return_hidden: bool = False,
                          with_experts: bool | None = None):
        """(logits, expert logits or None) for a batch of image/report pairs."""
        cfg = self.cfg
        if self.text_only:
            raise ConfigError("text-only model cannot take images")
        vf = self.visual_features(images)
        prefix = self.prefix_embeddings(vf)
        mode = cfg.injection_mode
        if with_experts is None:
            with_experts = mode != "none"
        s = lead_ctx = None
        if with_experts:
            s, f = expert_forward(self.params, cfg, vf)
            if mode in INJECTING_MODES:
                e = aggregate_confidence(self.params, cfg, s, f)
                lead_ctx = fusion.project_all(self.params, cfg, e)
        logits = decoder_forward(self.params, cfg, ids, prefix=prefix, lead_ctx=lead_ctx,
                                 lora_active=self.lora_active, gate_sink=gate_sink,
                                 return_hidden=return_hidden)
        return logits, s


def set_trainable(model: LeadModel, partition: ParameterPartition):
    """Apply a freeze configuration; frozen groups never receive gradients."""
    partition.validate()
    for name, t in model.params.items():
        t.requires_grad = partition.trainable(group_of(name))
    model.refresh_lora_active()


def group_hashes(model: LeadModel) -> dict:
    """sha256 of each parameter group's raw bytes (freeze-integrity probe)."""
    groups: dict = {}
    for name in sorted(model.params):
        groups.setdefault(group_of(name), hashlib.sha256())
    for name in sorted(model.params):
        h = groups[group_of(name)]
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    return {g: h.hexdigest() for g, h in groups.items()}


# -- greedy decoding -----------------------------------------------------------

def generate_greedy_batch(model: LeadModel, prompts: np.ndarray, images=None,
                          max_new_tokens: int = 64, stop_id: int | None = None) -> list:
    """Lockstep argmax decoding; ties break to the lowest token id.

    Returns one id array per row: prompt plus generation, cut after the
    first stop_id. Deterministic; no sampling, no cache.
    """
    if max_new_tokens < 1:
        raise ContractError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
    cfg = model.cfg
    prompts = np.asarray(prompts)
    if prompts.ndim == 1:
        prompts = prompts[None]
    b = prompts.shape[0]
    with no_grad():
        prefix = lead_ctx = None
        if images is not None:
            vf = model.visual_features(images)
            prefix = model.prefix_embeddings(vf)
            if cfg.injection_mode in INJECTING_MODES:
                s, f = expert_forward(model.params, cfg, vf)
                e = aggregate_confidence(model.params, cfg, s, f)
                lead_ctx = fusion.project_all(model.params, cfg, e)
        p_len = prefix.shape[1] if prefix is not None else 0
        budget = min(max_new_tokens, cfg.max_seq_len - p_len - prompts.shape[1])
        ids = prompts
        done = np.zeros(b, dtype=bool)
        for _ in range(budget):
            logits = decoder_forward(model.params, cfg, ids, prefix=prefix, lead_ctx=lead_ctx,
                                     lora_active=model.lora_active)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            if stop_id is not None:
                nxt = np.where(done, stop_id, nxt)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            if stop_id is not None:
                done |= nxt == stop_id
                if done.all():
                    break
    out = []
    for row in ids:
        if stop_id is not None:
            hits = np.flatnonzero(row[prompts.shape[1]:] == stop_id)
            if hits.size:
                row = row[: prompts.shape[1] + hits[0] + 1]
        out.append(row.copy())
    return out


def generate_greedy(model: LeadModel, prompt: np.ndarray, image=None,
                    max_new_tokens: int = 64, stop_id: int | None = None) -> np.ndarray:
    images = None if image is None else np.asarray(image)[None]
    return generate_greedy_batch(model, np.asarray(prompt)[None], images, max_new_tokens, stop_id)[0]


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path: str, cfg: ModelConfig, params: dict):
    """version, config JSON, then (name, rank, dims, f32 LE data) per tensor."""
    blob = bytearray()
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    cfg_bytes = cfg.to_json().encode()
    blob += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    names = sorted(params)
    blob += struct.pack("<I", len(names))
    for name in names:
        data = params[name].data if isinstance(params[name], Tensor) else params[name]
        arr = np.ascontiguousarray(data, dtype="<f4")
        nb = name.encode()
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError([f"unsupported checkpoint version {version}"])
    (cfg_len,) = take("<I")
    cfg = ModelConfig.from_json(raw[off:off + cfg_len].decode())
    off += cfg_len
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = raw[off:off + name_len].decode()
        off += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        arrays[name] = arr.astype(np.float32)
    return cfg, arrays


def load_arrays(model: LeadModel, arrays: dict, allow_subset: bool = False):
    """Copy checkpoint arrays into the model, validating every shape."""
    problems = []
    for name, arr in sorted(arrays.items()):
        if name not in model.params:
            problems.append(f"unexpected tensor {name!r} {arr.shape}")
        elif model.params[name].shape != arr.shape:
            problems.append(f"{name!r}: checkpoint {arr.shape} vs model {model.params[name].shape}")
    if not allow_subset:
        for name in sorted(set(model.params) - set(arrays)):
            problems.append(f"missing tensor {name!r}")
    if problems:
        raise CheckpointError(problems)
    for name, arr in arrays.items():
        model.params[name].data = arr.astype(model.dtype)
    model.refresh_lora_active()


def model_from_checkpoint(path: str, dtype=np.float32) -> LeadModel:
    cfg, arrays = load_checkpoint(path)
    text_only = not any(n.startswith("vision.") for n in arrays)
    model = LeadModel(cfg, seed=0, dtype=dtype, text_only=text_only)
    load_arrays(model, arrays)
    return model
