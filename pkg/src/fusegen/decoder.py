"""Compact autoregressive decoder conditioned on fused features.

Layer order: RMS pre-norm -> causal grouped-query self-attention (rotary
positions on Q/K) -> residual -> RMS pre-norm -> cross-attention over the
fused memory -> residual -> RMS pre-norm -> SwiGLU -> residual. During
training the cross-attention memory is the fused feature rows followed by the
teacher-forced report embeddings; the report segment is causally masked so
logits at position t never see tokens past t. At inference the report segment
grows with the embeddings of already-consumed tokens, keeping the memory
distribution identical to training, and decoding runs with a per-layer KV
cache.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .config import ConfigError, ModelConfig
from .tensor import Tensor


def init_decoder(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    d, hd = cfg.dec_d, cfg.head_dim
    params = {
        "dec.embed": Tensor(rng.normal(0.0, cfg.init_std, size=(cfg.vocab_size, d)),
                            requires_grad=True),
        "dec.mem.w": nn.init_weight(rng, cfg.p, d),
        "dec.mem.b": nn.init_bias(d),
        "dec.final_rms.g": Tensor(np.ones(d), requires_grad=True),
        "dec.head.w": nn.init_weight(rng, d, cfg.vocab_size),
    }
    for l in range(cfg.dec_layers):
        pre = f"dec.layer{l}"
        params[f"{pre}.rms1.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{pre}.rms2.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{pre}.rms3.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{pre}.sa.w_q"] = nn.init_weight(rng, d, cfg.n_q * hd)
        params[f"{pre}.sa.w_k"] = nn.init_weight(rng, d, cfg.n_kv * hd)
        params[f"{pre}.sa.w_v"] = nn.init_weight(rng, d, cfg.n_kv * hd)
        params[f"{pre}.sa.w_o"] = nn.init_weight(rng, cfg.n_q * hd, d)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            params[f"{pre}.ca.{name}"] = nn.init_weight(rng, d, d)
        params[f"{pre}.ffn.w1"] = nn.init_weight(rng, d, cfg.d_ff)
        params[f"{pre}.ffn.w2"] = nn.init_weight(rng, d, cfg.d_ff)
        params[f"{pre}.ffn.w3"] = nn.init_weight(rng, cfg.d_ff, d)
    return params


# ---------------------------------------------------------------------
# rotary positions
# ---------------------------------------------------------------------

def rope_apply(x: Tensor, start_pos: int = 0, base: float = 10000.0) -> Tensor:
    """Rotate adjacent pairs of the trailing axis by position-dependent angles.

    x: (..., S, head_dim) with even head_dim; position m = start_pos + row,
    pair k rotates by m * base**(-2k/head_dim).
    """
    hd = x.shape[-1]
    if hd % 2 != 0:
        raise ConfigError(f"head_dim must be even for rotary embeddings, got {hd}")
    s = x.shape[-2]
    pos = np.arange(start_pos, start_pos + s, dtype=float)[:, None]
    theta = base ** (-2.0 * np.arange(hd // 2, dtype=float) / hd)[None, :]
    ang = pos * theta                      # (S, hd/2)
    cos, sin = Tensor(np.cos(ang)), Tensor(np.sin(ang))
    xr = x[..., 0::2]
    xi = x[..., 1::2]
    out_r = xr * cos - xi * sin
    out_i = xr * sin + xi * cos
    pair_shape = out_r.shape + (1,)
    stacked = T.concat([out_r.reshape(pair_shape), out_i.reshape(pair_shape)], axis=-1)
    return stacked.reshape(x.shape)


# ---------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------

class KVCache:
    """Per-layer cached self-attention keys/values for one decode stream.

    Each layer holds arrays of shape (n_kv, t, head_dim); t grows by exactly
    one per decode step and existing entries are never mutated.
    """

    def __init__(self, n_layers: int, n_kv: int, head_dim: int):
        self.k = [np.zeros((n_kv, 0, head_dim)) for _ in range(n_layers)]
        self.v = [np.zeros((n_kv, 0, head_dim)) for _ in range(n_layers)]

    def length(self, layer: int = 0) -> int:
        return self.k[layer].shape[1]

    def append(self, layer: int, k_new: np.ndarray, v_new: np.ndarray) -> None:
        if k_new.shape[1] != 1:
            raise ValueError("cache grows by exactly one position per step")
        self.k[layer] = np.concatenate([self.k[layer], k_new], axis=1)
        self.v[layer] = np.concatenate([self.v[layer], v_new], axis=1)


def gqa_attention(
    x: Tensor,
    params: dict,
    cfg: ModelConfig,
    layer: int,
    cache: Optional[KVCache] = None,
    start_pos: int = 0,
    causal: bool = True,
) -> Tensor:
    """Grouped-query self-attention; each group of n_q/n_kv query heads shares
    one KV head. With a cache, x must be a single new position and the fresh
    K/V are appended."""
    pre = f"dec.layer{layer}.sa"
    n, tq, d = x.shape
    hd, n_q, n_kv = cfg.head_dim, cfg.n_q, cfg.n_kv
    g = n_q // n_kv

    q = T.matmul(x, params[f"{pre}.w_q"]).reshape(n, tq, n_q, hd).transpose(0, 2, 1, 3)
    k = T.matmul(x, params[f"{pre}.w_k"]).reshape(n, tq, n_kv, hd).transpose(0, 2, 1, 3)
    v = T.matmul(x, params[f"{pre}.w_v"]).reshape(n, tq, n_kv, hd).transpose(0, 2, 1, 3)
    q = rope_apply(q, start_pos, cfg.rope_base)
    k = rope_apply(k, start_pos, cfg.rope_base)

    if cache is not None:
        if n != 1:
            raise ValueError("cached decoding is single-stream")
        if cache.length(layer) != start_pos:
            raise ValueError(f"cache holds {cache.length(layer)} positions, expected {start_pos}")
        cache.append(layer, k.data[0], v.data[0])
        k = Tensor(cache.k[layer][None])
        v = Tensor(cache.v[layer][None])

    tk = k.shape[2]
    q = q.reshape(n, n_kv, g, tq, hd)
    kg = k.reshape(n, n_kv, 1, tk, hd)
    vg = v.reshape(n, n_kv, 1, tk, hd)
    logits = T.matmul(q, kg.transpose(0, 1, 2, 4, 3)) * (1.0 / math.sqrt(hd))
    km = None
    if causal and cache is None:
        km = ~np.triu(np.ones((tq, tk), dtype=bool), k=1)  # True = may attend
    w = nn.attn_normalize(logits, cfg.attn_norm, km)
    out = T.matmul(w, vg).reshape(n, n_q, tq, hd).transpose(0, 2, 1, 3).reshape(n, tq, n_q * hd)
    return T.matmul(out, params[f"{pre}.w_o"])


def cross_attention(
    x: Tensor,
    memory: Tensor,
    params: dict,
    cfg: ModelConfig,
    layer: int,
    mem_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Standard multi-head attention of decoder states over the memory rows.

    ``mem_mask``: boolean, True = may attend, broadcastable to (N, Tq, S_m).
    """
    pre = f"dec.layer{layer}.ca"
    n, tq, d = x.shape
    n_heads, hd = cfg.n_q, cfg.head_dim
    q = T.matmul(x, params[f"{pre}.w_q"]).reshape(n, tq, n_heads, hd).transpose(0, 2, 1, 3)
    k = T.matmul(memory, params[f"{pre}.w_k"]).reshape(n, -1, n_heads, hd).transpose(0, 2, 1, 3)
    v = T.matmul(memory, params[f"{pre}.w_v"]).reshape(n, -1, n_heads, hd).transpose(0, 2, 1, 3)
    logits = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    km = None
    if mem_mask is not None:
        km = np.asarray(mem_mask, dtype=bool)
        while km.ndim < 3:
            km = km[None]
        km = km[:, None, :, :]  # head axis
    w = nn.attn_normalize(logits, cfg.attn_norm, km)
    out = T.matmul(w, v).transpose(0, 2, 1, 3).reshape(n, tq, d)
    return T.matmul(out, params[f"{pre}.w_o"])


def swiglu_ffn(x: Tensor, w1: Tensor, w2: Tensor, w3: Tensor) -> Tensor:
    """((x W1) * SiLU(x W2)) W3."""
    return T.matmul(T.matmul(x, w1) * T.silu(T.matmul(x, w2)), w3)


# ---------------------------------------------------------------------
# full decoder
# ---------------------------------------------------------------------

def project_memory(f: Tensor, params: dict) -> Tensor:
    return nn.linear(f, params["dec.mem.w"], params["dec.mem.b"])


def decoder_layer(
    x: Tensor,
    memory: Tensor,
    params: dict,
    cfg: ModelConfig,
    layer: int,
    cache: Optional[KVCache] = None,
    start_pos: int = 0,
    mem_mask: Optional[np.ndarray] = None,
) -> Tensor:
    pre = f"dec.layer{layer}"
    h = T.rms_norm(x, params[f"{pre}.rms1.g"], cfg.rms_eps)
    x = x + gqa_attention(h, params, cfg, layer, cache=cache, start_pos=start_pos)
    h = T.rms_norm(x, params[f"{pre}.rms2.g"], cfg.rms_eps)
    x = x + cross_attention(h, memory, params, cfg, layer, mem_mask=mem_mask)
    h = T.rms_norm(x, params[f"{pre}.rms3.g"], cfg.rms_eps)
    x = x + swiglu_ffn(h, params[f"{pre}.ffn.w1"], params[f"{pre}.ffn.w2"], params[f"{pre}.ffn.w3"])
    return x


def decoder_forward(
    report_ids_in: np.ndarray,
    memory: Tensor,
    params: dict,
    cfg: ModelConfig,
    mem_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Teacher-forced pass: (N, T) input ids -> (N, T, vocab) next-token logits."""
    ids = np.asarray(report_ids_in)
    if ids.ndim == 1:
        ids = ids[None, :]
    t = ids.shape[1]
    if t < 1 or t > cfg.max_report_len + 1:
        raise ConfigError(f"sequence length {t} exceeds configured maximum {cfg.max_report_len + 1}")
    x = T.embedding(params["dec.embed"], ids)
    for l in range(cfg.dec_layers):
        x = decoder_layer(x, memory, params, cfg, l, mem_mask=mem_mask)
    x = T.rms_norm(x, params["dec.final_rms.g"], cfg.rms_eps)
    return T.matmul(x, params["dec.head.w"])


def decode_step(
    token_id: int,
    pos: int,
    memory: Tensor,
    params: dict,
    cfg: ModelConfig,
    cache: KVCache,
    mem_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One cached autoregressive step; returns the (vocab,) logits row."""
    x = T.embedding(params["dec.embed"], np.array([[token_id]]))
    for l in range(cfg.dec_layers):
        x = decoder_layer(x, memory, params, cfg, l, cache=cache, start_pos=pos,
                          mem_mask=mem_mask)
    x = T.rms_norm(x, params["dec.final_rms.g"], cfg.rms_eps)
    return T.matmul(x, params["dec.head.w"]).data[0, 0]


def cross_entropy(logits: Tensor, target_ids: np.ndarray,
                  mask: Optional[np.ndarray] = None):
    """Summed next-token negative log-likelihood over unmasked positions.

    Returns (total, per_token_mean) as tensors sharing one graph.
    """
    targets = np.asarray(target_ids)
    if targets.ndim == 1:
        targets = targets[None, :]
    n, t, vocab = logits.shape
    if targets.max() >= vocab or targets.min() < 0:
        raise IndexError(f"target id out of range for vocab {vocab}")
    if mask is None:
        mask = np.ones((n, t), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    probs = T.softmax_rows(logits)
    ni, ti = np.nonzero(mask)
    nll = -T.log(probs[ni, ti, targets[ni, ti]])
    total = nll.sum()
    per_token = total * (1.0 / max(1, len(ni)))
    return total, per_token
