"""First fusion stage: shared-space projection plus bidirectional cross-attention.

Both modalities pass through two-layer GELU MLPs into a common width P, attend
to each other (vision querying language and vice versa), and the two results
are row-concatenated, visual-derived rows first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


@dataclass
class AbstractorOutput:
    v_proj: Tensor  # (N, S_V, P)
    l_proj: Tensor  # (N, S_L, P)
    v2l: Tensor     # (N, S_V, P)
    l2v: Tensor     # (N, S_L, P)
    f1: Tensor      # (N, S_V + S_L, P)


def init_abstractor(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    return {
        "abs.v.w0": nn.init_weight(rng, cfg.e_v, cfg.h_v),
        "abs.v.b0": nn.init_bias(cfg.h_v),
        "abs.v.w1": nn.init_weight(rng, cfg.h_v, cfg.p),
        "abs.v.b1": nn.init_bias(cfg.p),
        "abs.l.w0": nn.init_weight(rng, cfg.e_l, cfg.h_l),
        "abs.l.b0": nn.init_bias(cfg.h_l),
        "abs.l.w1": nn.init_weight(rng, cfg.h_l, cfg.p),
        "abs.l.b1": nn.init_bias(cfg.p),
    }


def project_modalities(v_e: Tensor, l_e: Tensor, params: dict) -> Tuple[Tensor, Tensor]:
    """Two-layer GELU MLPs mapping each modality into the shared width P."""
    v = T.gelu(nn.linear(T.gelu(nn.linear(v_e, params["abs.v.w0"], params["abs.v.b0"])),
                         params["abs.v.w1"], params["abs.v.b1"]))
    l = T.gelu(nn.linear(T.gelu(nn.linear(l_e, params["abs.l.w0"], params["abs.l.b0"])),
                         params["abs.l.w1"], params["abs.l.b1"]))
    return v, l


def bidirectional_cross_attention(
    v_p: Tensor,
    l_p: Tensor,
    mode: str = "softmax",
    l_mask: Optional[np.ndarray] = None,
    return_weights: bool = False,
):
    """Cross-attend each modality over the other in the shared space.

    v_p: (N, S_V, P), l_p: (N, S_L, P). Returns (v2l, l2v): v2l rows are
    indexed by visual positions with content drawn from l_p rows, and
    symmetrically for l2v. ``l_mask`` masks padded language keys.
    """
    if v_p.shape[-1] != l_p.shape[-1]:
        raise T.ShapeError(f"shared dims differ: {v_p.shape} vs {l_p.shape}")
    scale = 1.0 / math.sqrt(v_p.shape[-1])
    km = None
    if l_mask is not None:
        km = np.asarray(l_mask, dtype=bool)[:, None, :]
    w_v2l = nn.attn_normalize(T.matmul(v_p, l_p.swapaxes(-1, -2)) * scale, mode, km)
    w_l2v = nn.attn_normalize(T.matmul(l_p, v_p.swapaxes(-1, -2)) * scale, mode, None)
    v2l = T.matmul(w_v2l, l_p)
    l2v = T.matmul(w_l2v, v_p)
    if return_weights:
        return (v2l, l2v), (w_v2l, w_l2v)
    return v2l, l2v


def aggregate(v2l: Tensor, l2v: Tensor) -> Tensor:
    """Row-wise concatenation, visual-derived rows first."""
    if v2l.shape[-1] != l2v.shape[-1]:
        raise T.ShapeError(f"widths differ: {v2l.shape} vs {l2v.shape}")
    return T.concat([v2l, l2v], axis=-2)


def abstractor_forward(
    v_e: Tensor,
    l_e: Tensor,
    params: dict,
    cfg: ModelConfig,
    l_mask: Optional[np.ndarray] = None,
) -> AbstractorOutput:
    v_p, l_p = project_modalities(v_e, l_e, params)
    v2l, l2v = bidirectional_cross_attention(v_p, l_p, cfg.attn_norm, l_mask)
    return AbstractorOutput(v_proj=v_p, l_proj=l_p, v2l=v2l, l2v=l2v,
                            f1=aggregate(v2l, l2v))
