"""Tests for the autoregressive decoder: RoPE, GQA, KV cache, causality, CE."""

import numpy as np
import pytest

from fusegen import decoder as DEC
from fusegen import tensor as T
from fusegen.config import ConfigError
from fusegen.tensor import Tensor
from fusegen.verify import toy_config

RNG = np.random.default_rng(23)


def _setup(**overrides):
    cfg = toy_config(**overrides)
    params = DEC.init_decoder(cfg, np.random.default_rng(9))
    return cfg, params


def _memory(cfg, n=1, rows=6):
    return Tensor(RNG.normal(0, 1, (n, rows, cfg.dec_d)))


# ---------------------------------------------------------------------
# rotary positions
# ---------------------------------------------------------------------

def test_rope_preserves_pair_norms():
    x = Tensor(RNG.normal(0, 1, (2, 3, 5, 8)))
    out = DEC.rope_apply(x, start_pos=2).data
    norms_in = (x.data.reshape(2, 3, 5, 4, 2) ** 2).sum(-1)
    norms_out = (out.reshape(2, 3, 5, 4, 2) ** 2).sum(-1)
    np.testing.assert_allclose(norms_in, norms_out, atol=1e-12)


def test_rope_position_zero_is_identity():
    x = Tensor(RNG.normal(0, 1, (1, 1, 8)))
    np.testing.assert_allclose(DEC.rope_apply(x, start_pos=0).data, x.data, atol=1e-12)


@pytest.mark.parametrize("offset", [1, 5, 17])
def test_rope_dot_products_depend_on_relative_offset(offset):
    hd = 8
    q = RNG.normal(0, 1, (1, 4, hd))
    k = RNG.normal(0, 1, (1, 4, hd))
    q0 = DEC.rope_apply(Tensor(q), start_pos=0).data
    k0 = DEC.rope_apply(Tensor(k), start_pos=0).data
    qs = DEC.rope_apply(Tensor(q), start_pos=offset).data
    ks = DEC.rope_apply(Tensor(k), start_pos=offset).data
    dots0 = q0[0] @ k0[0].T
    dots_s = qs[0] @ ks[0].T
    np.testing.assert_allclose(dots0, dots_s, atol=1e-8)


def test_rope_start_pos_matches_slicing():
    x = RNG.normal(0, 1, (1, 6, 8))
    full = DEC.rope_apply(Tensor(x), start_pos=0).data
    tail = DEC.rope_apply(Tensor(x[:, 4:]), start_pos=4).data
    np.testing.assert_allclose(full[:, 4:], tail, atol=1e-12)


def test_rope_odd_head_dim_rejected():
    with pytest.raises(ConfigError):
        DEC.rope_apply(Tensor(np.zeros((1, 2, 7))))


# ---------------------------------------------------------------------
# grouped-query attention
# ---------------------------------------------------------------------

def test_gqa_reduces_to_mha_when_groups_are_trivial():
    """n_kv == n_q with shared K/V weights must equal plain per-head attention."""
    cfg, params = _setup(n_kv=4)      # n_q == n_kv == 4
    x = Tensor(RNG.normal(0, 1, (1, 5, cfg.dec_d)))
    out = DEC.gqa_attention(x, params, cfg, layer=0).data

    # independent per-head reference with explicit loops
    pre = "dec.layer0.sa"
    hd = cfg.head_dim
    q = (x.data @ params[f"{pre}.w_q"].data).reshape(1, 5, 4, hd)
    k = (x.data @ params[f"{pre}.w_k"].data).reshape(1, 5, 4, hd)
    v = (x.data @ params[f"{pre}.w_v"].data).reshape(1, 5, 4, hd)
    q = DEC.rope_apply(Tensor(q.transpose(0, 2, 1, 3))).data
    k = DEC.rope_apply(Tensor(k.transpose(0, 2, 1, 3))).data
    v = v.transpose(0, 2, 1, 3)
    heads = []
    for h in range(4):
        logits = q[0, h] @ k[0, h].T / np.sqrt(hd)
        logits[np.triu_indices(5, k=1)] = -np.inf
        e = np.exp(logits - logits.max(-1, keepdims=True))
        w = e / e.sum(-1, keepdims=True)
        heads.append(w @ v[0, h])
    ref = np.concatenate(heads, axis=-1) @ params[f"{pre}.w_o"].data
    np.testing.assert_allclose(out[0], ref, atol=1e-8)


def test_gqa_group_sharing_oracle():
    """With n_kv < n_q, query head i must use KV head i // group_size."""
    cfg, params = _setup()            # n_q=4, n_kv=2
    x = Tensor(RNG.normal(0, 1, (1, 4, cfg.dec_d)))
    out = DEC.gqa_attention(x, params, cfg, layer=0).data

    pre = "dec.layer0.sa"
    hd, g = cfg.head_dim, cfg.n_q // cfg.n_kv
    q = (x.data @ params[f"{pre}.w_q"].data).reshape(1, 4, cfg.n_q, hd).transpose(0, 2, 1, 3)
    k = (x.data @ params[f"{pre}.w_k"].data).reshape(1, 4, cfg.n_kv, hd).transpose(0, 2, 1, 3)
    v = (x.data @ params[f"{pre}.w_v"].data).reshape(1, 4, cfg.n_kv, hd).transpose(0, 2, 1, 3)
    q = DEC.rope_apply(Tensor(q)).data
    k = DEC.rope_apply(Tensor(k)).data
    heads = []
    for i in range(cfg.n_q):
        kv = i // g
        logits = q[0, i] @ k[0, kv].T / np.sqrt(hd)
        logits[np.triu_indices(4, k=1)] = -np.inf
        e = np.exp(logits - logits.max(-1, keepdims=True))
        w = e / e.sum(-1, keepdims=True)
        heads.append(w @ v[0, kv])
    ref = np.concatenate(heads, axis=-1) @ params[f"{pre}.w_o"].data
    np.testing.assert_allclose(out[0], ref, atol=1e-10)


# ---------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------

def test_cached_equals_uncached_attention():
    cfg, params = _setup()
    t = 6
    x = RNG.normal(0, 1, (1, t, cfg.dec_d))
    full = DEC.gqa_attention(Tensor(x), params, cfg, layer=0).data

    cache = DEC.KVCache(1, cfg.n_kv, cfg.head_dim)
    step_out = np.zeros_like(full)
    for pos in range(t):
        o = DEC.gqa_attention(Tensor(x[:, pos:pos + 1]), params, cfg, layer=0,
                              cache=cache, start_pos=pos)
        step_out[:, pos] = o.data[:, 0]
    np.testing.assert_allclose(step_out, full, atol=1e-10)


def test_cache_grows_one_per_step_and_checks_position():
    cfg, params = _setup()
    cache = DEC.KVCache(cfg.dec_layers, cfg.n_kv, cfg.head_dim)
    x = Tensor(RNG.normal(0, 1, (1, 1, cfg.dec_d)))
    DEC.gqa_attention(x, params, cfg, layer=0, cache=cache, start_pos=0)
    assert cache.length(0) == 1
    with pytest.raises(ValueError):
        DEC.gqa_attention(x, params, cfg, layer=0, cache=cache, start_pos=5)
    with pytest.raises(ValueError):
        cache.append(0, np.zeros((cfg.n_kv, 2, cfg.head_dim)),
                     np.zeros((cfg.n_kv, 2, cfg.head_dim)))


def test_cached_decoding_matches_full_forward():
    cfg, params = _setup()
    mem = _memory(cfg)
    ids = RNG.integers(0, cfg.vocab_size, 7)
    full = DEC.decoder_forward(ids, mem, params, cfg).data[0]
    cache = DEC.KVCache(cfg.dec_layers, cfg.n_kv, cfg.head_dim)
    for pos, tok in enumerate(ids):
        row = DEC.decode_step(int(tok), pos, mem, params, cfg, cache)
        np.testing.assert_allclose(row, full[pos], atol=1e-8)


# ---------------------------------------------------------------------
# causality and masks
# ---------------------------------------------------------------------

def test_causality_future_tokens_cannot_leak():
    cfg, params = _setup()
    mem = _memory(cfg)
    ids = RNG.integers(0, cfg.vocab_size, 8)
    base = DEC.decoder_forward(ids, mem, params, cfg).data[0]
    for t in (2, 5):
        perturbed = ids.copy()
        perturbed[t + 1:] = RNG.integers(0, cfg.vocab_size, len(ids) - t - 1)
        out = DEC.decoder_forward(perturbed, mem, params, cfg).data[0]
        np.testing.assert_allclose(out[: t + 1], base[: t + 1], atol=1e-12)


def test_cross_attention_memory_mask():
    cfg, params = _setup()
    mem_rows = 5
    mem = _memory(cfg, rows=mem_rows)
    mask = np.ones((1, 1, mem_rows), dtype=bool)
    mask[0, 0, 3:] = False
    ids = RNG.integers(0, cfg.vocab_size, 4)
    a = DEC.decoder_forward(ids, mem, params, cfg, mem_mask=mask).data
    mem2 = Tensor(mem.data.copy())
    mem2.data[0, 3:] += 7.0       # masked rows only
    b = DEC.decoder_forward(ids, mem2, params, cfg, mem_mask=mask).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_decoder_rejects_overlong_sequence():
    cfg, params = _setup()
    mem = _memory(cfg)
    with pytest.raises(ConfigError):
        DEC.decoder_forward(np.zeros(cfg.max_report_len + 2, dtype=int),
                            mem, params, cfg)


# ---------------------------------------------------------------------
# losses and blocks
# ---------------------------------------------------------------------

def test_swiglu_matches_numpy():
    d, dff = 6, 10
    w1 = Tensor(RNG.normal(0, 1, (d, dff)))
    w2 = Tensor(RNG.normal(0, 1, (d, dff)))
    w3 = Tensor(RNG.normal(0, 1, (dff, d)))
    x = RNG.normal(0, 1, (3, d))
    out = DEC.swiglu_ffn(Tensor(x), w1, w2, w3).data
    a = x @ w1.data
    b = x @ w2.data
    ref = (a * (b / (1.0 + np.exp(-b)))) @ w3.data
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_cross_entropy_matches_numpy_oracle():
    n, t, v = 2, 5, 9
    logits = RNG.normal(0, 2, (n, t, v))
    targets = RNG.integers(0, v, (n, t))
    mask = RNG.uniform(size=(n, t)) > 0.3
    mask[:, 0] = True
    total, per_tok = DEC.cross_entropy(Tensor(logits), targets, mask)
    logp = logits - logits.max(-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    expect = nll[mask].sum()
    assert total.item() == pytest.approx(expect, rel=1e-9)
    assert per_tok.item() == pytest.approx(expect / mask.sum(), rel=1e-9)


def test_cross_entropy_rejects_bad_targets():
    logits = Tensor(np.zeros((1, 2, 4)))
    with pytest.raises(IndexError):
        DEC.cross_entropy(logits, np.array([[0, 4]]))


def test_decoder_forward_grad_reaches_all_params():
    cfg, params = _setup()
    mem = DEC.project_memory(Tensor(RNG.normal(0, 1, (1, 6, cfg.p))), params)
    ids = RNG.integers(0, cfg.vocab_size, (1, 5))
    logits = DEC.decoder_forward(ids, mem, params, cfg)
    total, _ = DEC.cross_entropy(logits, RNG.integers(0, cfg.vocab_size, (1, 5)))
    total.backward()
    for name, p in params.items():
        assert p.grad is not None, name
