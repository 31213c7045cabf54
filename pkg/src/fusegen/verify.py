"""Finite-difference verification harness for every differentiable stage.

Used by the grad-check CLI subcommand and the test suite. Each check builds a
small random instance, computes analytic gradients through the tape, and
compares against central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from . import abstractor as abs_mod
from . import adaptor as adp_mod
from . import alignment as aln_mod
from . import decoder as dec_mod
from . import data as data_mod
from . import nn
from . import tensor as T
from .config import ModelConfig, TrainConfig
from .model import ReportModel
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28s} rel_err={self.max_rel_err:.3e} (< {self.threshold:.0e})"


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-5,
    sample_per_tensor: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    corrupt: bool = False,
) -> float:
    """Max relative error of analytic vs central-difference parameter grads.

    ``loss_fn`` must be a deterministic closure over ``params``. With
    ``sample_per_tensor`` set, only that many coordinates per tensor are
    probed (chosen by ``rng``). ``corrupt`` deliberately skews the analytic
    gradient; it exists as a negative control.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        g = (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
        if corrupt:
            g = g + 0.5
        flat = p.data.ravel()
        if sample_per_tensor is None or flat.size <= sample_per_tensor:
            idxs: Iterable[int] = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=sample_per_tensor, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise T.NonFiniteError(f"non-finite loss probing {name}[{i}]")
            cd = (fp - fm) / (2.0 * h)
            rel = abs(g[i] - cd) / max(abs(g[i]), abs(cd), 1e-12)
            worst = max(worst, rel)
    return worst


def toy_config(attn_norm: str = "softmax", seed: int = 0, **overrides) -> ModelConfig:
    """Smallest config that still exercises every mechanism; < 50k params."""
    kw = dict(
        image_side=16, e_v=8, e_l=16, s_l=4, enc_layers=1, enc_heads=4,
        p=16, d_align=16, dec_d=32, dec_layers=1, n_q=4, n_kv=2,
        vocab_size=29, max_report_len=12, attn_norm=attn_norm, seed=seed,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------
# per-module checks
# ---------------------------------------------------------------------

def _sumsq(x: Tensor) -> Tensor:
    # generic nondegenerate scalar readout
    return (x * x).sum()


def check_mha(mode: str, rng: np.random.Generator) -> float:
    d, s = 16, 5
    params = nn.init_mha(rng, d)
    x0 = Tensor(rng.normal(0, 1, (1, s, d)))
    return T.grad_check(lambda x: _sumsq(nn.mha(x, params, 4, mode=mode)), x0)


def check_abstractor(mode: str, rng: np.random.Generator) -> float:
    cfg = toy_config(attn_norm=mode)
    params = abs_mod.init_abstractor(cfg, rng)
    v0 = Tensor(rng.normal(0, 1, (1, 6, cfg.e_v)))
    l_e = Tensor(rng.normal(0, 1, (1, 3, cfg.e_l)))

    def f(v):
        out = abs_mod.abstractor_forward(v, l_e, params, cfg)
        return _sumsq(out.f1)

    return T.grad_check(f, v0)


def check_adaptor(mode: str, rng: np.random.Generator) -> float:
    cfg = toy_config(attn_norm=mode)
    params = adp_mod.init_adaptor(cfg, rng)
    v0 = Tensor(rng.normal(0, 1, (1, cfg.s_v, cfg.e_v)))
    l_e = Tensor(rng.normal(0, 1, (1, cfg.s_l, cfg.e_l)))

    def f(v):
        out = adp_mod.adaptor_forward(v, l_e, params, cfg)
        return _sumsq(out.f2)

    return T.grad_check(f, v0)


def check_info_nce(rng: np.random.Generator) -> float:
    n, d = 4, 8
    r_raw = Tensor(rng.normal(0, 1, (n, d)))
    tau = Tensor(np.array([0.7]))

    def f(x):
        f_emb, _ = aln_mod.l2_normalize(x)
        r_emb, _ = aln_mod.l2_normalize(r_raw)
        return aln_mod.info_nce(f_emb, r_emb, tau)

    return T.grad_check(f, Tensor(rng.normal(0, 1, (n, d))))


def check_swiglu(rng: np.random.Generator) -> float:
    d, dff = 8, 12
    w1 = Tensor(rng.normal(0, 0.5, (d, dff)))
    w2 = Tensor(rng.normal(0, 0.5, (d, dff)))
    w3 = Tensor(rng.normal(0, 0.5, (dff, d)))
    return T.grad_check(lambda x: _sumsq(dec_mod.swiglu_ffn(x, w1, w2, w3)),
                        Tensor(rng.normal(0, 1, (3, d))))


def check_rms_norm(rng: np.random.Generator) -> float:
    gain = Tensor(rng.normal(1, 0.2, 10))
    r = Tensor(rng.normal(0, 1, (4, 10)))
    return T.grad_check(lambda x: (T.rms_norm(x, gain) * r).sum(),
                        Tensor(rng.normal(0, 1, (4, 10))))


def check_cross_entropy(rng: np.random.Generator) -> float:
    n, t, v = 2, 4, 7
    targets = rng.integers(0, v, (n, t))
    mask = np.ones((n, t), dtype=bool)
    mask[1, -1] = False
    return T.grad_check(lambda x: dec_mod.cross_entropy(x, targets, mask)[0],
                        Tensor(rng.normal(0, 1, (n, t, v))))


def check_end_to_end(mode: str, seed: int = 0, lambda_align: float = 0.5,
                     sample_per_tensor: int = 4, corrupt: bool = False) -> float:
    """Composite-loss gradient over all model parameters, sampled coordinates."""
    cfg = toy_config(attn_norm=mode, seed=seed)
    model = ReportModel(cfg)
    vocab = data_mod.default_vocab()
    samples = data_mod.synth_generate(2, seed=seed + 11, side=cfg.image_side)
    batch = data_mod.make_batch(samples, vocab, cfg.s_l, max_len=10)

    def loss_fn():
        return model.losses(batch, lambda_align).total

    rng = np.random.default_rng(seed)
    return grad_check_params(loss_fn, model.params, h=1e-5,
                             sample_per_tensor=sample_per_tensor, rng=rng,
                             corrupt=corrupt)


def run_all_checks(mode: str = "softmax", seed: int = 0,
                   module_threshold: float = 1e-5,
                   end_to_end_threshold: float = 1e-4,
                   corrupt: bool = False) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [
        CheckResult("mha", check_mha(mode, rng), module_threshold),
        CheckResult("abstractor (proj+cross)", check_abstractor(mode, rng), module_threshold),
        CheckResult("adaptor (gate+decoupled)", check_adaptor(mode, rng), module_threshold),
        CheckResult("info_nce", check_info_nce(rng), module_threshold),
        CheckResult("swiglu_ffn", check_swiglu(rng), module_threshold),
        CheckResult("rms_norm", check_rms_norm(rng), module_threshold),
        CheckResult("cross_entropy", check_cross_entropy(rng), module_threshold),
        CheckResult("end-to-end composite loss",
                    check_end_to_end(mode, seed, corrupt=corrupt),
                    end_to_end_threshold),
    ]
    return results
