"""Training loop pieces: Adam, LR schedule, one composite-loss step, checkpoints.

One step runs encoders -> both fusion stages -> alignment loss -> decoder ->
cross-entropy, combines them as L_ce + lambda * L_align, backprops, clips the
global gradient norm, and applies Adam. Batch composition is a pure function
of (seed, step) so an interrupted run resumes on the same curve.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .config import ModelConfig, TrainConfig, config_from_dict, config_to_dict
from .data import Batch, SyntheticSample, Vocab, make_batch
from .model import LossReport, ReportModel
from .tensor import Tensor


# ---------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
                state: AdamState, lr: float,
                betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Standard Adam with bias correction, in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_schedule(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warmup over the first 5% of steps, cosine decay to 10% of peak."""
    if config.scheduler == "constant":
        return config.lr
    warmup = max(1, int(round(config.warmup_frac * total_steps)))
    if step < warmup:
        return config.lr * (step + 1) / warmup
    floor = config.floor_frac * config.lr
    if total_steps <= warmup:
        return config.lr
    frac = (step - warmup) / (total_steps - warmup)
    frac = min(1.0, frac)
    return floor + (config.lr - floor) * 0.5 * (1.0 + np.cos(np.pi * frac))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------
# train step
# ---------------------------------------------------------------------

def train_step(model: ReportModel, batch: Batch, state: AdamState,
               config: TrainConfig, lr: Optional[float] = None) -> LossReport:
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    model.zero_grad()
    report = model.losses(batch, config.lambda_align)
    report.total.backward()
    grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
    report.grad_norm = clip_global_norm(grads, config.grad_clip)
    adam_update(model.params, grads, state, config.lr if lr is None else lr)
    report.total = None  # graph consumed
    return report


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Deterministic batch composition from (seed, step)."""
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def run_training(model: ReportModel, samples: Sequence[SyntheticSample],
                 vocab: Vocab, config: TrainConfig, n_steps: int,
                 state: Optional[AdamState] = None, start_step: int = 0,
                 max_len: int = 12, log_every: int = 0, log_fn=None):
    """Drive ``n_steps`` of training; returns (AdamState, list[LossReport])."""
    cfg = model.cfg
    state = state or AdamState()
    history = []
    for step in range(start_step, start_step + n_steps):
        idx = batch_indices(config.seed, step, len(samples), config.batch_size)
        batch = make_batch([samples[i] for i in idx], vocab, cfg.s_l, max_len)
        lr = lr_schedule(step, config, start_step + n_steps)
        report = train_step(model, batch, state, config, lr=lr)
        history.append(report)
        if log_fn is not None and log_every and (step + 1) % log_every == 0:
            log_fn(step, report)
    return state, history


# ---------------------------------------------------------------------
# checkpoint format: magic "DRMC", u32 version, config blob, tensor records,
# trailing CRC32 of all preceding bytes
# ---------------------------------------------------------------------

MAGIC = b"DRMC"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1,
               np.dtype(np.int64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(IOError):
    pass


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    rec = struct.pack("<I", len(nb)) + nb
    rec += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
    rec += struct.pack(f"<{arr.ndim}I", *arr.shape)
    rec += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    return rec


def save_checkpoint(model: ReportModel, state: AdamState,
                    train_cfg: TrainConfig, path: str,
                    extra: Optional[dict] = None) -> None:
    import json

    cfg_blob = json.dumps({
        "config": config_to_dict(model.cfg, train_cfg),
        "adam_step": state.step,
        "extra": extra or {},
    }, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", VERSION)
    body += struct.pack("<I", len(cfg_blob)) + cfg_blob
    records = []
    for name, p in sorted(model.params.items()):
        records.append(_tensor_record(name, p.data))
    for name in sorted(state.m):
        records.append(_tensor_record(f"adam.m.{name}", state.m[name]))
        records.append(_tensor_record(f"adam.v.{name}", state.v[name]))
    body += struct.pack("<I", len(records)) + b"".join(records)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))


def _read(buf: memoryview, off: int, n: int):
    if off + n > len(buf):
        raise CheckpointError("truncated checkpoint file")
    return bytes(buf[off:off + n]), off + n


def load_checkpoint(path: str):
    """Returns (model, adam_state, train_cfg, extra); bit-identical round-trip."""
    import json

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint file")
    body, crc_bytes = raw[:-4], raw[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError("checksum failure")
    buf = memoryview(body)
    off = 0
    magic, off = _read(buf, off, 4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    ver, = struct.unpack("<I", _read(buf, off, 4)[0]); off += 4
    if ver != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ver}")
    blob_len, = struct.unpack("<I", _read(buf, off, 4)[0]); off += 4
    blob, off = _read(buf, off, blob_len)
    meta = json.loads(blob.decode("utf-8"))
    n_records, = struct.unpack("<I", _read(buf, off, 4)[0]); off += 4

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name_len, = struct.unpack("<I", _read(buf, off, 4)[0]); off += 4
        name = _read(buf, off, name_len)[0].decode("utf-8"); off += name_len
        tag, rank = struct.unpack("<BB", _read(buf, off, 2)[0]); off += 2
        shape = struct.unpack(f"<{rank}I", _read(buf, off, 4 * rank)[0]); off += 4 * rank
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape)) * dtype.itemsize if rank else dtype.itemsize
        payload, off = _read(buf, off, nbytes)
        tensors[name] = np.frombuffer(payload, dtype=dtype.newbyteorder("<")) \
            .astype(dtype).reshape(shape)

    model_cfg, train_cfg = config_from_dict(meta["config"])
    model = ReportModel(model_cfg)
    for name, p in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data = tensors[name].copy()
    state = AdamState(step=meta["adam_step"])
    for name in model.params:
        mk, vk = f"adam.m.{name}", f"adam.v.{name}"
        if mk in tensors:
            state.m[name] = tensors[mk].copy()
            state.v[name] = tensors[vk].copy()
    return model, state, train_cfg, meta.get("extra", {})
