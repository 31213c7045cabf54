"""Tests for the optimizer, scheduler, training loop, and checkpoints."""

import numpy as np
import pytest

from fusegen import data as D
from fusegen import training as TR
from fusegen.config import TrainConfig
from fusegen.model import ReportModel
from fusegen.tensor import Tensor
from fusegen.verify import toy_config

RNG = np.random.default_rng(29)


# ---------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------

def test_adam_first_step_oracle():
    # with bias correction the first update is -lr * g / (|g| + eps)
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    g = {"w": np.array([0.3, -0.7])}
    state = TR.AdamState()
    TR.adam_update(p, g, state, lr=0.1)
    expect = np.array([1.0, -2.0]) - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
    np.testing.assert_allclose(p["w"].data, expect, atol=1e-9)
    assert state.step == 1


def test_adam_two_steps_hand_computed():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    w = 0.5
    p = {"w": Tensor(np.array([w]), requires_grad=True)}
    state = TR.AdamState()
    m = v = 0.0
    for t, g in enumerate([0.2, -0.4], start=1):
        TR.adam_update(p, {"w": np.array([g])}, state, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w - lr * mh / (np.sqrt(vh) + eps)
    assert p["w"].data[0] == pytest.approx(w, abs=1e-12)


def test_adam_skips_missing_grads():
    p = {"w": Tensor(np.ones(2), requires_grad=True),
         "frozen": Tensor(np.ones(2), requires_grad=True)}
    TR.adam_update(p, {"w": np.ones(2)}, TR.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["frozen"].data, np.ones(2))


# ---------------------------------------------------------------------
# schedule and clipping
# ---------------------------------------------------------------------

def test_constant_schedule():
    cfg = TrainConfig(lr=3e-4, scheduler="constant")
    assert TR.lr_schedule(0, cfg, 100) == 3e-4
    assert TR.lr_schedule(99, cfg, 100) == 3e-4


def test_warmup_cosine_shape():
    cfg = TrainConfig(lr=1e-3, scheduler="warmup_cosine")
    total = 100
    warm = 5
    assert TR.lr_schedule(0, cfg, total) == pytest.approx(1e-3 / warm)
    assert TR.lr_schedule(warm - 1, cfg, total) == pytest.approx(1e-3)
    # decays monotonically to the floor
    lrs = [TR.lr_schedule(s, cfg, total) for s in range(warm, total)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert TR.lr_schedule(total - 1, cfg, total) >= 0.1 * 1e-3 - 1e-12
    assert TR.lr_schedule(total, cfg, total) == pytest.approx(0.1 * 1e-3)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = TR.clip_global_norm(g, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    clipped = np.sqrt(g["a"][0] ** 2 + g["b"][0] ** 2)
    assert clipped == pytest.approx(1.0, rel=1e-6)
    g2 = {"a": np.array([0.1])}
    assert TR.clip_global_norm(g2, max_norm=1.0) == pytest.approx(0.1)
    np.testing.assert_allclose(g2["a"], [0.1])


# ---------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------

def _tiny_run(n_steps, seed=0, start_step=0, model=None, state=None):
    cfg = toy_config(seed=seed)
    model = model or ReportModel(cfg)
    vocab = D.default_vocab()
    samples = D.synth_generate(8, seed=seed + 50, side=cfg.image_side)
    tc = TrainConfig(batch_size=4, lr=1e-3, scheduler="constant", seed=seed, epochs=1)
    state, hist = TR.run_training(model, samples, vocab, tc, n_steps=n_steps,
                                  state=state, start_step=start_step, max_len=10)
    return model, state, hist, tc


def test_batch_indices_deterministic_and_valid():
    a = TR.batch_indices(3, 7, n=10, batch_size=4)
    b = TR.batch_indices(3, 7, n=10, batch_size=4)
    np.testing.assert_array_equal(a, b)
    assert len(set(a.tolist())) == 4
    assert TR.batch_indices(3, 8, n=10, batch_size=4).tolist() != a.tolist()
    assert len(TR.batch_indices(0, 0, n=3, batch_size=8)) == 3


def test_loss_decreases_over_short_run():
    _, _, hist, _ = _tiny_run(30)
    assert hist[-1].l_total < hist[0].l_total


def test_training_is_deterministic():
    _, _, h1, _ = _tiny_run(5)
    _, _, h2, _ = _tiny_run(5)
    assert [h.l_total for h in h1] == [h.l_total for h in h2]


def test_train_step_rejects_empty_batch():
    cfg = toy_config()
    model = ReportModel(cfg)
    vocab = D.default_vocab()
    batch = D.make_batch(D.synth_generate(1, 0, cfg.image_side), vocab, cfg.s_l, 10)
    batch.images = batch.images[:0]
    with pytest.raises(ValueError):
        TR.train_step(model, batch, TR.AdamState(), TrainConfig())


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    model, state, _, tc = _tiny_run(3)
    p1 = str(tmp_path / "a.ckpt")
    p2 = str(tmp_path / "b.ckpt")
    TR.save_checkpoint(model, state, tc, p1, extra={"note": 1})
    m2, s2, tc2, extra = TR.load_checkpoint(p1)
    assert extra == {"note": 1}
    assert s2.step == state.step
    for name, p in model.params.items():
        np.testing.assert_array_equal(p.data, m2.params[name].data)
    for name in state.m:
        np.testing.assert_array_equal(state.m[name], s2.m[name])
        np.testing.assert_array_equal(state.v[name], s2.v[name])
    TR.save_checkpoint(m2, s2, tc2, p2, extra={"note": 1})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_resume_continues_the_loss_curve(tmp_path):
    # train 6 straight vs 3 + checkpoint + 3 resumed
    _, _, full, _ = _tiny_run(6)
    model, state, _, tc = _tiny_run(3)
    p = str(tmp_path / "mid.ckpt")
    TR.save_checkpoint(model, state, tc, p)
    m2, s2, _, _ = TR.load_checkpoint(p)
    _, _, resumed, _ = _tiny_run(3, start_step=3, model=m2, state=s2)
    for a, b in zip(full[3:], resumed):
        assert b.l_total == pytest.approx(a.l_total, abs=1e-9)


def test_checkpoint_bad_magic(tmp_path):
    p = str(tmp_path / "bad.ckpt")
    with open(p, "wb") as fh:
        fh.write(b"NOPE" + b"\x00" * 32)
    with pytest.raises(TR.CheckpointError):
        TR.load_checkpoint(p)


def test_checkpoint_crc_detects_corruption(tmp_path):
    model, state, _, tc = _tiny_run(1)
    p = str(tmp_path / "c.ckpt")
    TR.save_checkpoint(model, state, tc, p)
    raw = bytearray(open(p, "rb").read())
    raw[len(raw) // 2] ^= 0xFF
    with open(p, "wb") as fh:
        fh.write(bytes(raw))
    with pytest.raises(TR.CheckpointError):
        TR.load_checkpoint(p)


def test_checkpoint_truncation_detected(tmp_path):
    model, state, _, tc = _tiny_run(1)
    p = str(tmp_path / "t.ckpt")
    TR.save_checkpoint(model, state, tc, p)
    raw = open(p, "rb").read()
    with open(p, "wb") as fh:
        fh.write(raw[: len(raw) // 2])
    with pytest.raises(TR.CheckpointError):
        TR.load_checkpoint(p)
