"""Optimizer, schedule, batch construction, and the two-stage loop."""

from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np
import pytest

from irg.modes import STAGE1_MODES, STAGE2_MODES, Mode
from irg.neural.model import ModelConfig, as_tensors, init_params
from irg.rng import stream
from irg.training import (AdamState, TrainConfig, adam_step, as_mode_pools,
                          batch_loss, ema_update, load_checkpoint, lr_at,
                          make_step_batch, model_config_from_meta,
                          save_checkpoint, train, write_trace)
from irg.training import _draw_ablation, _draw_mode

from _util import demo_records

TINY = ModelConfig(d_model=24, n_layers=2, n_heads=2)


def tiny_tcfg(**kw) -> TrainConfig:
    base = dict(seed=3, batch_size=2, stage1_steps=3, stage2_steps=3,
                warmup_steps=2, cond_dropout=0.0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- schedule

def test_lr_warmup_is_linear():
    tcfg = TrainConfig(lr=3e-4, warmup_steps=100)
    assert lr_at(tcfg, 1, 3200) == pytest.approx(3e-4 / 100)
    assert lr_at(tcfg, 50, 3200) == pytest.approx(3e-4 / 2)
    assert lr_at(tcfg, 100, 3200) == pytest.approx(3e-4)


def test_lr_decays_to_floor():
    tcfg = TrainConfig(lr=3e-4, warmup_steps=100, min_lr_frac=0.1)
    total = 3200
    mid = 100 + (total - 100) // 2
    assert lr_at(tcfg, mid, total) == pytest.approx(
        3e-4 * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * 0.5))), rel=1e-3)
    assert lr_at(tcfg, total, total) == pytest.approx(3e-5)
    # past the horizon the rate pins at the floor rather than rebounding
    assert lr_at(tcfg, total + 500, total) == pytest.approx(3e-5)


def test_lr_monotone_after_warmup():
    tcfg = TrainConfig(lr=3e-4, warmup_steps=100)
    vals = [lr_at(tcfg, t, 3200) for t in range(100, 3201, 50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# --------------------------------------------------------------- optimizer

def test_adam_first_step_is_signed_lr():
    params = {"w": np.array([1.0, -2.0, 0.5], dtype=np.float32)}
    grads = {"w": np.array([0.3, -0.7, 2.0], dtype=np.float32)}
    state = AdamState.fresh(params)
    tcfg = TrainConfig(lr=1e-2, adam_eps=1e-12)
    adam_step(params, grads, state, tcfg)
    # bias correction makes the first update lr * sign(g)
    expect = np.array([1.0, -2.0, 0.5]) - 1e-2 * np.sign([0.3, -0.7, 2.0])
    assert np.allclose(params["w"], expect, atol=1e-6)
    assert state.t == 1


def test_adam_skips_params_without_grads():
    params = {"w": np.ones(3, dtype=np.float32),
              "frozen": np.ones(3, dtype=np.float32)}
    state = AdamState.fresh(params)
    adam_step(params, {"w": np.ones(3, dtype=np.float32)}, state,
              TrainConfig(lr=1e-2))
    assert (params["frozen"] == 1.0).all()
    assert not (params["w"] == 1.0).all()


def test_adam_zero_lr_is_noop_for_params():
    params = {"w": np.ones(4, dtype=np.float32)}
    state = AdamState.fresh(params)
    adam_step(params, {"w": np.full(4, 0.5, dtype=np.float32)}, state,
              TrainConfig(), lr=0.0)
    assert (params["w"] == 1.0).all()
    assert state.t == 1  # the clock still advances


def test_ema_tracks_params():
    ema = {"w": np.zeros(3, dtype=np.float32)}
    params = {"w": np.ones(3, dtype=np.float32)}
    ema_update(ema, params, decay=0.0)
    assert (ema["w"] == 1.0).all()
    ema = {"w": np.zeros(3, dtype=np.float32)}
    for _ in range(5000):
        ema_update(ema, params, decay=0.999)
    assert np.allclose(ema["w"], 1.0, atol=2e-2)


# -------------------------------------------------------------------- loss

def test_decomposed_batch_has_no_image_term():
    records = demo_records(3, seed=21)
    _, batch = make_step_batch(records, "s", 0, (Mode.REFLECT_THINK,),
                               tiny_tcfg(), TINY)
    params = init_params(TINY, 0)
    total, loss_text, loss_image = batch_loss(as_tensors(params), batch,
                                              TINY, 1.0)
    assert loss_image == 0.0
    assert loss_text > 0.0
    assert total.item() == pytest.approx(loss_text, rel=1e-5)


def test_full_batch_mixes_both_terms():
    records = demo_records(3, seed=21)
    _, batch = make_step_batch(records, "s", 0, (Mode.IMPROVE_FULL,),
                               tiny_tcfg(), TINY)
    params = init_params(TINY, 0)
    lam = 0.7
    total, loss_text, loss_image = batch_loss(as_tensors(params), batch,
                                              TINY, lam)
    assert loss_text > 0.0 and loss_image > 0.0
    assert total.item() == pytest.approx(loss_text + lam * loss_image,
                                         rel=1e-4)


def test_unsupervised_batch_rejected():
    records = demo_records(2, seed=21)
    _, batch = make_step_batch(records, "s", 0, (Mode.INITIAL_THINK,),
                               tiny_tcfg(), TINY)
    empty = dataclasses.replace(batch, txt_pos=np.array([], dtype=np.int64),
                                img_pos=np.array([], dtype=np.int64))
    with pytest.raises(ValueError):
        batch_loss(as_tensors(init_params(TINY, 0)), empty, TINY, 1.0)


# ------------------------------------------------------- batch construction

def test_step_batches_are_deterministic_and_distinct():
    records = demo_records(6, seed=23)
    tcfg = tiny_tcfg()
    m1, b1 = make_step_batch(records, "full", 7, STAGE2_MODES, tcfg, TINY)
    m2, b2 = make_step_batch(records, "full", 7, STAGE2_MODES, tcfg, TINY)
    assert m1 is m2
    assert (b1.token_ids == b2.token_ids).all()
    assert (b1.lat == b2.lat).all()
    assert (b1.img_targets == b2.img_targets).all()
    _, b3 = make_step_batch(records, "full", 8, STAGE2_MODES, tcfg, TINY)
    assert (b1.token_ids.shape != b3.token_ids.shape
            or not (b1.token_ids == b3.token_ids).all())


def test_full_step_batch_carries_noise_targets():
    records = demo_records(4, seed=23)
    tcfg = tiny_tcfg(batch_size=3)
    _, batch = make_step_batch(records, "full", 0, (Mode.IMPROVE_FULL,),
                               tcfg, TINY)
    assert batch.img_targets.shape == (3 * TINY.n_image_rows, TINY.row_dim)
    assert np.isfinite(batch.img_targets).all()
    # noised rows carry a time code; everything else stays at zero
    nonzero = np.abs(batch.time_vec).sum(axis=2) > 0
    assert nonzero.sum(axis=1).tolist() == [TINY.n_image_rows] * 3


def test_mode_draw_is_roughly_uniform():
    counts = {mode: 0 for mode in STAGE1_MODES}
    for step in range(1200):
        g = stream(0, "freq", step)
        counts[_draw_mode(STAGE1_MODES, None, g)] += 1
    for mode, n in counts.items():
        assert abs(n - 200) < 45, (mode, n)


def test_mode_weights_bias_the_draw():
    weights = {Mode.INITIAL_FULL.value: 5.0}
    hits = 0
    for step in range(1000):
        g = stream(0, "wfreq", step)
        hits += _draw_mode(STAGE2_MODES, weights, g) is Mode.INITIAL_FULL
    assert hits > 700  # expectation 5/6
    with pytest.raises(ValueError):
        _draw_mode(STAGE2_MODES, {m.value: 0.0 for m in STAGE2_MODES},
                   stream(0, "wfreq", -1))


def test_ablation_rates_follow_dropout():
    p = 0.2
    seen = {frozenset(): 0, frozenset({"think1"}): 0,
            frozenset({"prompt", "think1"}): 0}
    for i in range(2000):
        seen[_draw_ablation(Mode.INITIAL_FULL, stream(1, "abl", i), p)] += 1
    assert abs(seen[frozenset({"prompt", "think1"})] - 400) < 80
    assert abs(seen[frozenset({"think1"})] - 400) < 80
    for i in range(200):
        assert _draw_ablation(Mode.REFLECT_THINK, stream(1, "abl2", i),
                              p) == frozenset()


def test_mode_pools_accepts_both_shapes():
    records = demo_records(2, seed=29)
    shared = as_mode_pools(records)
    assert set(shared) == set(Mode)
    assert all(pool is records for pool in shared.values())
    explicit = as_mode_pools({Mode.INITIAL_THINK: records})
    assert set(explicit) == {Mode.INITIAL_THINK}


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    params = init_params(TINY, 5)
    adam = AdamState.fresh(params)
    adam.t = 17
    g = {k: np.full_like(v, 0.01) for k, v in params.items()}
    adam_step(params, g, adam, TrainConfig(lr=1e-3))
    ema = {k: v * 0.5 for k, v in params.items()}
    path = tmp_path / "model.irgc"
    save_checkpoint(path, params, adam, TINY, ema,
                    stage_index=1, next_step=0)
    p2, a2, e2, meta = load_checkpoint(path)
    assert set(p2) == set(params)
    for k in params:
        assert (p2[k] == params[k]).all()
        assert (a2.m[k] == adam.m[k]).all()
        assert (a2.v[k] == adam.v[k]).all()
        assert (e2[k] == ema[k]).all()
    assert a2.t == 18
    assert meta["stage_index"] == 1 and meta["next_step"] == 0
    assert model_config_from_meta(meta) == TINY


# ------------------------------------------------------------ two-stage loop

def test_training_touches_both_stages_and_logs():
    records = demo_records(5, seed=31)
    result = train(records, tiny_tcfg(), TINY)
    stages = [row["stage"] for row in result.trace]
    assert stages == ["decomposed"] * 3 + ["full"] * 3
    assert result.adam.t == 6
    assert [row["step"] for row in result.trace] == [1, 2, 3, 4, 5, 6]
    full_modes = {row["mode"] for row in result.trace if row["stage"] == "full"}
    assert full_modes <= {m.value for m in STAGE2_MODES}
    assert all(np.isfinite(row["loss_text"]) for row in result.trace)


def test_training_requires_every_pool():
    records = demo_records(2, seed=31)
    with pytest.raises(ValueError, match="no records"):
        train({Mode.INITIAL_THINK: records}, tiny_tcfg(), TINY)


def test_split_run_matches_single_run(tmp_path):
    records = demo_records(5, seed=37)
    tcfg = tiny_tcfg()
    whole = train(records, tcfg, TINY)

    first = train(records, tcfg, TINY, stop_after_stage=0)
    assert first.adam.t == tcfg.stage1_steps
    path = tmp_path / "half.irgc"
    save_checkpoint(path, first.params, first.adam, TINY, first.ema,
                    stage_index=1, next_step=0)
    second = train(records, tcfg, TINY, resume=path)

    assert second.adam.t == whole.adam.t
    for k in whole.params:
        assert (second.params[k] == whole.params[k]).all(), k
        assert (second.ema[k] == whole.ema[k]).all(), k


def test_training_reduces_decomposed_loss():
    records = demo_records(6, seed=41)
    tcfg = tiny_tcfg(stage1_steps=40, stage2_steps=0, warmup_steps=4,
                     lr=3e-3, batch_size=2)
    result = train(records, tcfg, TINY, stop_after_stage=0)
    first = np.mean([r["loss_text"] for r in result.trace[:5]])
    last = np.mean([r["loss_text"] for r in result.trace[-5:]])
    assert last < first * 0.9


def test_trace_csv_round_trip(tmp_path):
    trace = [{"step": 1, "stage": "decomposed", "mode": "initial-think",
              "loss_text": 4.5, "loss_image": 0.0},
             {"step": 2, "stage": "full", "mode": "improve-full",
              "loss_text": 4.4, "loss_image": 1.2}]
    path = tmp_path / "trace.csv"
    write_trace(path, trace)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["mode"] for r in rows] == ["initial-think", "improve-full"]
    assert float(rows[1]["loss_image"]) == 1.2
