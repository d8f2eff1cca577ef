"""Transformer forward pass: causality, conditioning, and gradients."""

from __future__ import annotations

import numpy as np
import pytest

from irg.modes import Mode, assemble, pack_batch
from irg.neural import tape
from irg.neural.model import (ModelConfig, as_tensors, causal_mask, embed,
                              forward, init_params, text_head, time_embedding,
                              velocity_head)
from irg.rng import stream
from irg.training import TrainConfig, batch_loss, make_step_batch

from _util import central_diff_check, demo_records

TINY = ModelConfig(d_model=24, n_layers=2, n_heads=2)


def tiny_batch(mode=Mode.IMPROVE_FULL, seed: int = 3):
    records = demo_records(2, seed=88)
    tcfg = TrainConfig(seed=seed, batch_size=2, cond_dropout=0.0)
    _, batch = make_step_batch({m: records for m in Mode}, "s", 0,
                               (mode,), tcfg, TINY)
    return batch


def test_init_params_deterministic_and_complete():
    a = init_params(TINY, 0)
    b = init_params(TINY, 0)
    c = init_params(TINY, 1)
    assert sorted(a) == sorted(b) == sorted(c)
    assert all((a[k] == b[k]).all() for k in a)
    assert any(not (a[k] == c[k]).all() for k in a)
    for name in ("w_sem", "b_sem", "vit_row", "vit_col", "w_time",
                 "grid_emb", "tok_emb"):
        assert name in a, name
    assert all(v.dtype == np.float32 for v in a.values())


def test_time_embedding_shapes_and_variation():
    for t in (0.0, 0.25, 1.0):
        vec = time_embedding(t, 24)
        assert vec.shape == (24,)
    assert not np.allclose(time_embedding(0.1, 24), time_embedding(0.9, 24))


def test_causal_mask_blocks_future():
    mask = causal_mask([4, 3], [None, None], 0, 4)
    assert mask.shape == (2, 1, 4, 4)
    m = mask[0, 0]
    assert (m[np.triu_indices(4, k=1)] < -1e8).all()
    assert (np.tril(m) == 0).all()
    # padded tail of the second sample is unreachable from real positions
    assert (mask[1, 0, :3, 3] < -1e8).all()


def test_causal_mask_frees_target_block():
    mask = causal_mask([6], [2], 3, 6)[0, 0]
    block = mask[2:5, 2:5]
    assert (block == 0).all()
    assert mask[1, 2] < -1e8  # outside the block still causal


def test_forward_shapes_and_determinism():
    batch = tiny_batch()
    params = init_params(TINY, 0)
    h1 = forward(as_tensors(params), batch, TINY).data
    h2 = forward(as_tensors(params), batch, TINY).data
    b, seq_len = batch.token_ids.shape
    assert h1.shape == (b, seq_len, TINY.d_model)
    assert (h1 == h2).all()


def test_heads_shapes():
    batch = tiny_batch()
    params = init_params(TINY, 0)
    tensors = as_tensors(params)
    hidden = forward(tensors, batch, TINY)
    b, seq_len = batch.token_ids.shape
    flat = tape.reshape(hidden, (b * seq_len, TINY.d_model))
    logits = text_head(tensors, flat)
    vel = velocity_head(tensors, flat)
    assert logits.data.shape == (b * seq_len, TINY.vocab_size)
    assert vel.data.shape == (b * seq_len, TINY.row_dim)


def test_text_positions_ignore_future_rows():
    # Hidden states at early positions must not move when a later token
    # changes; the image-target block is exempt inside itself by design.
    batch = tiny_batch(mode=Mode.INITIAL_THINK)
    params = init_params(TINY, 0)
    base = forward(as_tensors(params), batch, TINY).data
    cut = 5
    batch.token_ids[0, cut + 1] = (batch.token_ids[0, cut + 1] + 1) % TINY.vocab_size
    moved = forward(as_tensors(params), batch, TINY).data
    assert np.allclose(base[0, :cut + 1], moved[0, :cut + 1], atol=1e-7)
    assert not np.allclose(base[0, cut + 1:], moved[0, cut + 1:], atol=1e-7)


def test_samples_in_batch_are_independent():
    batch = tiny_batch()
    params = init_params(TINY, 0)
    base = forward(as_tensors(params), batch, TINY).data
    batch.token_ids[1] = (batch.token_ids[1] + 1) % TINY.vocab_size
    moved = forward(as_tensors(params), batch, TINY).data
    assert np.allclose(base[0], moved[0], atol=1e-7)


def test_time_vector_feeds_target_rows():
    batch = tiny_batch()
    params = init_params(TINY, 0)
    base = forward(as_tensors(params), batch, TINY).data
    batch.time_vec = batch.time_vec + np.float32(0.5)
    moved = forward(as_tensors(params), batch, TINY).data
    assert not np.allclose(base, moved, atol=1e-6)


def test_conditioning_masks_gate_embeddings():
    batch = tiny_batch()
    params = init_params(TINY, 0)
    tensors = as_tensors(params)
    base = embed(tensors, batch, TINY).data
    # zeroing masked-out channels never changes the embedding
    batch.sem = batch.sem * batch.sem_mask[..., None]
    batch.lat = batch.lat * batch.lat_mask[..., None]
    gated = embed(as_tensors(params), batch, TINY).data
    assert np.allclose(base, gated, atol=1e-7)


def test_gradients_flow_to_all_parameters():
    batch = tiny_batch()
    params = init_params(TINY, 0)
    tensors = as_tensors(params)
    loss, loss_text, loss_image = batch_loss(tensors, batch, TINY, 1.0)
    assert loss_text > 0 and loss_image > 0
    tape.backward(loss)
    missing = [k for k, t in tensors.items()
               if t.grad is None or not np.isfinite(t.grad).all()
               or float(np.abs(t.grad).sum()) == 0.0]
    assert missing == [], missing


def test_tiny_gradcheck_through_full_loss():
    batch = tiny_batch()
    params = {k: v.astype(np.float64) for k, v in init_params(TINY, 1).items()}

    def build(p):
        loss, _, _ = batch_loss(p, batch, TINY, 1.0)
        return loss

    central_diff_check(build, params, 40, stream(7, "model-gc"))
