"""Guided sampling: branch combination, text sampling, and the full loop."""

from __future__ import annotations

import numpy as np
import pytest

from irg.inference import (InferenceConfig, build_cache, feature_rows,
                           generate_thinking, run_irg, sample_image,
                           target_rows, text_rows)
from irg.neural.encoders import pool_image
from irg.neural.model import ModelConfig, init_params
from irg.neural.runtime import KVCache
from irg.scenelang.dsl import ParseError
from irg.scenelang.render import render_scene
from irg.scenelang.dsl import parse_prompt
from irg.text import EOT, MARK_THINK1, VOCAB
from irg.trajectory import (SealedPixelsError, SegmentRole, load_trajectory,
                            to_bytes,
                            save_trajectory)

TINY = ModelConfig(d_model=24, n_layers=2, n_heads=2)
PARAMS = init_params(TINY, 11)
FAST = InferenceConfig(sampler_steps=6, max_think_tokens=16)
PROMPT = "2 red squares top-left size 2"


def prompt_cache():
    return build_cache(PARAMS, TINY, [
        text_rows(SegmentRole.PROMPT, ["2", "red", "square"])])


# ------------------------------------------------------------ row builders

def test_text_rows_bracket_content():
    rows = text_rows(SegmentRole.INITIAL_THINKING, ["red", "square"])
    toks = VOCAB.decode(rows.token_ids)
    assert toks[0] == MARK_THINK1 and toks[-1] == EOT
    assert toks[1:-1] == ["red", "square"]
    assert (rows.role_ids == int(SegmentRole.INITIAL_THINKING)).all()


def test_feature_rows_split_semantic_and_latent():
    img = render_scene(parse_prompt(PROMPT))
    rows = feature_rows(pool_image(img))
    n_sem = TINY.sem_side ** 2
    n_lat = TINY.n_image_rows
    assert len(rows) == n_sem + n_lat
    assert rows.sem_mask.sum() == n_sem and rows.lat_mask.sum() == n_lat
    # masks are disjoint: every row is either a patch-color or a latent row
    assert (rows.sem_mask * rows.lat_mask == 0.0).all()
    assert (rows.grid_mask == rows.lat_mask).all()


def test_target_rows_carry_time_and_latents():
    x = np.zeros((TINY.n_image_rows, TINY.row_dim), np.float32)
    rows = target_rows(x, 0.5, SegmentRole.IMPROVED_IMAGE, TINY)
    assert len(rows) == TINY.n_image_rows
    assert (rows.lat_mask == 1.0).all()
    assert rows.time_vec.shape == (TINY.n_image_rows, TINY.d_model)
    assert not np.allclose(rows.time_vec, 0.0)


# ------------------------------------------------------------ text sampling

def test_thinking_tokens_stay_in_cache():
    cache = prompt_cache()
    start = cache.length
    out = generate_thinking(PARAMS, TINY, FAST, cache,
                            SegmentRole.INITIAL_THINKING, 0, ("t",))
    assert len(out) <= FAST.max_think_tokens
    assert all(tok in VOCAB.index for tok in out)
    assert EOT not in out
    # marker + content + closing end marker all joined the prefix
    assert cache.length == start + len(out) + 2


def test_thinking_is_deterministic_per_seed():
    a = generate_thinking(PARAMS, TINY, FAST, prompt_cache(),
                          SegmentRole.INITIAL_THINKING, 7, ("t",))
    b = generate_thinking(PARAMS, TINY, FAST, prompt_cache(),
                          SegmentRole.INITIAL_THINKING, 7, ("t",))
    assert a == b
    c = generate_thinking(PARAMS, TINY, FAST, prompt_cache(),
                          SegmentRole.INITIAL_THINKING, 8, ("t",))
    assert a != c


def test_tiny_nucleus_is_greedy():
    greedy = InferenceConfig(max_think_tokens=8, top_p=1e-9)
    outs = {tuple(generate_thinking(PARAMS, TINY, greedy, prompt_cache(),
                                    SegmentRole.INITIAL_THINKING, seed, ("t",)))
            for seed in range(4)}
    assert len(outs) == 1  # seed only breaks ties the filter removed


# ----------------------------------------------------------- image sampling

def test_zero_scales_match_single_branch():
    for seed in range(3):
        full = prompt_cache()
        ablated = build_cache(PARAMS, TINY,
                              [text_rows(SegmentRole.PROMPT, [])])
        guided, _ = sample_image(PARAMS, TINY, FAST, [full, ablated, ablated],
                                 [0.0, 0.0], SegmentRole.INITIAL_IMAGE,
                                 seed, ("z",))
        plain, _ = sample_image(PARAMS, TINY, FAST, [full], [],
                                SegmentRole.INITIAL_IMAGE, seed, ("z",))
        assert guided.tobytes() == plain.tobytes()


def test_nonzero_scale_changes_the_sample():
    full = prompt_cache()
    other = build_cache(PARAMS, TINY, [text_rows(SegmentRole.PROMPT, [])])
    guided, _ = sample_image(PARAMS, TINY, FAST, [full, other], [2.0],
                             SegmentRole.INITIAL_IMAGE, 0, ("z",))
    plain, _ = sample_image(PARAMS, TINY, FAST, [full], [],
                            SegmentRole.INITIAL_IMAGE, 0, ("z",))
    assert guided.tobytes() != plain.tobytes()


def test_branch_scale_mismatch_rejected():
    with pytest.raises(ValueError):
        sample_image(PARAMS, TINY, FAST, [prompt_cache()], [2.0],
                     SegmentRole.INITIAL_IMAGE, 0, ("z",))


def test_trace_records_every_step_and_branch():
    full = prompt_cache()
    other = build_cache(PARAMS, TINY, [text_rows(SegmentRole.PROMPT, [])])
    _, trace = sample_image(PARAMS, TINY, FAST, [full, other], [2.0],
                            SegmentRole.INITIAL_IMAGE, 0, ("z",))
    assert len(trace.steps) == FAST.sampler_steps
    assert trace.branch_lengths == (full.length, other.length)
    for step in trace.steps:
        assert len(step["branch_norms"]) == 2
    assert trace.steps[0]["t"] == pytest.approx(1.0)
    assert sum(s["dt"] for s in trace.steps) == pytest.approx(1.0)


# ---------------------------------------------------------------- full loop

def test_run_produces_grammar_shaped_trajectory():
    traj, traces = run_irg(PARAMS, TINY, FAST, PROMPT, seed=1)
    roles = [seg.role for seg in traj.segments]
    assert roles == [SegmentRole.PROMPT, SegmentRole.INITIAL_THINKING,
                     SegmentRole.INITIAL_IMAGE, SegmentRole.ENCODED_FEATURES,
                     SegmentRole.IMPROVING_THINKING,
                     SegmentRole.IMPROVED_IMAGE]
    assert traj.images_generated() == 2
    assert len(traces) == 2
    for trace in traces:
        assert trace.image is not None
        assert trace.image.shape == (TINY.grid, TINY.grid, 3)


def test_intermediate_pixels_are_sealed():
    traj, traces = run_irg(PARAMS, TINY, FAST, PROMPT, seed=1)
    first = traj.segments[2]
    assert first.raster is None and first.pixel_hash is not None
    with pytest.raises(SealedPixelsError):
        _ = first.image
    final = traj.segments[-1]
    assert (final.image == traces[-1].image).all()


def test_turn_two_uses_two_guidance_branches():
    _, traces = run_irg(PARAMS, TINY, FAST, PROMPT, seed=1)
    assert len(traces[0].branch_lengths) == 2   # prompt vs unconditioned
    assert len(traces[1].branch_lengths) == 3   # full, no-image, no-text
    full_len, no_image_len, no_text_len = traces[1].branch_lengths
    n_feature_rows = TINY.sem_side ** 2 + TINY.n_image_rows
    assert full_len - no_image_len == n_feature_rows
    # the no-text branch drops only the second thinking's content tokens
    gap = full_len - no_text_len
    assert 0 <= gap <= FAST.max_think_tokens


def test_multiple_rounds_extend_the_loop():
    traj, traces = run_irg(PARAMS, TINY, FAST, PROMPT, seed=2, rounds=2)
    assert traj.images_generated() == 3
    assert len(traces) == 3
    roles = [seg.role for seg in traj.segments]
    assert roles.count(SegmentRole.ENCODED_FEATURES) == 2
    assert roles.count(SegmentRole.IMPROVING_THINKING) == 2


def test_no_thinking_baseline_is_one_shot():
    traj, traces = run_irg(PARAMS, TINY, FAST, PROMPT, seed=3,
                           with_thinking=False)
    roles = [seg.role for seg in traj.segments]
    assert roles == [SegmentRole.PROMPT, SegmentRole.INITIAL_IMAGE]
    assert len(traces) == 1
    assert traj.segments[-1].raster is not None


def test_run_is_deterministic_and_serializable(tmp_path):
    t1, traces1 = run_irg(PARAMS, TINY, FAST, PROMPT, seed=9)
    t2, traces2 = run_irg(PARAMS, TINY, FAST, PROMPT, seed=9)
    assert to_bytes(t1) == to_bytes(t2)
    assert (traces1[-1].image == traces2[-1].image).all()
    t3, _ = run_irg(PARAMS, TINY, FAST, PROMPT, seed=10)
    assert to_bytes(t1) != to_bytes(t3)
    path = tmp_path / "run.bin"
    save_trajectory(t1, path)
    assert to_bytes(load_trajectory(path)) == to_bytes(t1)


def test_invalid_prompt_rejected_before_sampling():
    with pytest.raises(ParseError):
        run_irg(PARAMS, TINY, FAST, "purple dodecahedron", seed=0)
