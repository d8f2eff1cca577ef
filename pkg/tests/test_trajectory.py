"""Trajectory grammar, pixel sealing, and serialization."""

from __future__ import annotations

import numpy as np
import pytest

from irg.neural.encoders import featurize
from irg.neural.model import ModelConfig, init_params
from irg.rng import stream
from irg.scenelang.dsl import parse_prompt
from irg.scenelang.render import render_scene
from irg.text import VOCAB, plan_tokens, question_tokens, tokenize_prompt
from irg.trajectory import (FeatureBundle, SealedPixelsError, Segment,
                            SegmentRole, Trajectory, TrajectoryError,
                            from_bytes, load_trajectory, raster_hash,
                            save_trajectory, to_bytes)

PROMPT = "1 red circle center size 3"


def build_two_turn(params=None) -> Trajectory:
    if params is None:
        params = init_params(ModelConfig(), 0)
    ast = parse_prompt(PROMPT)
    img1 = render_scene(ast)
    img2 = np.clip(img1 + 0.1, 0.0, 1.0).astype(np.float32)
    traj = Trajectory(PROMPT)
    traj.append(Segment(SegmentRole.PROMPT,
                        tokens=VOCAB.encode(tokenize_prompt(PROMPT))))
    traj.append(Segment(SegmentRole.INITIAL_THINKING,
                        tokens=VOCAB.encode(plan_tokens(ast))))
    traj.append(Segment(SegmentRole.INITIAL_IMAGE, raster=img1))
    traj.append(Segment(SegmentRole.ENCODED_FEATURES,
                        features=featurize(img1, params)))
    traj.append(Segment(SegmentRole.IMPROVING_THINKING,
                        tokens=VOCAB.encode(question_tokens(1))))
    traj.append(Segment(SegmentRole.IMPROVED_IMAGE, raster=img2))
    return traj


def test_grammar_rejects_out_of_order():
    traj = Trajectory(PROMPT)
    with pytest.raises(TrajectoryError):
        traj.append(Segment(SegmentRole.INITIAL_IMAGE,
                            raster=np.zeros((24, 24, 3), dtype=np.float32)))


def test_text_segment_needs_tokens():
    traj = Trajectory(PROMPT)
    with pytest.raises(TrajectoryError):
        traj.append(Segment(SegmentRole.PROMPT))


def test_thinking_is_optional_before_first_image():
    traj = Trajectory(PROMPT)
    traj.append(Segment(SegmentRole.PROMPT,
                        tokens=VOCAB.encode(tokenize_prompt(PROMPT))))
    traj.append(Segment(SegmentRole.INITIAL_IMAGE,
                        raster=render_scene(parse_prompt(PROMPT))))
    assert traj.complete


def test_encoding_seals_previous_image():
    traj = build_two_turn()
    first_image = traj.segments[2]
    assert first_image.sealed
    assert first_image.raster is None
    assert first_image.pixel_hash is not None
    with pytest.raises(SealedPixelsError):
        _ = first_image.image
    # final image is still open
    assert traj.final_image is traj.segments[-1].raster


def test_feature_hash_must_match_preceding_image():
    params = init_params(ModelConfig(), 0)
    ast = parse_prompt(PROMPT)
    img = render_scene(ast)
    other = np.clip(img + 0.2, 0.0, 1.0).astype(np.float32)
    traj = Trajectory(PROMPT)
    traj.append(Segment(SegmentRole.PROMPT,
                        tokens=VOCAB.encode(tokenize_prompt(PROMPT))))
    traj.append(Segment(SegmentRole.INITIAL_IMAGE, raster=img))
    with pytest.raises(TrajectoryError):
        traj.append(Segment(SegmentRole.ENCODED_FEATURES,
                            features=featurize(other, params)))


def test_tombstone_hash_matches_pixels():
    params = init_params(ModelConfig(), 0)
    ast = parse_prompt(PROMPT)
    img = render_scene(ast)
    traj = Trajectory(PROMPT)
    traj.append(Segment(SegmentRole.PROMPT,
                        tokens=VOCAB.encode(tokenize_prompt(PROMPT))))
    traj.append(Segment(SegmentRole.INITIAL_IMAGE, raster=img))
    traj.append(Segment(SegmentRole.ENCODED_FEATURES,
                        features=featurize(img, params)))
    assert traj.segments[1].pixel_hash == raster_hash(img)
    assert traj.segments[2].features.source_hash == raster_hash(img)


def test_raster_hash_distinguishes_images():
    a = np.zeros((24, 24, 3), dtype=np.float32)
    b = a.copy()
    b[0, 0, 0] = 1.0
    assert raster_hash(a) != raster_hash(b)
    assert raster_hash(a) == raster_hash(a.copy())
    assert len(raster_hash(a)) == 16


def test_serialization_round_trip():
    traj = build_two_turn()
    again = from_bytes(to_bytes(traj))
    assert again == traj
    assert again.segments[2].sealed
    assert (again.final_image == traj.final_image).all()


def test_serialization_file_round_trip(tmp_path):
    traj = build_two_turn()
    path = tmp_path / "traj.bin"
    save_trajectory(traj, path)
    assert load_trajectory(path) == traj


def test_serialized_bytes_are_stable():
    traj = build_two_turn()
    assert to_bytes(traj) == to_bytes(build_two_turn())


def test_from_bytes_rejects_corruption():
    blob = bytearray(to_bytes(build_two_turn()))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(Exception):
        from_bytes(bytes(blob))


def test_images_generated_counts_turns():
    traj = build_two_turn()
    assert traj.images_generated() == 2
    assert traj.complete
