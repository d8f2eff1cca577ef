"""Image encoders: lossless latents, patch pooling, and semantic features."""

from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from irg.neural.encoders import (D_Z, GROUP, P_VAE, P_VIT, ROW_DIM,
                                 featurize, group_latent, patch_means,
                                 pool_image, rows_to_image, ungroup_latent,
                                 vae_decode, vae_encode, vit_featurize)
from irg.neural.model import ModelConfig, init_params
from irg.rng import stream
from irg.scenelang.dsl import random_ast
from irg.scenelang.render import render_scene
from irg.trajectory import raster_hash


def image(i: int) -> np.ndarray:
    return render_scene(random_ast(stream(61, "enc", i)))


def test_vae_round_trip_lossless():
    for i in range(10):
        img = image(i)
        latent = vae_encode(img)
        assert latent.shape == ((24 // P_VAE) ** 2, D_Z)
        assert (vae_decode(latent) == img).all()


def test_group_ungroup_inverse():
    latent = vae_encode(image(0))
    rows = group_latent(latent)
    assert rows.shape == ((24 // (P_VAE * GROUP)) ** 2, ROW_DIM)
    assert (ungroup_latent(rows) == latent).all()


def test_rows_to_image_inverts_full_chain():
    img = image(1)
    assert (rows_to_image(group_latent(vae_encode(img))) == img).all()


def test_patch_means_match_direct_average():
    img = image(2)
    means = patch_means(img)
    n = 24 // P_VIT
    assert means.shape == (n * n, 3)
    manual = img[:P_VIT, :P_VIT].reshape(-1, 3).mean(axis=0)
    assert np.allclose(means[0], manual)
    manual_last = img[-P_VIT:, -P_VIT:].reshape(-1, 3).mean(axis=0)
    assert np.allclose(means[-1], manual_last)


def test_pool_image_bundles_consistently():
    img = image(3)
    summary = pool_image(img)
    assert (summary.means == patch_means(img)).all()
    assert (summary.latent == vae_encode(img)).all()
    assert summary.source_hash == raster_hash(img)


def test_vit_featurize_formula():
    img = image(4)
    params = init_params(ModelConfig(), 0)
    feats = vit_featurize(img, params)
    n = 24 // P_VIT
    assert feats.shape == (n * n, params["w_sem"].shape[1])
    means = patch_means(img)
    idx = 7
    manual = (means[idx] @ params["w_sem"] + params["b_sem"]
              + params["vit_row"][idx // n] + params["vit_col"][idx % n])
    assert np.allclose(feats[idx], manual, atol=1e-6)
    assert feats.dtype == np.float32


def test_vit_featurize_zero_weights_leaves_position_code():
    img = image(5)
    params = init_params(ModelConfig(), 0)
    zeroed = dict(params)
    zeroed["w_sem"] = np.zeros_like(params["w_sem"])
    zeroed["b_sem"] = np.zeros_like(params["b_sem"])
    feats = vit_featurize(img, zeroed)
    n = 24 // P_VIT
    expect = params["vit_row"][3 // n] + params["vit_col"][3 % n]
    assert np.allclose(feats[3], expect)
    # position code alone distinguishes every patch
    assert len({feats[i].tobytes() for i in range(n * n)}) == n * n


def test_featurize_builds_matching_bundle():
    img = image(6)
    params = init_params(ModelConfig(), 0)
    bundle = featurize(img, params)
    assert (bundle.semantic == vit_featurize(img, params)).all()
    assert (bundle.latent == vae_encode(img)).all()
    assert bundle.source_hash == raster_hash(img)


@given(idx=st.integers(0, 40))
@settings(max_examples=25, deadline=None)
def test_latent_chain_lossless_property(idx):
    img = image(idx)
    assert (rows_to_image(group_latent(vae_encode(img))) == img).all()
