"""Image encoders: lossless latent rearrangement and patch summaries.

The latent space is an invertible pixel-shuffle: every 2x2 pixel block
becomes one 12-dim latent cell, so encode followed by decode is bit-exact.
For the sequence model the latent grid is packed into wider rows (3x3
cells per row) to keep sequences short; packing is a rearrangement, never
a projection, so no pixel information is lost on that path.

The semantic pathway pools the image to one mean color per 4x4 patch and
projects each pooled color to model width with a learned linear map plus
a row/column position embedding.  Training conditions on the raw pooled
colors and applies the projection inside the graph, so gradients reach
the projection weights; :func:`featurize` bakes the projection into plain
arrays when an image is sealed into a trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..trajectory import FeatureBundle, raster_hash

P_VAE = 2    # pixels per latent cell side
P_VIT = 4    # pixels per semantic patch side
GROUP = 3    # latent cells per sequence row side
D_Z = P_VAE * P_VAE * 3
ROW_DIM = GROUP * GROUP * D_Z  # content width of one latent sequence row


@dataclass(frozen=True)
class PatchSummary:
    """Parameter-free view of an image used to condition training rows.

    Holds the pooled patch colors and the lossless latent, pinned to the
    source pixels by hash.  Unlike :class:`FeatureBundle` this is not tied
    to any weights, so stored datasets stay valid across checkpoints.
    """

    means: np.ndarray   # (n_patches, 3) float32
    latent: np.ndarray  # (n_cells, d_z) float32
    source_hash: bytes


def vae_encode(img: np.ndarray) -> np.ndarray:
    """(G, G, 3) pixels to (G/2 * G/2, 12) latent cells, row-major."""
    g = img.shape[0]
    n = g // P_VAE
    cells = img.reshape(n, P_VAE, n, P_VAE, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(cells.reshape(n * n, D_Z), dtype=np.float32)


def vae_decode(latent: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`vae_encode`."""
    n = int(round(np.sqrt(latent.shape[0])))
    cells = latent.reshape(n, n, P_VAE, P_VAE, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(cells.reshape(n * P_VAE, n * P_VAE, 3),
                                dtype=np.float32)


def patch_means(img: np.ndarray) -> np.ndarray:
    """(G, G, 3) pixels to (G/4 * G/4, 3) mean colors, row-major."""
    g = img.shape[0]
    n = g // P_VIT
    pooled = img.reshape(n, P_VIT, n, P_VIT, 3).mean(axis=(1, 3))
    return np.ascontiguousarray(pooled.reshape(n * n, 3), dtype=np.float32)


def pool_image(img: np.ndarray) -> PatchSummary:
    """Summarize pixels without touching any learned weights."""
    return PatchSummary(means=patch_means(img), latent=vae_encode(img),
                        source_hash=raster_hash(img))


def group_latent(latent: np.ndarray) -> np.ndarray:
    """(144, 12) latent cells to (16, 108) sequence rows, 3x3 cells per row."""
    n = int(round(np.sqrt(latent.shape[0])))
    m = n // GROUP
    grid = latent.reshape(n, n, D_Z)
    rows = grid.reshape(m, GROUP, m, GROUP, D_Z).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(rows.reshape(m * m, ROW_DIM), dtype=np.float32)


def ungroup_latent(rows: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`group_latent`."""
    m = int(round(np.sqrt(rows.shape[0])))
    n = m * GROUP
    grid = rows.reshape(m, m, GROUP, GROUP, D_Z).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(grid.reshape(n * n, D_Z), dtype=np.float32)


def vit_featurize(img: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Project pooled patch colors to model width, one row per patch.

    Each row is ``color @ w_sem + b_sem`` plus the row/column position
    embeddings for that patch.  This is the numeric twin of the in-graph
    conditioning path, so sealed features match what the model saw.
    """
    means = patch_means(img)
    n = int(round(np.sqrt(means.shape[0])))
    proj = means @ params["w_sem"] + params["b_sem"]
    idx = np.arange(means.shape[0])
    proj = proj + params["vit_row"][idx // n] + params["vit_col"][idx % n]
    return np.ascontiguousarray(proj, dtype=np.float32)


def featurize(img: np.ndarray, params: dict[str, np.ndarray]) -> FeatureBundle:
    """Everything a later turn is allowed to see about an image."""
    return FeatureBundle(semantic=vit_featurize(img, params),
                         latent=vae_encode(img),
                         source_hash=raster_hash(img))


def rows_to_image(rows: np.ndarray) -> np.ndarray:
    """Sequence-row latents straight back to pixels, clipped to [0, 1]."""
    return np.clip(vae_decode(ungroup_latent(rows)), 0.0, 1.0)
