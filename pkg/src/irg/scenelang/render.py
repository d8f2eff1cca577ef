"""Deterministic rasterizer for scene ASTs, plus the degradation operator.

Shapes are drawn at 2x supersampling and box-downsampled, so edges carry
one-pixel anti-aliasing ramps.  ``degrade`` is the only randomized routine
and draws everything from the generator it is handed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..rng import stream
from .dsl import COLOR_RGB, GRID, SceneAst

SUPERSAMPLE = 2


def _object_mask(yy: np.ndarray, xx: np.ndarray, shape: str, row: int,
                 col: int, size: int) -> np.ndarray:
    """Boolean coverage mask on the fine grid; coords are in cell units."""
    cy, cx = row + 0.5, col + 0.5
    r = size + 0.5
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    # upward triangle: apex top-center, base along the bottom of the box
    apex = (cy - r, cx)
    left = (cy + r, cx - r)
    right = (cy + r, cx + r)

    def _half(p, q):
        return (q[1] - p[1]) * (yy - p[0]) - (q[0] - p[0]) * (xx - p[1]) >= 0

    return _half(apex, right) & _half(right, left) & _half(left, apex)


def render_scene(ast: SceneAst, grid: int = GRID) -> np.ndarray:
    """Render to a float32 (grid, grid, 3) image with values in [0, 1]."""
    s = SUPERSAMPLE
    fine = grid * s
    centers = np.arange(fine, dtype=np.float64) / s + 0.5 / s
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    img = np.empty((fine, fine, 3), dtype=np.float64)
    img[:] = COLOR_RGB[ast.background]
    for clause in ast.clauses:
        color = COLOR_RGB[clause.color]
        for row, col in clause.object_centers():
            mask = _object_mask(yy, xx, clause.shape, row, col, clause.size)
            img[mask] = color
    coarse = img.reshape(grid, s, grid, s, 3).mean(axis=(1, 3))
    return coarse.astype(np.float32)


@dataclass(frozen=True)
class DegradeParams:
    """Knobs for the controlled corruption applied to first-draft images."""

    noise_sigma: float = 0.15
    blur_radius: int = 1
    jitter: int = 1
    color_shift_prob: float = 0.1


def box_blur(img: np.ndarray, radius: int = 1) -> np.ndarray:
    """Box filter of the given radius with edge replication; radius 0 is a no-op."""
    if radius <= 0:
        return img.astype(np.float32)
    k = 2 * radius + 1
    pad = [(radius, radius), (radius, radius)] + [(0, 0)] * (img.ndim - 2)
    padded = np.pad(img.astype(np.float64), pad, mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    for dy in range(k):
        for dx in range(k):
            acc += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return (acc / (k * k)).astype(np.float32)


def degrade(img: np.ndarray, params: DegradeParams,
            rng: np.random.Generator) -> np.ndarray:
    """Corrupt an image into a plausible first draft.

    Applies, in order: an occasional cyclic shift of the color channels, a
    small spatial jitter, a box blur, and additive Gaussian noise.  All-zero
    params return the input unchanged (draws still happen, so the stream
    layout never depends on the knob values).
    """
    out = img
    shift_u = rng.random()
    shift_k = int(rng.integers(1, 3))
    if shift_u < params.color_shift_prob:
        out = np.roll(out, shift_k, axis=2)
    j = params.jitter
    dy, dx = (int(v) for v in rng.integers(-j, j + 1, size=2))
    if dy or dx:
        out = np.roll(out, (dy, dx), axis=(0, 1))
    out = box_blur(out, params.blur_radius)
    if params.noise_sigma > 0.0:
        out = out + params.noise_sigma * rng.standard_normal(out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_degraded(ast: SceneAst, params: DegradeParams, seed: int,
                    *labels: object) -> np.ndarray:
    """Render a scene and corrupt it with a stream keyed by seed and labels."""
    return degrade(render_scene(ast), params, stream(seed, *labels))


def quantize_colors(img: np.ndarray) -> np.ndarray:
    """Snap values to the 8-bit grid a PPM round trip would impose."""
    levels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return levels.astype(np.float32) / 255.0


def ppm_bytes(img: np.ndarray) -> bytes:
    """Encode a [0, 1] float image as binary PPM (P6, maxval 255)."""
    h, w = img.shape[:2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(ppm_bytes(img))


def ppm_from_bytes(raw: bytes) -> np.ndarray:
    """Decode a binary PPM to float32 in [0, 1]; tolerates header comments."""
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        fields.append(raw[i:j])
        i = j
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM: {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    i += 1  # single whitespace byte after the header
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=i)
    return (data.reshape(h, w, 3).astype(np.float32)) / float(maxval)


def read_ppm(path: str | Path) -> np.ndarray:
    return ppm_from_bytes(Path(path).read_bytes())
