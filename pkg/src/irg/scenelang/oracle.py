"""Programmatic image quality oracle.

Two measurements ground everything: a per-clause semantic check against the
deterministic reference render, and a sharpness-minus-noise fidelity score.
A composite judge combines them and settles exact ties with a seeded coin,
so self-comparisons come out at chance rather than biased to one side.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..rng import stream
from .dsl import COLOR_RGB, COLORS, Clause, SceneAst
from .render import box_blur, render_scene

MAE_THRESHOLD = 0.25
EDGE_THRESHOLD = 0.05
NOISE_WEIGHT = 4.0
SEMANTIC_WEIGHT = 0.7
FIDELITY_WEIGHT = 0.3


@lru_cache(maxsize=512)
def _reference(ast: SceneAst, grid: int) -> np.ndarray:
    img = render_scene(ast, grid)
    img.setflags(write=False)
    return img


@lru_cache(maxsize=2048)
def _clause_mask(clause: Clause, background: str, grid: int) -> np.ndarray:
    """Pixels the clause's objects cover in isolation (including AA fringe)."""
    lone = SceneAst(clauses=(clause,), background=background)
    img = render_scene(lone, grid)
    bg = np.array(COLOR_RGB[background], dtype=np.float32)
    mask = np.linalg.norm(img - bg, axis=-1) > 0.3
    mask.setflags(write=False)
    return mask


def _clause_box(clause: Clause, grid: int) -> tuple[int, int, int, int]:
    r0, c0, r1, c1 = clause.bounding_box()
    return (max(r0 - 1, 0), max(c0 - 1, 0),
            min(r1 + 1, grid - 1), min(c1 + 1, grid - 1))


def _luminance(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=-1)


def _edge_mask(ref: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(_luminance(ref))
    return np.hypot(gy, gx) > EDGE_THRESHOLD


@dataclass(frozen=True)
class SceneReport:
    """Everything the oracle can say about one image of one scene."""

    clause_ok: tuple[bool, ...]
    clause_mae: tuple[float, ...]
    hue_ok: tuple[bool, ...]
    semantic: float
    fidelity: float
    sharpness_ratio: float  # edge sharpness relative to the clean render
    noise: float


def _noise_level(img: np.ndarray, smooth: np.ndarray,
                 edges: np.ndarray) -> float:
    """High-frequency energy away from the reference's edges.

    Restricting to flat regions keeps legitimate crisp edges from being
    billed as noise, which would reward blurring busy scenes.
    """
    residual = (img.astype(np.float64) - smooth) ** 2
    flat = ~edges
    return float(residual[flat].mean() if flat.any() else residual.mean())


def fidelity_score(img: np.ndarray, ast: SceneAst, grid: int = 24) -> float:
    """Edge sharpness at the reference's edges minus a flat-region noise term.

    Gradients are taken on the smoothed image so added noise cannot read as
    sharpness.
    """
    ref = _reference(ast, grid)
    edges = _edge_mask(ref)
    smooth = box_blur(img)
    gy, gx = np.gradient(_luminance(smooth))
    sharp = float(np.hypot(gy, gx)[edges].mean()) if edges.any() else 0.0
    return sharp - NOISE_WEIGHT * _noise_level(img, smooth, edges)


def scene_report(img: np.ndarray, ast: SceneAst, grid: int = 24) -> SceneReport:
    ref = _reference(ast, grid)
    ok, maes, hues = [], [], []
    for clause in ast.clauses:
        r0, c0, r1, c1 = _clause_box(clause, grid)
        window = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        mae = float(np.abs(img[window] - ref[window]).mean())
        mask = _clause_mask(clause, ast.background, grid)
        seen = img[mask].mean(axis=0)
        dists = {c: float(np.linalg.norm(seen - COLOR_RGB[c])) for c in COLORS}
        hue = min(dists, key=dists.get) == clause.color
        maes.append(mae)
        hues.append(hue)
        ok.append(mae < MAE_THRESHOLD and hue)
    fid = fidelity_score(img, ast, grid)
    fid_clean = fidelity_score(np.asarray(ref), ast, grid)
    ratio = fid / fid_clean if fid_clean > 0 else 0.0
    noise = _noise_level(img, box_blur(img), _edge_mask(np.asarray(ref)))
    return SceneReport(
        clause_ok=tuple(ok),
        clause_mae=tuple(maes),
        hue_ok=tuple(hues),
        semantic=sum(ok) / len(ok),
        fidelity=fid,
        sharpness_ratio=ratio,
        noise=noise,
    )


def semantic_score(img: np.ndarray, ast: SceneAst, grid: int = 24) -> float:
    """Fraction of clauses rendered at the right place in the right color."""
    return scene_report(img, ast, grid).semantic


def composite_score(img: np.ndarray, ast: SceneAst, grid: int = 24) -> float:
    report = scene_report(img, ast, grid)
    fid_norm = min(max(report.sharpness_ratio, 0.0), 1.0)
    return SEMANTIC_WEIGHT * report.semantic + FIDELITY_WEIGHT * fid_norm


_CRITERIA = {
    "semantic": semantic_score,
    "fidelity": fidelity_score,
    "composite": composite_score,
}


def judge_pair(img_a: np.ndarray, img_b: np.ndarray, ast: SceneAst,
               criterion: str = "composite", seed: int = 0,
               labels: tuple = ()) -> tuple[int, bool]:
    """Return (winner index, was_tie); exact ties fall to a seeded coin."""
    score = _CRITERIA[criterion]
    a, b = score(img_a, ast), score(img_b, ast)
    if a == b:
        g = stream(seed, "judge-tie", criterion, *labels)
        return int(g.random() < 0.5), True
    return (0 if a > b else 1), False
