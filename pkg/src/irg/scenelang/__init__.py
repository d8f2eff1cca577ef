"""Scene prompt language: grammar, renderer, and quality oracles."""

from .dsl import (
    COLORS,
    GRID,
    REGIONS,
    SHAPES,
    Clause,
    ParseError,
    SceneAst,
    ast_hash,
    is_held_out,
    parse_prompt,
    pretty_print,
    random_ast,
    region_coords,
    variant_ast,
)
from .oracle import (
    SceneReport,
    composite_score,
    fidelity_score,
    judge_pair,
    scene_report,
    semantic_score,
)
from .render import (DegradeParams, box_blur, degrade, ppm_bytes, ppm_from_bytes,
                     quantize_colors, read_ppm, render_degraded, render_scene, write_ppm)

__all__ = [
    "COLORS", "GRID", "REGIONS", "SHAPES", "Clause", "ParseError", "SceneAst",
    "ast_hash", "is_held_out", "parse_prompt", "pretty_print", "random_ast",
    "region_coords", "variant_ast", "SceneReport", "composite_score",
    "fidelity_score", "judge_pair", "scene_report", "semantic_score",
    "DegradeParams", "box_blur", "degrade", "ppm_bytes", "ppm_from_bytes",
    "quantize_colors", "read_ppm", "render_degraded", "render_scene", "write_ppm",
]
