"""Sampling: thinking tokens, guided flow images, and the full loop.

Image sampling integrates a learned velocity field from noise to data with
explicit Euler steps.  Every step evaluates one full-context branch plus
ablated branches (no image features, no improving thinking), and combines
them as base plus scaled differences.  Zero-scaled differences are skipped
in the sum, so guidance at scale zero reproduces the base branch bit for
bit while still exercising every branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neural.encoders import (PatchSummary, featurize, group_latent,
                              pool_image, rows_to_image)
from .neural.model import ModelConfig, time_embedding
from .neural.runtime import KVCache, RowBatch, run_rows, text_logits, velocity
from .rng import stream
from .scenelang.dsl import parse_prompt
from .text import (EOT, MARK_PROMPT, MARK_QUESTION, MARK_THINK1, MARK_THINK2,
                   ROW_LAT, ROW_SEM, ROW_TARGET, VOCAB, tokenize_prompt)
from .trajectory import Segment, SegmentRole, Trajectory

_MARKERS = {
    SegmentRole.PROMPT: MARK_PROMPT,
    SegmentRole.INITIAL_THINKING: MARK_THINK1,
    SegmentRole.UNDERSTANDING_QUESTION: MARK_QUESTION,
    SegmentRole.IMPROVING_THINKING: MARK_THINK2,
}


@dataclass(frozen=True)
class InferenceConfig:
    sampler_steps: int = 20
    s_img: float = 2.0
    s_txt: float = 2.0
    s_prompt_turn1: float = 2.0
    temperature: float = 0.7
    top_p: float = 0.95
    max_think_tokens: int = 120


@dataclass
class SamplerTrace:
    """Per-step record of what the guided sampler actually computed.

    ``image`` is the decoded sample; evaluation reads it from here because
    trajectories seal intermediate pixels.
    """

    scales: tuple[float, ...] = ()
    branch_lengths: tuple[int, ...] = ()
    steps: list[dict] = field(default_factory=list)
    image: np.ndarray | None = None


def text_rows(role: SegmentRole, words: list[str] | tuple[str, ...],
              with_eot: bool = True) -> RowBatch:
    toks = [_MARKERS[role], *words] + ([EOT] if with_eot else [])
    ids = VOCAB.encode(toks)
    return RowBatch(token_ids=ids,
                    role_ids=np.full(len(ids), int(role), np.int64))


def feature_rows(summary: PatchSummary) -> RowBatch:
    means = summary.means
    grouped = group_latent(summary.latent)
    n, m = len(means), len(grouped)
    ids = VOCAB.encode([ROW_SEM] * n + [ROW_LAT] * m)
    sem = np.concatenate([means, np.zeros((m, means.shape[1]), np.float32)])
    lat = np.concatenate([np.zeros((n, grouped.shape[1]), np.float32), grouped])
    return RowBatch(
        token_ids=ids,
        role_ids=np.full(n + m, int(SegmentRole.ENCODED_FEATURES), np.int64),
        grid_ids=np.concatenate([np.arange(n), np.arange(m)]).astype(np.int64),
        grid_mask=np.array([0.0] * n + [1.0] * m, np.float32),
        sem=sem, sem_mask=np.array([1.0] * n + [0.0] * m, np.float32),
        lat=lat, lat_mask=np.array([0.0] * n + [1.0] * m, np.float32),
    )


def target_rows(x_t: np.ndarray, t: float, role: SegmentRole,
                cfg: ModelConfig) -> RowBatch:
    n = len(x_t)
    ids = VOCAB.encode([ROW_TARGET] * n)
    return RowBatch(
        token_ids=ids,
        role_ids=np.full(n, int(role), np.int64),
        grid_ids=np.arange(n, dtype=np.int64),
        grid_mask=np.ones(n, np.float32),
        lat=x_t.astype(np.float32), lat_mask=np.ones(n, np.float32),
        time_vec=np.tile(time_embedding(t, cfg.d_model), (n, 1)),
    )


def build_cache(params: dict, cfg: ModelConfig,
                segments: list[RowBatch]) -> KVCache:
    cache = KVCache()
    for rows in segments:
        run_rows(params, cfg, cache, rows)
    return cache


def generate_thinking(params: dict, cfg: ModelConfig, icfg: InferenceConfig,
                      cache: KVCache, role: SegmentRole, seed: int,
                      labels: tuple) -> list[str]:
    """Sample one text segment into the cache; returns the content tokens.

    The marker row primes the segment; sampling is nucleus-filtered and
    stops at the end marker or the length cap.  The marker, content, and
    end marker all stay in the cache as context for what follows.
    """
    eot_id = VOCAB.index[EOT]
    marker = RowBatch(token_ids=VOCAB.encode([_MARKERS[role]]),
                      role_ids=np.array([int(role)], np.int64))
    hidden = run_rows(params, cfg, cache, marker)
    out: list[str] = []
    for i in range(icfg.max_think_tokens):
        logits = text_logits(params, hidden[-1:])[0] / icfg.temperature
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        order = np.argsort(-probs, kind="stable")
        cumulative = np.cumsum(probs[order])
        cut = order[: int(np.searchsorted(cumulative, icfg.top_p)) + 1]
        p = probs[cut] / probs[cut].sum()
        g = stream(seed, *labels, "tok", i)
        tok_id = int(cut[int(g.choice(len(cut), p=p))])
        row = RowBatch(token_ids=np.array([tok_id], np.int64),
                       role_ids=np.array([int(role)], np.int64))
        hidden = run_rows(params, cfg, cache, row)
        if tok_id == eot_id:
            return out
        out.append(VOCAB.tokens[tok_id])
    # cap reached: close the segment so the cache stays well formed
    run_rows(params, cfg, cache, RowBatch(
        token_ids=np.array([eot_id], np.int64),
        role_ids=np.array([int(role)], np.int64)))
    return out


def sample_image(params: dict, cfg: ModelConfig, icfg: InferenceConfig,
                 branches: list[KVCache], scales: list[float],
                 role: SegmentRole, seed: int,
                 labels: tuple) -> tuple[np.ndarray, SamplerTrace]:
    """Integrate the guided velocity field from t=1 (noise) down to t=0.

    ``branches[0]`` is the full-context branch; the combined velocity is
    v0 plus each scale times (v0 minus that ablated branch's velocity).
    """
    if len(branches) != len(scales) + 1:
        raise ValueError("need exactly one scale per ablated branch")
    n, d = cfg.n_image_rows, cfg.row_dim
    x = stream(seed, *labels, "noise").standard_normal((n, d)).astype(np.float32)
    trace = SamplerTrace(scales=tuple(scales),
                         branch_lengths=tuple(c.length for c in branches))
    ts = np.linspace(1.0, 0.0, icfg.sampler_steps + 1)
    for i in range(icfg.sampler_steps):
        t, dt = float(ts[i]), float(ts[i] - ts[i + 1])
        rows = target_rows(x, t, role, cfg)
        vels = [velocity(params,
                         run_rows(params, cfg, c, rows, mutual=True,
                                  append=False))
                for c in branches]
        combined = vels[0].copy()
        for s, v_ablated in zip(scales, vels[1:]):
            if s != 0.0:
                combined += np.float32(s) * (vels[0] - v_ablated)
        x = x - np.float32(dt) * combined
        trace.steps.append({
            "t": t, "dt": dt,
            "branch_norms": [float(np.linalg.norm(v)) for v in vels],
            "combined_norm": float(np.linalg.norm(combined)),
        })
    return x, trace


def _empty_prompt_branch(params: dict, cfg: ModelConfig) -> KVCache:
    return build_cache(params, cfg, [text_rows(SegmentRole.PROMPT, [])])


def generate_initial_image(params: dict, cfg: ModelConfig,
                           icfg: InferenceConfig, full: KVCache, seed: int,
                           labels: tuple) -> tuple[np.ndarray, SamplerTrace]:
    """First-turn image: full context against an unconditioned branch."""
    uncond = _empty_prompt_branch(params, cfg)
    rows, trace = sample_image(params, cfg, icfg, [full, uncond],
                               [icfg.s_prompt_turn1],
                               SegmentRole.INITIAL_IMAGE, seed, labels)
    trace.image = rows_to_image(rows)
    return trace.image, trace


def run_irg(params: dict, cfg: ModelConfig, icfg: InferenceConfig,
            prompt_text: str, seed: int, labels: tuple = (),
            rounds: int = 1,
            with_thinking: bool = True) -> tuple[Trajectory, list[SamplerTrace]]:
    """Full loop: think, draw, then reflect and redraw ``rounds`` times.

    With ``with_thinking`` off, the first image is generated straight from
    the prompt and no improvement rounds run; that is the ablation baseline.
    """
    parse_prompt(prompt_text)  # reject invalid prompts before any sampling
    prompt_toks = tokenize_prompt(prompt_text)
    traj = Trajectory(prompt_text)
    traj.append(Segment(SegmentRole.PROMPT, tokens=VOCAB.encode(prompt_toks)))
    full = build_cache(params, cfg,
                       [text_rows(SegmentRole.PROMPT, prompt_toks)])
    traces: list[SamplerTrace] = []

    if with_thinking:
        think1 = generate_thinking(params, cfg, icfg, full,
                                   SegmentRole.INITIAL_THINKING, seed,
                                   (*labels, "think1"))
        traj.append(Segment(SegmentRole.INITIAL_THINKING,
                            tokens=VOCAB.encode(think1)))
    img, trace = generate_initial_image(params, cfg, icfg, full, seed,
                                        (*labels, "img1"))
    traces.append(trace)
    traj.append(Segment(SegmentRole.INITIAL_IMAGE, raster=img))
    if not with_thinking:
        return traj, traces

    think_prev = traj.segments[1].tokens  # first-turn thinking ids
    for round_idx in range(rounds):
        prev_img = traj.segments[-1].image
        bundle = featurize(prev_img, params)
        summary = pool_image(prev_img)
        traj.append(Segment(SegmentRole.ENCODED_FEATURES, features=bundle))
        feat = feature_rows(summary)
        run_rows(params, cfg, full, feat)
        think2 = generate_thinking(params, cfg, icfg, full,
                                   SegmentRole.IMPROVING_THINKING, seed,
                                   (*labels, "think2", round_idx))
        traj.append(Segment(SegmentRole.IMPROVING_THINKING,
                            tokens=VOCAB.encode(think2)))
        no_image = build_cache(params, cfg, [
            text_rows(SegmentRole.PROMPT, prompt_toks),
            text_rows(SegmentRole.INITIAL_THINKING, VOCAB.decode(think_prev)),
            text_rows(SegmentRole.IMPROVING_THINKING, think2),
        ])
        no_text = build_cache(params, cfg, [
            text_rows(SegmentRole.PROMPT, prompt_toks),
            text_rows(SegmentRole.INITIAL_THINKING, VOCAB.decode(think_prev)),
            feat,
            text_rows(SegmentRole.IMPROVING_THINKING, []),
        ])
        rows, trace = sample_image(params, cfg, icfg, [full, no_image, no_text],
                                   [icfg.s_img, icfg.s_txt],
                                   SegmentRole.IMPROVED_IMAGE, seed,
                                   (*labels, "img2", round_idx))
        trace.image = rows_to_image(rows)
        traces.append(trace)
        traj.append(Segment(SegmentRole.IMPROVED_IMAGE, raster=trace.image))
    return traj, traces
