"""Assembly of training samples for the six decomposed learning tasks.

Each task lays out one sequence of rows (text tokens, encoded-feature rows,
and noisy target-image rows) plus exact supervision masks: which positions
pay next-token loss and which rows pay velocity loss.  Ablated assemblies
rebuild the same layout with one conditioning segment emptied or removed;
they double as the classifier-free-guidance branch layouts at inference.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .neural.encoders import ROW_DIM, PatchSummary, group_latent, pool_image
from .neural.model import ModelConfig, PackedBatch, causal_mask
from .scenelang.dsl import SceneAst, pretty_print
from .scenelang.oracle import scene_report
from .text import (EOT, MARK_PROMPT, MARK_QUESTION, MARK_THINK1, MARK_THINK2,
                   PAD, ROW_LAT, ROW_SEM, ROW_TARGET, VOCAB, plan_tokens,
                   question_tokens, reflection_tokens, tokenize_prompt)
from .trajectory import SegmentRole

SEM_CHANNELS = 3  # raw color channels carried by one semantic row


class Mode(enum.Enum):
    """The six training tasks, two per pipeline turn plus critique variants."""

    INITIAL_CRITIQUE = "initial-critique"    # prompt + image + question -> plan
    INITIAL_THINK = "initial-think"          # prompt -> plan
    INITIAL_FULL = "initial-full"            # prompt -> plan + first image
    REFLECT_CRITIQUE = "reflect-critique"    # prompt + both images + question -> critique
    REFLECT_THINK = "reflect-think"          # prompt + plan + flawed image -> critique
    IMPROVE_FULL = "improve-full"            # prompt + plan + flawed image -> critique + image


STAGE1_MODES = tuple(Mode)
STAGE2_MODES = (Mode.INITIAL_FULL, Mode.IMPROVE_FULL)

ABLATIONS = ("prompt", "think1", "think2", "features")


@dataclass(frozen=True)
class ModeRecord:
    """One forged scene, preprocessed far enough to assemble any mode."""

    ast: SceneAst
    prompt: tuple[str, ...]       # prompt tokens as typed by the user
    plan: tuple[str, ...]         # first-turn thinking tokens
    reflection: tuple[str, ...]   # second-turn thinking tokens
    clean: PatchSummary           # pooled clean render
    flawed: PatchSummary          # pooled degraded render
    target_rows: np.ndarray       # (16, 108) grouped clean latents


def make_record(ast: SceneAst, clean_img: np.ndarray,
                flawed_img: np.ndarray, prompt_text: str | None = None,
                grid: int = 24) -> ModeRecord:
    """Measure the flawed image and freeze every text the modes will need."""
    report = scene_report(flawed_img, ast, grid)
    prompt = tokenize_prompt(prompt_text if prompt_text is not None
                             else pretty_print(ast))
    clean = pool_image(clean_img)
    return ModeRecord(
        ast=ast,
        prompt=tuple(prompt),
        plan=tuple(plan_tokens(ast)),
        reflection=tuple(reflection_tokens(ast, report)),
        clean=clean,
        flawed=pool_image(flawed_img),
        target_rows=group_latent(clean.latent),
    )


@dataclass
class RowBuilder:
    """Accumulates one mixed sequence row by row."""

    tokens: list[str] = field(default_factory=list)
    role_ids: list[int] = field(default_factory=list)
    grid_ids: list[int] = field(default_factory=list)
    grid_mask: list[float] = field(default_factory=list)
    sem: list[np.ndarray] = field(default_factory=list)
    sem_mask: list[float] = field(default_factory=list)
    lat: list[np.ndarray] = field(default_factory=list)
    lat_mask: list[float] = field(default_factory=list)
    txt_target: list[int] = field(default_factory=list)
    tgt_start: int | None = None
    tgt_role: int | None = None

    def _row(self, token: str, role: SegmentRole, grid: int | None = None,
             sem: np.ndarray | None = None, sem_grid: int = 0,
             lat: np.ndarray | None = None, txt_target: int = -1) -> None:
        # the id field is shared: latent rows index the 16-entry grid table,
        # semantic rows index the 6x6 patch position tables (mask-selected)
        self.tokens.append(token)
        self.role_ids.append(int(role))
        self.grid_ids.append(sem_grid if grid is None else grid)
        self.grid_mask.append(0.0 if grid is None else 1.0)
        self.sem.append(np.zeros(SEM_CHANNELS, np.float32) if sem is None
                        else sem)
        self.sem_mask.append(0.0 if sem is None else 1.0)
        self.lat.append(np.zeros(ROW_DIM, np.float32) if lat is None else lat)
        self.lat_mask.append(0.0 if lat is None else 1.0)
        self.txt_target.append(txt_target)

    def text_segment(self, role: SegmentRole, marker: str,
                     words: tuple[str, ...] | list[str],
                     supervised: bool) -> None:
        """Marker then words then end marker; if supervised, each position
        from the marker onward is charged for predicting its successor."""
        stream_toks = [marker, *words, EOT]
        for i, tok in enumerate(stream_toks):
            target = -1
            if supervised and i + 1 < len(stream_toks):
                target = VOCAB.index[stream_toks[i + 1]]
            self._row(tok, role, txt_target=target)

    def feature_segment(self, summary: PatchSummary) -> None:
        for i, color in enumerate(summary.means):
            self._row(ROW_SEM, SegmentRole.ENCODED_FEATURES, sem=color,
                      sem_grid=i)
        for i, row in enumerate(group_latent(summary.latent)):
            self._row(ROW_LAT, SegmentRole.ENCODED_FEATURES, grid=i, lat=row)

    def target_image(self, role: SegmentRole, n_rows: int) -> None:
        """Rows for the image being generated; content is filled in later."""
        self.tgt_start = len(self.tokens)
        self.tgt_role = int(role)
        for i in range(n_rows):
            self._row(ROW_TARGET, role, grid=i, lat=np.zeros(ROW_DIM, np.float32))

    def finish(self, mode: Mode, target_rows: np.ndarray | None,
               cfg: ModelConfig) -> "ModeSample":
        n = len(self.tokens)
        if n > cfg.max_seq:
            raise ValueError(f"sequence of {n} rows exceeds {cfg.max_seq}")
        return ModeSample(
            mode=mode,
            tokens=list(self.tokens),
            token_ids=VOCAB.encode(self.tokens),
            role_ids=np.array(self.role_ids, np.int64),
            grid_ids=np.array(self.grid_ids, np.int64),
            grid_mask=np.array(self.grid_mask, np.float32),
            sem=np.stack(self.sem).astype(np.float32),
            sem_mask=np.array(self.sem_mask, np.float32),
            lat=np.stack(self.lat).astype(np.float32),
            lat_mask=np.array(self.lat_mask, np.float32),
            txt_target=np.array(self.txt_target, np.int64),
            tgt_start=self.tgt_start,
            tgt_role=self.tgt_role,
            target_rows=None if target_rows is None
            else np.array(target_rows, np.float32),
            time_vec=np.zeros((n, cfg.d_model), np.float32),
        )


@dataclass
class ModeSample:
    """One assembled sequence with its supervision masks."""

    mode: Mode
    tokens: list[str]
    token_ids: np.ndarray
    role_ids: np.ndarray
    grid_ids: np.ndarray
    grid_mask: np.ndarray
    sem: np.ndarray
    sem_mask: np.ndarray
    lat: np.ndarray
    lat_mask: np.ndarray
    txt_target: np.ndarray
    tgt_start: int | None
    tgt_role: int | None
    target_rows: np.ndarray | None
    time_vec: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


def assemble(mode: Mode, record: ModeRecord, cfg: ModelConfig,
             ablate: frozenset[str] = frozenset()) -> ModeSample:
    """Lay out one sample.  Ablations empty or remove conditioning segments;
    any ablation also turns text supervision off, leaving only the image
    target, which is exactly what the guidance branches need."""
    unknown = set(ablate) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablations: {sorted(unknown)}")
    rb = RowBuilder()
    supervise_text = not ablate
    n_rows = cfg.n_image_rows

    prompt = () if "prompt" in ablate else record.prompt
    rb.text_segment(SegmentRole.PROMPT, MARK_PROMPT, prompt, supervised=False)

    if mode is Mode.INITIAL_CRITIQUE:
        rb.feature_segment(record.flawed)
        rb.text_segment(SegmentRole.UNDERSTANDING_QUESTION, MARK_QUESTION,
                        question_tokens(1), supervised=False)
        rb.text_segment(SegmentRole.INITIAL_THINKING, MARK_THINK1,
                        record.plan, supervised=supervise_text)
        return rb.finish(mode, None, cfg)

    if mode is Mode.INITIAL_THINK:
        rb.text_segment(SegmentRole.INITIAL_THINKING, MARK_THINK1,
                        record.plan, supervised=supervise_text)
        return rb.finish(mode, None, cfg)

    if mode is Mode.INITIAL_FULL:
        if "think1" not in ablate:
            rb.text_segment(SegmentRole.INITIAL_THINKING, MARK_THINK1,
                            record.plan, supervised=supervise_text)
        rb.target_image(SegmentRole.INITIAL_IMAGE, n_rows)
        return rb.finish(mode, record.target_rows, cfg)

    if mode is Mode.REFLECT_CRITIQUE:
        rb.feature_segment(record.flawed)
        rb.feature_segment(record.clean)
        rb.text_segment(SegmentRole.UNDERSTANDING_QUESTION, MARK_QUESTION,
                        question_tokens(2), supervised=False)
        rb.text_segment(SegmentRole.IMPROVING_THINKING, MARK_THINK2,
                        record.reflection, supervised=supervise_text)
        return rb.finish(mode, None, cfg)

    if mode is Mode.REFLECT_THINK:
        rb.text_segment(SegmentRole.INITIAL_THINKING, MARK_THINK1,
                        record.plan, supervised=False)
        rb.feature_segment(record.flawed)
        rb.text_segment(SegmentRole.IMPROVING_THINKING, MARK_THINK2,
                        record.reflection, supervised=supervise_text)
        return rb.finish(mode, None, cfg)

    if mode is Mode.IMPROVE_FULL:
        rb.text_segment(SegmentRole.INITIAL_THINKING, MARK_THINK1,
                        record.plan, supervised=False)
        if "features" not in ablate:
            rb.feature_segment(record.flawed)
        think2 = () if "think2" in ablate else record.reflection
        rb.text_segment(SegmentRole.IMPROVING_THINKING, MARK_THINK2,
                        think2, supervised=supervise_text)
        rb.target_image(SegmentRole.IMPROVED_IMAGE, n_rows)
        return rb.finish(mode, record.target_rows, cfg)

    raise ValueError(f"unknown mode: {mode!r}")


def pack_batch(samples: list[ModeSample], cfg: ModelConfig) -> PackedBatch:
    """Pad a homogeneous batch to one length and flatten supervision."""
    b = len(samples)
    max_len = max(len(s) for s in samples)
    pad_id = VOCAB.index[PAD]
    token_ids = np.full((b, max_len), pad_id, np.int64)
    role_ids = np.zeros((b, max_len), np.int64)
    grid_ids = np.zeros((b, max_len), np.int64)
    grid_mask = np.zeros((b, max_len), np.float32)
    sem = np.zeros((b, max_len, cfg.sem_dim), np.float32)
    sem_mask = np.zeros((b, max_len), np.float32)
    lat = np.zeros((b, max_len, cfg.row_dim), np.float32)
    lat_mask = np.zeros((b, max_len), np.float32)
    time_vec = np.zeros((b, max_len, cfg.d_model), np.float32)
    txt_pos, txt_targets, img_pos = [], [], []
    for i, s in enumerate(samples):
        n = len(s)
        token_ids[i, :n] = s.token_ids
        role_ids[i, :n] = s.role_ids
        grid_ids[i, :n] = s.grid_ids
        grid_mask[i, :n] = s.grid_mask
        sem[i, :n] = s.sem
        sem_mask[i, :n] = s.sem_mask
        lat[i, :n] = s.lat
        lat_mask[i, :n] = s.lat_mask
        time_vec[i, :n] = s.time_vec
        sup = np.nonzero(s.txt_target >= 0)[0]
        txt_pos.extend(i * max_len + sup)
        txt_targets.extend(s.txt_target[sup])
        if s.tgt_start is not None:
            img_pos.extend(i * max_len
                           + np.arange(s.tgt_start, s.tgt_start + cfg.n_image_rows))
    attn = causal_mask([len(s) for s in samples],
                       [s.tgt_start for s in samples],
                       cfg.n_image_rows, max_len)
    return PackedBatch(
        token_ids=token_ids, role_ids=role_ids, grid_ids=grid_ids,
        grid_mask=grid_mask, sem=sem, sem_mask=sem_mask, lat=lat,
        lat_mask=lat_mask, time_vec=time_vec, attn_mask=attn,
        txt_pos=np.array(txt_pos, np.int64),
        txt_targets=np.array(txt_targets, np.int64),
        img_pos=np.array(img_pos, np.int64),
        img_targets=None,
    )
