"""Two-stage optimization of the interleaved model.

Stage one trains all six tasks; stage two narrows to the two full
generation tasks.  Every random draw a step makes comes from one stream
named by (seed, stage, step), and the optimizer state is part of the
checkpoint, so a resumed run replays the remaining steps bit for bit.
"""

from __future__ import annotations

import csv
import math
import time
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .modes import (STAGE1_MODES, STAGE2_MODES, Mode, ModeRecord, ModeSample,
                    assemble, pack_batch)
from .neural import tape
from .neural.checkpoint import load_arrays, save_arrays
from .neural.model import (ModelConfig, PackedBatch, as_tensors, forward,
                           init_params, time_embedding)
from .neural.model import text_head as model_text_head
from .neural.model import velocity_head as model_velocity_head
from .rng import stream
from .tuning import tune_allocator

STAGE_NAMES = ("decomposed", "full")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    stage1_steps: int = 200
    stage2_steps: int = 3000
    lr: float = 3e-4
    warmup_steps: int = 100
    min_lr_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_image: float = 1.0
    cond_dropout: float = 0.1
    ema_decay: float = 0.999
    mode_weights: Mapping[str, float] | None = None
    trace_every: int = 1


def lr_at(tcfg: TrainConfig, t: int, total_steps: int) -> float:
    """Linear warmup then cosine decay to ``min_lr_frac`` of the peak.

    Depends only on the global optimizer step, so resumed runs see the
    same schedule."""
    if t <= tcfg.warmup_steps:
        return tcfg.lr * t / max(1, tcfg.warmup_steps)
    span = max(1, total_steps - tcfg.warmup_steps)
    frac = min(1.0, (t - tcfg.warmup_steps) / span)
    lo = tcfg.min_lr_frac
    return tcfg.lr * (lo + (1.0 - lo) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig,
              lr: float | None = None) -> None:
    state.t += 1
    step_lr = cfg.lr if lr is None else lr
    b1c = 1.0 - cfg.beta1 ** state.t
    b2c = 1.0 - cfg.beta2 ** state.t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(np.float32)
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        mhat = state.m[name] / b1c
        vhat = state.v[name] / b2c
        params[name] -= (step_lr * mhat
                         / (np.sqrt(vhat) + cfg.adam_eps)).astype(np.float32)


def ema_update(ema: dict[str, np.ndarray], params: dict[str, np.ndarray],
               decay: float) -> None:
    for name, p in params.items():
        ema[name] += (1.0 - decay) * (p - ema[name])


def batch_loss(tensors: dict[str, tape.Tensor], batch: PackedBatch,
               mcfg: ModelConfig,
               lambda_image: float) -> tuple[tape.Tensor, float, float]:
    """Masked next-token loss plus weighted velocity loss.

    The output heads run only on supervised rows; everything else is graded
    purely through attention, never through a head."""
    hidden = forward(tensors, batch, mcfg)
    b, seq_len, _ = hidden.shape
    flat = tape.reshape(hidden, (b * seq_len, mcfg.d_model))
    terms = []
    loss_text = loss_image = 0.0
    if batch.txt_pos.size:
        logits = model_text_head(tensors, tape.gather_rows(flat, batch.txt_pos))
        logp = tape.take_per_row(tape.log_softmax(logits), batch.txt_targets)
        ce = tape.scale(tape.mean_all(logp), -1.0)
        terms.append(ce)
        loss_text = ce.item()
    if batch.img_pos.size:
        pred = model_velocity_head(tensors,
                                   tape.gather_rows(flat, batch.img_pos))
        diff = tape.sub(pred, tape.const(batch.img_targets))
        mse = tape.mean_all(tape.mul(diff, diff))
        terms.append(tape.scale(mse, lambda_image))
        loss_image = mse.item()
    if not terms:
        raise ValueError("batch supervises nothing")
    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return total, loss_text, loss_image


def _draw_ablation(mode: Mode, g: np.random.Generator,
                   p: float) -> frozenset[str]:
    """Condition dropout; the layouts it makes are the guidance branches."""
    u = g.random()
    if mode is Mode.INITIAL_FULL:
        if u < p:
            return frozenset({"prompt", "think1"})
        if u < 2 * p:
            return frozenset({"think1"})
    elif mode is Mode.IMPROVE_FULL:
        if u < p:
            return frozenset({"features"})
        if u < 2 * p:
            return frozenset({"think2"})
    return frozenset()


def as_mode_pools(
    records: Sequence[ModeRecord] | Mapping[Mode, Sequence[ModeRecord]],
) -> dict[Mode, Sequence[ModeRecord]]:
    """Accept either one shared pool or a per-task mapping of pools."""
    if isinstance(records, Mapping):
        return dict(records)
    return {mode: records for mode in Mode}


def _draw_mode(modes: tuple[Mode, ...],
               weights: Mapping[str, float] | None,
               g: np.random.Generator) -> Mode:
    if not weights:
        return modes[int(g.integers(len(modes)))]
    w = np.array([float(weights.get(m.value, 1.0)) for m in modes])
    if w.sum() <= 0.0:
        raise ValueError("mode weights sum to zero over the active tasks")
    return modes[int(g.choice(len(modes), p=w / w.sum()))]


def make_step_batch(
    records: Sequence[ModeRecord] | Mapping[Mode, Sequence[ModeRecord]],
    stage: str, step: int, modes: tuple[Mode, ...], tcfg: TrainConfig,
    mcfg: ModelConfig,
) -> tuple[Mode, PackedBatch]:
    """Assemble, noise, and pack the batch for one training step."""
    pools = as_mode_pools(records)
    g = stream(tcfg.seed, "train", stage, step)
    mode = _draw_mode(modes, tcfg.mode_weights, g)
    pool = pools[mode]
    samples: list[ModeSample] = []
    img_targets: list[np.ndarray] = []
    for _ in range(tcfg.batch_size):
        record = pool[int(g.integers(len(pool)))]
        ablate = _draw_ablation(mode, g, tcfg.cond_dropout)
        sample = assemble(mode, record, mcfg, ablate)
        if sample.tgt_start is not None:
            t = float(g.random())
            eps = g.standard_normal(sample.target_rows.shape).astype(np.float32)
            x_t = (1.0 - t) * sample.target_rows + t * eps
            rows = slice(sample.tgt_start, sample.tgt_start + mcfg.n_image_rows)
            sample.lat[rows] = x_t
            sample.lat_mask[rows] = 1.0
            sample.time_vec[rows] = time_embedding(t, mcfg.d_model)
            img_targets.append(eps - sample.target_rows)
        samples.append(sample)
    batch = pack_batch(samples, mcfg)
    if img_targets:
        batch.img_targets = np.concatenate(img_targets, axis=0)
    return mode, batch


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    adam: AdamState
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)


def _run_stage(params: dict[str, np.ndarray], adam: AdamState,
               ema: dict[str, np.ndarray],
               records: Mapping[Mode, Sequence[ModeRecord]], stage: str,
               modes: tuple[Mode, ...], n_steps: int, start_step: int,
               total_steps: int, tcfg: TrainConfig, mcfg: ModelConfig,
               trace: list[dict], log_every: int = 0) -> None:
    t0 = time.monotonic()
    for step in range(start_step, n_steps):
        mode, batch = make_step_batch(records, stage, step, modes, tcfg, mcfg)
        tensors = as_tensors(params)
        loss, loss_text, loss_image = batch_loss(tensors, batch, mcfg,
                                                 tcfg.lambda_image)
        tape.backward(loss)
        grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
        adam_step(params, grads, adam, tcfg,
                  lr=lr_at(tcfg, adam.t + 1, total_steps))
        ema_update(ema, params, tcfg.ema_decay)
        if step % tcfg.trace_every == 0:
            trace.append({"step": adam.t, "stage": stage, "mode": mode.value,
                          "loss_text": round(loss_text, 6),
                          "loss_image": round(loss_image, 6)})
        if log_every and step % log_every == 0:
            rate = (step - start_step + 1) / (time.monotonic() - t0)
            print(f"[{stage}] step {step}/{n_steps} "
                  f"text {loss_text:.4f} image {loss_image:.4f} "
                  f"({rate:.2f} steps/s)", flush=True)


def train(
    records: Sequence[ModeRecord] | Mapping[Mode, Sequence[ModeRecord]],
    tcfg: TrainConfig, mcfg: ModelConfig,
    resume: str | Path | None = None, log_every: int = 0,
    stop_after_stage: int | None = None,
) -> TrainResult:
    """Run both stages (possibly resuming) and return final parameters.

    `stop_after_stage` halts at a stage boundary (0 = decomposed only)
    without shortening the learning-rate horizon, so a later resume
    continues on the same schedule as an uninterrupted run.
    """
    tune_allocator()
    pools = as_mode_pools(records)
    for mode in Mode:
        if not pools.get(mode):
            raise ValueError(f"no records for task {mode.value!r}")
    if resume is not None:
        params, adam, ema, meta = load_checkpoint(resume)
        stage_idx, start_step = meta["stage_index"], meta["next_step"]
        if not ema:
            ema = {k: v.copy() for k, v in params.items()}
    else:
        params = init_params(mcfg, tcfg.seed)
        adam = AdamState.fresh(params)
        ema = {k: v.copy() for k, v in params.items()}
        stage_idx, start_step = 0, 0
    result = TrainResult(params=params, adam=adam, ema=ema)
    total = tcfg.stage1_steps + tcfg.stage2_steps
    plan = ((STAGE_NAMES[0], STAGE1_MODES, tcfg.stage1_steps),
            (STAGE_NAMES[1], STAGE2_MODES, tcfg.stage2_steps))
    for idx, (stage, modes, n_steps) in enumerate(plan):
        if idx < stage_idx:
            continue
        if stop_after_stage is not None and idx > stop_after_stage:
            break
        first = start_step if idx == stage_idx else 0
        _run_stage(params, adam, ema, pools, stage, modes, n_steps, first,
                   total, tcfg, mcfg, result.trace, log_every)
    return result


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    adam: AdamState, mcfg: ModelConfig,
                    ema: dict[str, np.ndarray] | None = None,
                    stage_index: int = 2, next_step: int = 0) -> None:
    arrays = dict(params)
    arrays.update({f"adam.m.{k}": v for k, v in adam.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in adam.v.items()})
    if ema:
        arrays.update({f"ema.{k}": v for k, v in ema.items()})
    meta = {"adam_t": adam.t, "stage_index": stage_index,
            "next_step": next_step, "model_config": asdict(mcfg)}
    save_arrays(path, arrays, meta)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray],
                                               AdamState,
                                               dict[str, np.ndarray], dict]:
    arrays, meta = load_arrays(path)
    params, m, v, ema = {}, {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("adam.m."):
            m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = arr
        elif name.startswith("ema."):
            ema[name[len("ema."):]] = arr
        else:
            params[name] = arr
    return params, AdamState(m=m, v=v, t=meta["adam_t"]), ema, meta


def model_config_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig(**meta["model_config"])


def write_trace(path: str | Path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "stage", "mode", "loss_text", "loss_image"])
        writer.writeheader()
        writer.writerows(trace)
