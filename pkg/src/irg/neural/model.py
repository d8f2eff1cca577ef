"""Transformer over interleaved text rows and image-latent rows.

One pre-norm causal transformer reads a mixed sequence: token rows, patch
color rows, grouped-latent rows, and noisy target-latent rows carrying a
time embedding.  Two linear heads read the final hidden state: next-token
logits for text positions and a latent velocity for image positions.
Attention is causal except that the rows of the image being generated
attend to each other freely; that block is always the sequence suffix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import stream
from ..text import VOCAB
from . import tape
from .encoders import ROW_DIM

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 96
    n_layers: int = 3
    n_heads: int = 4
    max_seq: int = 512
    grid: int = 24
    p_vae: int = 2            # pixels per latent cell side
    p_vit: int = 4            # pixels per semantic patch side
    n_image_rows: int = 16    # grouped-latent rows per image
    row_dim: int = ROW_DIM    # content width of one latent row
    sem_dim: int = 3          # raw channels per pooled patch color
    vocab_size: int = len(VOCAB)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def sem_side(self) -> int:
        return self.grid // self.p_vit

    @property
    def n_sem_rows(self) -> int:
        return self.sem_side * self.sem_side


def time_embedding(t: float, d_model: int) -> np.ndarray:
    """Sinusoidal embedding of the flow time, t in [0, 1]."""
    half = d_model // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(np.float32)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Fresh float32 parameters; every draw comes from its own named stream."""
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_seq, d),
        "grid_emb": (cfg.n_image_rows, d),
        "role_emb": (7, d),
        "w_sem": (cfg.sem_dim, d),
        "b_sem": (d,),
        "vit_row": (cfg.sem_side, d),
        "vit_col": (cfg.sem_side, d),
        "w_lat": (cfg.row_dim, d),
        "b_lat": (d,),
        "w_time": (d, d),
        "ln_f_g": (d,),
        "ln_f_b": (d,),
        "head_txt": (d, v),
        "b_txt": (v,),
        "head_vel": (d, cfg.row_dim),
        "b_vel": (cfg.row_dim,),
    }
    for layer in range(cfg.n_layers):
        shapes.update({
            f"l{layer}.ln1_g": (d,), f"l{layer}.ln1_b": (d,),
            f"l{layer}.wq": (d, d), f"l{layer}.wk": (d, d),
            f"l{layer}.wv": (d, d), f"l{layer}.wo": (d, d),
            f"l{layer}.ln2_g": (d,), f"l{layer}.ln2_b": (d,),
            f"l{layer}.w1": (d, 4 * d), f"l{layer}.b1": (4 * d,),
            f"l{layer}.w2": (4 * d, d), f"l{layer}.b2": (d,),
        })
    residual_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    params: dict[str, np.ndarray] = {}
    for name, shape in sorted(shapes.items()):
        if name.endswith(("_g", ".ln1_g", ".ln2_g")):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(("_b", "b1", "b2")) or name.startswith("b_"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            w = stream(seed, "init", name).normal(0.0, 0.02, size=shape)
            if name.endswith((".wo", ".w2")):
                w = w * residual_scale
            params[name] = w.astype(np.float32)
    return params


@dataclass
class PackedBatch:
    """Model-ready arrays for one batch of identically structured samples."""

    token_ids: np.ndarray      # (B, L) int64, pad id 0
    role_ids: np.ndarray       # (B, L) int64
    grid_ids: np.ndarray       # (B, L) int64, valid where grid_mask is 1
    grid_mask: np.ndarray      # (B, L) float32
    sem: np.ndarray            # (B, L, sem_dim) float32 patch colors
    sem_mask: np.ndarray       # (B, L) float32
    lat: np.ndarray            # (B, L, row_dim) float32 latent row content
    lat_mask: np.ndarray       # (B, L) float32
    time_vec: np.ndarray       # (B, L, d_model) float32, zeros off target rows
    attn_mask: np.ndarray      # (B, 1, L, L) float32, 0 or NEG_INF
    txt_pos: np.ndarray        # (n_txt,) flat indices into (B*L)
    txt_targets: np.ndarray    # (n_txt,) int64 token ids
    img_pos: np.ndarray        # (n_img,) flat indices into (B*L)
    img_targets: np.ndarray = field(default=None)  # (n_img, row_dim) or None


def causal_mask(lengths: list[int], block_starts: list[int | None],
                block_len: int, max_len: int) -> np.ndarray:
    """Per-sample masks: causal, free attention inside the target block."""
    b = len(lengths)
    base = np.triu(np.full((max_len, max_len), NEG_INF, dtype=np.float32), k=1)
    mask = np.repeat(base[None], b, axis=0)
    for i, (n, start) in enumerate(zip(lengths, block_starts)):
        if start is not None:
            mask[i, start:start + block_len, start:start + block_len] = 0.0
        if n < max_len:  # padded tail may attend only itself
            mask[i, :n, n:] = NEG_INF
    return mask[:, None]


def embed(tp: dict[str, tape.Tensor], batch: PackedBatch,
          cfg: ModelConfig) -> tape.Tensor:
    b, seq_len = batch.token_ids.shape
    side = cfg.sem_side
    h = tape.gather_rows(tp["tok_emb"], batch.token_ids)
    h = tape.add(h, tape.gather_rows(tp["role_emb"], batch.role_ids))
    # semantic rows reuse the id field with larger values; clamp the latent
    # lookup since its result is masked off on those rows anyway
    lat_ids = np.minimum(batch.grid_ids, cfg.n_image_rows - 1)
    grid = tape.gather_rows(tp["grid_emb"], lat_ids)
    h = tape.add(h, tape.mul(grid, tape.const(batch.grid_mask[..., None])))
    pos = tape.slice_axis(tp["pos_emb"], 0, 0, seq_len)
    h = tape.add(h, pos)
    # dense projections run as one flat GEMM; masks keep them on their rows
    sem2 = tape.matmul(tape.const(batch.sem.reshape(b * seq_len, cfg.sem_dim)),
                       tp["w_sem"])
    sem = tape.reshape(tape.add(sem2, tp["b_sem"]), (b, seq_len, cfg.d_model))
    sem = tape.add(sem, tape.gather_rows(tp["vit_row"], batch.grid_ids // side))
    sem = tape.add(sem, tape.gather_rows(tp["vit_col"], batch.grid_ids % side))
    h = tape.add(h, tape.mul(sem, tape.const(batch.sem_mask[..., None])))
    lat2 = tape.matmul(tape.const(batch.lat.reshape(b * seq_len, cfg.row_dim)),
                       tp["w_lat"])
    lat = tape.reshape(tape.add(lat2, tp["b_lat"]), (b, seq_len, cfg.d_model))
    h = tape.add(h, tape.mul(lat, tape.const(batch.lat_mask[..., None])))
    tvec = tape.matmul(tape.const(batch.time_vec.reshape(b * seq_len,
                                                         cfg.d_model)),
                       tp["w_time"])
    return tape.add(h, tape.reshape(tvec, (b, seq_len, cfg.d_model)))


def _attention(tp, h, layer: int, mask: np.ndarray, cfg: ModelConfig):
    b, seq_len, d = h.shape
    hd = cfg.d_head
    xn = tape.layernorm(h, tp[f"l{layer}.ln1_g"], tp[f"l{layer}.ln1_b"])
    flat = tape.reshape(xn, (b * seq_len, d))
    q = tape.matmul(flat, tp[f"l{layer}.wq"])
    k = tape.matmul(flat, tp[f"l{layer}.wk"])
    v = tape.matmul(flat, tp[f"l{layer}.wv"])
    q, k, v = (tape.swapaxes(tape.reshape(t, (b, seq_len, cfg.n_heads, hd)), 1, 2)
               for t in (q, k, v))
    att = tape.scale(tape.matmul(q, tape.swapaxes(k, 2, 3)), 1.0 / np.sqrt(hd))
    probs = tape.softmax(tape.add(att, tape.const(mask)))
    ctx = tape.swapaxes(tape.matmul(probs, v), 1, 2)
    out = tape.matmul(tape.reshape(ctx, (b * seq_len, d)), tp[f"l{layer}.wo"])
    return tape.add(h, tape.reshape(out, (b, seq_len, d)))


def _mlp(tp, h, layer: int):
    b, seq_len, d = h.shape
    xn = tape.layernorm(h, tp[f"l{layer}.ln2_g"], tp[f"l{layer}.ln2_b"])
    flat = tape.reshape(xn, (b * seq_len, d))
    mid = tape.gelu(tape.add(tape.matmul(flat, tp[f"l{layer}.w1"]),
                             tp[f"l{layer}.b1"]))
    out = tape.add(tape.matmul(mid, tp[f"l{layer}.w2"]), tp[f"l{layer}.b2"])
    return tape.add(h, tape.reshape(out, (b, seq_len, d)))


def forward(tp: dict[str, tape.Tensor], batch: PackedBatch,
            cfg: ModelConfig) -> tape.Tensor:
    """Run the transformer trunk; returns final-normed hidden states."""
    h = embed(tp, batch, cfg)
    for layer in range(cfg.n_layers):
        h = _attention(tp, h, layer, batch.attn_mask, cfg)
        h = _mlp(tp, h, layer)
    return tape.layernorm(h, tp["ln_f_g"], tp["ln_f_b"])


def text_head(tp: dict[str, tape.Tensor], hidden: tape.Tensor) -> tape.Tensor:
    """Next-token logits for any (n, d_model) stack of hidden rows."""
    return tape.add(tape.matmul(hidden, tp["head_txt"]), tp["b_txt"])


def velocity_head(tp: dict[str, tape.Tensor],
                  hidden: tape.Tensor) -> tape.Tensor:
    """Latent velocity for any (n, d_model) stack of hidden rows."""
    return tape.add(tape.matmul(hidden, tp["head_vel"]), tp["b_vel"])


def as_tensors(params: dict[str, np.ndarray]) -> dict[str, tape.Tensor]:
    return {k: tape.param(v) for k, v in params.items()}
