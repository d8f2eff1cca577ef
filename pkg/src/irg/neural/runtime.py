"""Plain-numpy forward pass with a key/value cache.

Sampling needs many short forward passes over a fixed prefix: one per
generated token, and one per flow step and guidance branch for images.
This module mirrors the tape model's arithmetic without building a graph,
caches attention keys and values per branch, and supports two query
regimes: causal for token generation, and free mutual attention for the
rows of the image being generated, which are evaluated but never cached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig

_LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))
NEG_INF = -1e9


def _layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + _LN_EPS) * gain + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    # x * x * x, not x ** 3: the pow ufunc is dramatically slower
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RowBatch:
    """Embedding inputs for n new sequence rows."""

    token_ids: np.ndarray                 # (n,) int64
    role_ids: np.ndarray                  # (n,) int64
    grid_ids: np.ndarray | None = None    # (n,) int64 where grid_mask on
    grid_mask: np.ndarray | None = None   # (n,)
    sem: np.ndarray | None = None         # (n, sem_dim)
    sem_mask: np.ndarray | None = None    # (n,)
    lat: np.ndarray | None = None         # (n, row_dim)
    lat_mask: np.ndarray | None = None    # (n,)
    time_vec: np.ndarray | None = None    # (n, d_model)

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class KVCache:
    """Per-layer cached keys and values for one growing prefix."""

    keys: list[np.ndarray] = field(default_factory=list)    # (H, t, hd) each
    values: list[np.ndarray] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0


def embed_rows(params: dict[str, np.ndarray], rows: RowBatch,
               position: int) -> np.ndarray:
    """Numpy twin of the tape embedding; positions start at ``position``."""
    n = len(rows)
    side = params["vit_row"].shape[0]
    n_grid = params["grid_emb"].shape[0]
    h = params["tok_emb"][rows.token_ids].astype(np.float32).copy()
    h += params["role_emb"][rows.role_ids]
    h += params["pos_emb"][position:position + n]
    if rows.grid_mask is not None:
        lat_ids = np.minimum(rows.grid_ids, n_grid - 1)
        h += params["grid_emb"][lat_ids] * rows.grid_mask[:, None]
    if rows.sem_mask is not None:
        sem = rows.sem @ params["w_sem"] + params["b_sem"]
        sem = sem + params["vit_row"][rows.grid_ids // side]
        sem = sem + params["vit_col"][rows.grid_ids % side]
        h += sem * rows.sem_mask[:, None]
    if rows.lat_mask is not None:
        lat = rows.lat @ params["w_lat"] + params["b_lat"]
        h += lat * rows.lat_mask[:, None]
    if rows.time_vec is not None:
        h += rows.time_vec @ params["w_time"]
    return h


def run_rows(params: dict[str, np.ndarray], cfg: ModelConfig, cache: KVCache,
             rows: RowBatch, mutual: bool = False,
             append: bool = True) -> np.ndarray:
    """Push rows through every layer; return final-normed hidden states.

    ``mutual`` lets the new rows attend each other without order; otherwise
    they are causal among themselves.  The prefix is always fully visible.
    ``append`` controls whether the rows join the cache afterwards.
    """
    n = len(rows)
    hd, heads = cfg.d_head, cfg.n_heads
    h = embed_rows(params, rows, cache.length)
    fresh = not cache.keys
    if n > 1 and not mutual:
        self_mask = np.triu(np.full((n, n), NEG_INF, dtype=np.float32), k=1)
    else:
        self_mask = None
    for layer in range(cfg.n_layers):
        xn = _layernorm(h, params[f"l{layer}.ln1_g"], params[f"l{layer}.ln1_b"])
        q = (xn @ params[f"l{layer}.wq"]).reshape(n, heads, hd).swapaxes(0, 1)
        k = (xn @ params[f"l{layer}.wk"]).reshape(n, heads, hd).swapaxes(0, 1)
        v = (xn @ params[f"l{layer}.wv"]).reshape(n, heads, hd).swapaxes(0, 1)
        if fresh:
            k_all, v_all = k, v
        else:
            k_all = np.concatenate([cache.keys[layer], k], axis=1)
            v_all = np.concatenate([cache.values[layer], v], axis=1)
        att = q @ k_all.swapaxes(1, 2) * np.float32(1.0 / np.sqrt(hd))
        if self_mask is not None:
            att[:, :, k_all.shape[1] - n:] += self_mask
        ctx = _softmax(att) @ v_all
        h = h + ctx.swapaxes(0, 1).reshape(n, cfg.d_model) @ params[f"l{layer}.wo"]
        xn2 = _layernorm(h, params[f"l{layer}.ln2_g"], params[f"l{layer}.ln2_b"])
        mid = _gelu(xn2 @ params[f"l{layer}.w1"] + params[f"l{layer}.b1"])
        h = h + mid @ params[f"l{layer}.w2"] + params[f"l{layer}.b2"]
        if append:
            if fresh:
                cache.keys.append(k)
                cache.values.append(v)
            else:
                cache.keys[layer] = k_all
                cache.values[layer] = v_all
    return _layernorm(h, params["ln_f_g"], params["ln_f_b"])


def text_logits(params: dict[str, np.ndarray], hidden: np.ndarray) -> np.ndarray:
    return hidden @ params["head_txt"] + params["b_txt"]


def velocity(params: dict[str, np.ndarray], hidden: np.ndarray) -> np.ndarray:
    return hidden @ params["head_vel"] + params["b_vel"]
