"""Expansion of agent embeddings into modes and attention across each agent's modes."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .diffcore import ParamStore, Tensor


def init_mode_attention(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator, prefix: str = "modes") -> None:
    D = cfg.hidden_dim
    store.add(f"{prefix}.embed", rng.normal(0.0, 1.0, (cfg.num_modes, D)))
    dc.init_attention(store, f"{prefix}.attn", D, rng)
    dc.init_layer_norm(store, f"{prefix}.ln", D)


def expand_modes(E_t: Tensor, num_modes: int, params, prefix: str = "modes") -> Tensor:
    """(N, D) -> (F, N, D): every agent embedding plus each learned mode vector."""
    N, D = E_t.shape
    emb = params[f"{prefix}.embed"]
    if emb.shape[0] != num_modes:
        raise ValueError(f"{emb.shape[0]} mode embeddings, {num_modes} modes requested")
    return dc.reshape(E_t, (1, N, D)) + dc.reshape(emb, (num_modes, 1, D))


def mode_gat(E: Tensor, heads: int, params, prefix: str = "modes") -> Tensor:
    """Attention over the complete graph (with self loops) of each agent's modes.

    The agent axis is folded into the batch axis so one attention call covers
    all agents.
    """
    F, N, D = E.shape
    x = dc.transpose(E, (1, 0, 2))  # (N, F, D)
    att = dc.multi_head_attention(x, x, heads, params, f"{prefix}.attn.")
    out = dc.apply_layer_norm(x + att, params, f"{prefix}.ln")
    return dc.transpose(out, (1, 0, 2))


def mode_gat_looped(E: Tensor, heads: int, params, prefix: str = "modes") -> Tensor:
    """Per-agent reference loop for ``mode_gat``."""
    F, N, D = E.shape
    outs = []
    for n in range(N):
        x = dc.reshape(E[:, n, :], (1, F, D))
        att = dc.multi_head_attention(x, x, heads, params, f"{prefix}.attn.")
        outs.append(dc.reshape(dc.apply_layer_norm(x + att, params, f"{prefix}.ln"), (F, 1, D)))
    return dc.concat(outs, axis=1)
