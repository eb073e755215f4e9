"""Anchor prediction and MLP-Mixer trajectory decoding in agent frames."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .data_model import PredictionSet
from .diffcore import ParamStore, Tensor
from .geometry import RotationFrame, make_frame, stack_frames

__all__ = [
    "RotationFrame",
    "make_frame",
    "anchor_steps",
    "init_decoder",
    "predict_anchors",
    "decode_trajectories",
    "DecodedModes",
    "time_encoding",
]

MIN_SCALE = 1e-3


def anchor_steps(num_anchors: int, t_f: int) -> list[int]:
    """0-based future step indices supervised by each anchor."""
    if num_anchors == 0:
        return []
    if num_anchors == 1:
        return [t_f - 1]
    if num_anchors == 2:
        return [math.ceil(t_f / 2) - 1, t_f - 1]
    if num_anchors == 3:
        return [math.ceil(t_f / 3) - 1, math.ceil(2 * t_f / 3) - 1, t_f - 1]
    raise ValueError(f"num_anchors={num_anchors}")


def time_encoding(t_f: int, dim: int) -> np.ndarray:
    pos = np.arange(t_f)[:, None]
    freq = 1.0 / (10.0 ** (np.arange(dim // 2) * 2.0 / max(dim, 1)))
    enc = np.zeros((t_f, dim))
    enc[:, 0::2] = np.sin(pos * freq)
    enc[:, 1 : 2 * (dim // 2) : 2] = np.cos(pos * freq)
    return enc


def init_decoder(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator, prefix: str = "dec") -> None:
    D, T, A = cfg.hidden_dim, cfg.t_f, cfg.num_anchors
    if A:
        dc.init_linear(store, f"{prefix}.anchor0", D, D, rng)
        dc.init_linear(store, f"{prefix}.anchor1", D, 2 * A, rng)
    dc.init_linear(store, f"{prefix}.token", D + cfg.time_enc_dim + 2 * A, D, rng)
    for m in range(cfg.mixer_blocks):
        dc.init_layer_norm(store, f"{prefix}.mix{m}.ln_tok", D)
        dc.init_linear(store, f"{prefix}.mix{m}.tok0", T, T, rng)
        dc.init_linear(store, f"{prefix}.mix{m}.tok1", T, T, rng)
        dc.init_layer_norm(store, f"{prefix}.mix{m}.ln_ch", D)
        dc.init_linear(store, f"{prefix}.mix{m}.ch0", D, D, rng)
        dc.init_linear(store, f"{prefix}.mix{m}.ch1", D, D, rng)
    dc.init_layer_norm(store, f"{prefix}.ln_out", D)
    dc.init_linear(store, f"{prefix}.out", D, 3, rng)
    store[f"{prefix}.out.W"].data *= 0.1  # start near the frame origin
    dc.init_linear(store, f"{prefix}.score0", 2 * D, D, rng)
    dc.init_linear(store, f"{prefix}.score1", D, 1, rng)


def predict_anchors(E_m: Tensor, cfg: ModelConfig, params, prefix: str = "dec") -> Tensor:
    """(F, N, D) -> (F, N, A, 2) anchor points in each agent's frame, meters."""
    F, N, _ = E_m.shape
    A = cfg.num_anchors
    if A == 0:
        return Tensor(np.zeros((F, N, 0, 2)))
    h = dc.relu(dc.apply_linear(E_m, params, f"{prefix}.anchor0"))
    out = dc.apply_linear(h, params, f"{prefix}.anchor1") * cfg.pos_scale_m
    return dc.reshape(out, (F, N, A, 2))


@dataclass
class DecodedModes:
    local: Tensor  # (F, N, T, 2) agent-frame positions relative to the frame origin
    scales: Tensor  # (F, N, T) Laplace scale b
    scores: Tensor  # (N, F) softmax over modes
    origins: np.ndarray  # (N, 2)
    rotations: np.ndarray  # (N, 2, 2) agent -> world

    def world(self) -> np.ndarray:
        return np.einsum("nij,fntj->fnti", self.rotations, self.local.data) + self.origins[None, :, None, :]

    def prediction_set(self, agent_ids: Sequence[int] = ()) -> PredictionSet:
        return PredictionSet(self.world(), self.scores.data, tuple(agent_ids))


def decode_trajectories(
    E_m: Tensor,
    anchors: Tensor,
    frames: Sequence[RotationFrame],
    cfg: ModelConfig,
    params,
    train: bool = False,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
    prefix: str = "dec",
) -> DecodedModes:
    F, N, D = E_m.shape
    T, A = cfg.t_f, cfg.num_anchors
    B = F * N
    parts = [
        dc.broadcast_to(dc.reshape(E_m, (F, N, 1, D)), (F, N, T, D)),
        Tensor(np.broadcast_to(time_encoding(T, cfg.time_enc_dim), (F, N, T, cfg.time_enc_dim))),
    ]
    if A:
        a = dc.reshape(anchors, (F, N, 1, 2 * A)) * (1.0 / cfg.pos_scale_m)
        parts.append(dc.broadcast_to(a, (F, N, T, 2 * A)))
    x = dc.apply_linear(dc.concat(parts, axis=-1), params, f"{prefix}.token")
    x = dc.reshape(x, (B, T, D))
    for m in range(cfg.mixer_blocks):
        name = f"{prefix}.mix{m}"
        y = dc.swapaxes(dc.apply_layer_norm(x, params, f"{name}.ln_tok"), 1, 2)  # (B, D, T)
        y = dc.apply_linear(dc.relu(dc.apply_linear(y, params, f"{name}.tok0")), params, f"{name}.tok1")
        x = x + dc.dropout(dc.swapaxes(y, 1, 2), rate, train, rng)
        y = dc.apply_layer_norm(x, params, f"{name}.ln_ch")
        y = dc.apply_linear(dc.relu(dc.apply_linear(y, params, f"{name}.ch0")), params, f"{name}.ch1")
        x = x + dc.dropout(y, rate, train, rng)
    x = dc.apply_layer_norm(x, params, f"{prefix}.ln_out")
    out = dc.reshape(dc.apply_linear(x, params, f"{prefix}.out"), (F, N, T, 3))
    local = out[..., :2] * cfg.pos_scale_m
    scales = dc.softplus(out[..., 2]) + MIN_SCALE

    pooled = dc.reshape(dc.mean(x, axis=1), (F, N, D))
    s = dc.concat([E_m, pooled], axis=-1)
    s = dc.apply_linear(dc.relu(dc.apply_linear(s, params, f"{prefix}.score0")), params, f"{prefix}.score1")
    logits = dc.transpose(dc.reshape(s, (F, N)), (1, 0))
    scores = dc.softmax(logits, axis=-1)

    origins, rots = stack_frames(frames)
    return DecodedModes(local, scales, scores, origins, rots)
