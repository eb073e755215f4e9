"""Full prediction model: fusion regime -> encoder + PTA -> mode attention -> decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .anchor_decoder import DecodedModes, anchor_steps, decode_trajectories, init_decoder, predict_anchors
from .config import ModelConfig, RunConfig
from .data_model import ObservedTrack, Scene, Source
from .diffcore import ParamStore, Tensor
from .fusion import FusedTrackSet, early_fuse, fused_agent_ids, hungarian_assign, build_cost_matrix, single_view
from .geometry import RotationFrame, make_frame, stack_frames
from .mode_attention import expand_modes, init_mode_attention, mode_gat
from .objective_metrics import (
    LossBreakdown,
    anchor_loss,
    best_mode,
    cls_loss,
    laplace_reg_loss,
    total_loss,
)
from .scene_encoder import SceneGraph, build_graph, encode_history, init_encoder, init_pta, temporal_summary

VIEW_SOURCES = {"vehicle-only": Source.VEHICLE, "infra-only": Source.INFRA}


def init_model(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    if cfg.intermediate:
        for view in ("v", "i"):
            init_encoder(store, cfg, rng, prefix=f"enc_{view}")
            init_pta(store, cfg, rng, prefix=f"pta_{view}")
        if cfg.fusion == "intermediate-concat":
            dc.init_linear(store, "merge", 2 * cfg.hidden_dim, cfg.hidden_dim, rng)
    else:
        init_encoder(store, cfg, rng)
        init_pta(store, cfg, rng)
    init_mode_attention(store, cfg, rng)
    init_decoder(store, cfg, rng)
    return store


@dataclass
class ViewGraphs:
    rows: np.ndarray  # agent row of each track in this view
    graphs: list[SceneGraph]


@dataclass
class SceneInputs:
    scene_id: str
    tracks: list[ObservedTrack]
    frames: list[RotationFrame]
    agent_ids: list[int | None]
    graphs: list[SceneGraph] = field(default_factory=list)
    views: dict[str, ViewGraphs] = field(default_factory=dict)
    target_local: np.ndarray | None = None  # (N, t_f, 2)
    target_world: np.ndarray | None = None
    target_valid: np.ndarray | None = None  # (N, t_f)
    focal_rows: np.ndarray | None = None

    @property
    def num_agents(self) -> int:
        return len(self.tracks)


def agent_tracks(scene: Scene, cfg: RunConfig, view: str = "cooperative") -> FusedTrackSet:
    """Track set fed to the model for a given input regime."""
    fusion = cfg.model.fusion
    if view in VIEW_SOURCES:
        return single_view(scene, VIEW_SOURCES[view])
    if fusion == "none":
        return single_view(scene, Source.VEHICLE)
    return early_fuse(scene, cfg.fusion.kalman())


def _attach_targets(scene: Scene, inp: SceneInputs, t_f: int) -> None:
    N = inp.num_agents
    world = np.zeros((N, t_f, 2))
    valid = np.zeros((N, t_f), dtype=bool)
    focal, seen = [], set()
    focal_set = set(scene.focal_ids)
    for r, gid in enumerate(inp.agent_ids):
        fut = scene.futures.get(gid) if gid is not None else None
        if fut is None:
            continue
        if len(fut.valid) != t_f:
            raise ValueError(f"scene {scene.scene_id}: t_f={len(fut.valid)}, model expects {t_f}")
        world[r] = np.where(fut.valid[:, None], fut.positions, 0.0)
        valid[r] = fut.valid
        if gid in focal_set and gid not in seen:
            focal.append(r)
            seen.add(gid)
    origins, rots = stack_frames(inp.frames)
    local = np.einsum("nji,ntj->nti", rots, world - origins[:, None, :]) if N else world
    inp.target_world = world
    inp.target_local = np.where(valid[..., None], local, 0.0)
    inp.target_valid = valid
    inp.focal_rows = np.array(focal, dtype=np.int64)


def prepare_inputs(scene: Scene, cfg: RunConfig, view: str = "cooperative") -> SceneInputs:
    m = cfg.model
    if m.intermediate:
        return _prepare_intermediate(scene, cfg, view)
    fused = agent_tracks(scene, cfg, view)
    tracks = list(fused.tracks)
    frames = [make_frame(t) for t in tracks]
    inp = SceneInputs(scene.scene_id, tracks, frames, fused_agent_ids(scene, fused))
    inp.graphs = [build_graph(tracks, scene.map, t, m, frames) for t in range(scene.t_h)]
    _attach_targets(scene, inp, m.t_f)
    return inp


def _prepare_intermediate(scene: Scene, cfg: RunConfig, view: str) -> SceneInputs:
    """Agents from the matching; each view keeps its own raw tracks."""
    m = cfg.model
    V = scene.vehicle_tracks if view != "infra-only" else scene.vehicle_tracks.__class__((), scene.t_h, scene.dt)
    I = scene.infra_tracks if view != "vehicle-only" else scene.infra_tracks.__class__((), scene.t_h, scene.dt)
    match = hungarian_assign(build_cost_matrix(V, I), cfg.fusion.gate_m)
    vmap, imap = V.by_id(), I.by_id()
    parents = list(match.sorted_pairs())
    parents += [(v, None) for v in sorted(match.unmatched_vehicle)]
    parents += [(None, i) for i in sorted(match.unmatched_infra)]
    frames, agent_ids, tracks = [], [], []
    v_rows, v_tracks, i_rows, i_tracks = [], [], [], []
    for r, (vid, iid) in enumerate(parents):
        primary = vmap[vid] if vid is not None else imap[iid]
        tracks.append(primary)
        frames.append(make_frame(primary))
        gid = scene.agent_id(Source.VEHICLE, vid) if vid is not None else None
        if gid is None and iid is not None:
            gid = scene.agent_id(Source.INFRA, iid)
        agent_ids.append(gid)
        if vid is not None:
            v_rows.append(r)
            v_tracks.append(vmap[vid])
        if iid is not None:
            i_rows.append(r)
            i_tracks.append(imap[iid])
    inp = SceneInputs(scene.scene_id, tracks, frames, agent_ids)
    for key, rows, trs in (("v", v_rows, v_tracks), ("i", i_rows, i_tracks)):
        fr = [frames[r] for r in rows]
        inp.views[key] = ViewGraphs(
            np.array(rows, dtype=np.int64), [build_graph(trs, scene.map, t, m, fr) for t in range(scene.t_h)]
        )
    _attach_targets(scene, inp, m.t_f)
    return inp


@dataclass
class ForwardOut:
    decoded: DecodedModes
    anchors: Tensor
    embedding: Tensor


def _encode(graphs, n: int, cfg: ModelConfig, params, enc: str, pta: str) -> Tensor:
    d_all = encode_history(graphs, n, cfg, params, enc)
    return temporal_summary(d_all, cfg, params, pta)


def forward(
    params: ParamStore,
    inp: SceneInputs,
    cfg: ModelConfig,
    train: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ForwardOut:
    N, D = inp.num_agents, cfg.hidden_dim
    if cfg.intermediate:
        parts = []
        for key in ("v", "i"):
            vg = inp.views[key]
            n = len(vg.rows)
            placeholder = dc.reshape(params[f"enc_{key}.placeholder"], (1, D))
            present = np.zeros((N, 1))
            present[vg.rows] = 1.0
            missing = placeholder * Tensor(1.0 - present)
            if n:
                E_view = _encode(vg.graphs, n, cfg, params, f"enc_{key}", f"pta_{key}")
                parts.append(dc.segment_sum(E_view, vg.rows, N) + missing)
            else:
                parts.append(dc.broadcast_to(placeholder, (N, D)))
        if cfg.fusion == "intermediate-add":
            E = parts[0] + parts[1]
        else:
            E = dc.apply_linear(dc.concat(parts, axis=-1), params, "merge")
    else:
        E = _encode(inp.graphs, N, cfg, params, "enc", "pta")
    E = dc.dropout(E, dropout, train, rng)
    E_m = expand_modes(E, cfg.num_modes, params)
    if cfg.mode_attention:
        E_m = mode_gat(E_m, cfg.mode_attn_heads, params)
    anchors = predict_anchors(E_m, cfg, params)
    decoded = decode_trajectories(E_m, anchors, inp.frames, cfg, params, train=train, rate=dropout, rng=rng)
    return ForwardOut(decoded, anchors, E)


def scene_loss(
    out: ForwardOut,
    inp: SceneInputs,
    cfg: ModelConfig,
    alpha: float = 0.5,
    delta: float = 1.0,
    reg_mode: str = "wta",
    stats: dict | None = None,
) -> LossBreakdown:
    valid = inp.target_valid
    pred_local = out.decoded.local
    best, usable = best_mode(pred_local.data, inp.target_local, valid)
    reg = laplace_reg_loss(pred_local, out.decoded.scales, inp.target_local, valid, best, out.decoded.scores, reg_mode)
    cls = cls_loss(out.decoded.scores, best, usable, stats)
    anc = anchor_loss(out.anchors, inp.target_local, valid, best, anchor_steps(cfg.num_anchors, cfg.t_f), delta)
    return total_loss(cls, reg, anc, alpha)
