"""Per-timestep scene graphs, graph attention encoding and past-time attention.

Features are expressed in each receiving agent's own frame so the encoder is
invariant to rigid motions of the world.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .data_model import CLASS_LABELS, SIGNAL_STATES, TURN_FLAGS, ClassLabel, ObservedTrack, VectorMap
from .diffcore import ParamStore, Tensor
from .geometry import RotationFrame, make_frame, rotate_world, stack_frames

AGENT_FEAT_DIM = 2 + 2 + 1 + len(CLASS_LABELS)
AA_EDGE_DIM = 2 + 2 + 1
AL_EDGE_DIM = 2 + 2 + 1 + len(SIGNAL_STATES) + len(TURN_FLAGS)


class CacheStateError(RuntimeError):
    pass


def class_radius(cfg: ModelConfig, label: ClassLabel) -> float:
    return cfg.radius_pedestrian_m if label == ClassLabel.PEDESTRIAN else cfg.radius_vehicle_m


@dataclass(frozen=True)
class SceneGraph:
    """Graph for one timestep. Agent node ``k`` is row ``agent_rows[k]`` of the track set."""

    t: int
    agent_rows: np.ndarray  # (n,)
    agent_ids: np.ndarray  # (n,)
    agent_pos: np.ndarray  # (n, 2) world
    agent_class: np.ndarray  # (n,) index into CLASS_LABELS
    lane_rows: np.ndarray  # (m,) segment indices into the map
    lane_mid: np.ndarray  # (m, 2)
    lane_dir: np.ndarray  # (m, 2)
    lane_signal: np.ndarray  # (m,)
    lane_turn: np.ndarray  # (m,)
    aa_src: np.ndarray  # agent -> agent edges, node indices
    aa_dst: np.ndarray
    aa_delta: np.ndarray  # (E, 2) p_src - p_dst, world frame
    al_src: np.ndarray  # lane -> agent edges: lane index, agent index
    al_dst: np.ndarray
    al_delta: np.ndarray  # (E, 2) lane midpoint - agent position
    al_signal: np.ndarray  # (E,)
    # agent-frame features used by the encoder
    node_feats: np.ndarray = field(repr=False, default=None)
    aa_feats: np.ndarray = field(repr=False, default=None)
    al_feats: np.ndarray = field(repr=False, default=None)

    @property
    def num_agents(self) -> int:
        return len(self.agent_rows)

    def agent_edge_set(self) -> set[tuple[int, int]]:
        ids = self.agent_ids
        return {(int(ids[s]), int(ids[d])) for s, d in zip(self.aa_src, self.aa_dst)}


def _point_segment_dist(p: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Distances from points (n, 2) to segments (m, 2, 2) -> (n, m)."""
    a, b = seg[:, 0], seg[:, 1]
    ab = b - a
    denom = np.maximum((ab**2).sum(-1), 1e-12)
    t = np.clip(((p[:, None] - a[None]) * ab[None]).sum(-1) / denom[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(p[:, None] - closest, axis=-1)


def _onehot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def build_graph(
    tracks: Sequence[ObservedTrack],
    vmap: VectorMap,
    t: int,
    radius: float | ModelConfig,
    frames: Sequence[RotationFrame] | None = None,
    lane_radius: float | None = None,
    pos_scale: float = 10.0,
) -> SceneGraph:
    """Graph over agents valid at ``t``.

    ``radius`` is either one radius for every agent or a model config, in
    which case each agent uses its class radius and an edge needs both
    agents within each other's radius.
    """
    tracks = list(getattr(tracks, "tracks", tracks))
    if tracks and not 0 <= t < tracks[0].t_h:
        raise ValueError(f"t={t} outside [0, {tracks[0].t_h})")
    if frames is None:
        frames = [make_frame(tr) for tr in tracks]
    if isinstance(radius, ModelConfig):
        radii_all = np.array([class_radius(radius, tr.class_label) for tr in tracks])
        lane_radius = radius.lane_radius_m if lane_radius is None else lane_radius
        pos_scale = radius.pos_scale_m
    else:
        radii_all = np.full(len(tracks), float(radius))
        lane_radius = float(radius) if lane_radius is None else lane_radius

    rows = np.array([i for i, tr in enumerate(tracks) if tr.valid[t]], dtype=np.int64)
    ids = np.array([tracks[i].track_id for i in rows], dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    rows, ids = rows[order], ids[order]
    pos = np.array([tracks[i].positions[t] for i in rows]).reshape(-1, 2)
    cls = np.array([CLASS_LABELS.index(tracks[i].class_label) for i in rows], dtype=np.int64)
    radii = radii_all[rows]
    n = len(rows)

    # agent-agent
    if n:
        diff = pos[:, None, :] - pos[None, :, :]  # [s, d] = p_s - p_d
        dist = np.linalg.norm(diff, axis=-1)
        ok = (dist <= np.minimum(radii[:, None], radii[None, :])) & ~np.eye(n, dtype=bool)
        aa_src, aa_dst = np.nonzero(ok)
        aa_delta = diff[aa_src, aa_dst]
    else:
        aa_src = aa_dst = np.zeros(0, dtype=np.int64)
        aa_delta = np.zeros((0, 2))

    # lane -> agent
    if n and len(vmap):
        d = _point_segment_dist(pos, vmap.endpoints)
        al_dst, seg = np.nonzero(d <= lane_radius)
    else:
        al_dst = seg = np.zeros(0, dtype=np.int64)
    lane_rows, al_src = np.unique(seg, return_inverse=True)
    mids = vmap.midpoints[lane_rows] if len(vmap) else np.zeros((0, 2))
    dirs = vmap.directions[lane_rows] if len(vmap) else np.zeros((0, 2))
    sig = np.array([SIGNAL_STATES.index(vmap.signal_states[i]) for i in lane_rows], dtype=np.int64)
    turn = np.array([TURN_FLAGS.index(vmap.turn_flags[i]) for i in lane_rows], dtype=np.int64)
    al_delta = mids[al_src] - pos[al_dst] if len(al_src) else np.zeros((0, 2))
    al_signal = sig[al_src] if len(al_src) else np.zeros(0, dtype=np.int64)

    # agent-frame features
    _, rot_all = stack_frames(frames)
    origin_all = np.stack([f.origin for f in frames]) if frames else np.zeros((0, 2))
    heading_all = np.array([f.heading for f in frames])
    rot = rot_all[rows] if n else np.zeros((0, 2, 2))
    node_feats = np.zeros((n, AGENT_FEAT_DIM))
    for k, i in enumerate(rows):
        tr = tracks[i]
        local = (tr.positions[t] - origin_all[i]) @ rot_all[i] / pos_scale
        prev = np.flatnonzero(tr.valid[:t])
        if len(prev):
            j = prev[-1]
            step = (tr.positions[t] - tr.positions[j]) @ rot_all[i] / (t - j)
            has_prev = 1.0
        else:
            step, has_prev = np.zeros(2), 0.0
        node_feats[k, :2] = local
        node_feats[k, 2:4] = step
        node_feats[k, 4] = has_prev
    node_feats[:, 5:] = _onehot(cls, len(CLASS_LABELS))

    if len(aa_src):
        rel = np.einsum("eji,ej->ei", rot[aa_dst], aa_delta) / pos_scale
        dh = heading_all[rows][aa_src] - heading_all[rows][aa_dst]
        aa_feats = np.column_stack([rel, np.cos(dh), np.sin(dh), np.linalg.norm(aa_delta, axis=1) / pos_scale])
    else:
        aa_feats = np.zeros((0, AA_EDGE_DIM))
    if len(al_src):
        rel = np.einsum("eji,ej->ei", rot[al_dst], al_delta) / pos_scale
        ldir = np.einsum("eji,ej->ei", rot[al_dst], dirs[al_src])
        al_feats = np.column_stack(
            [
                rel,
                ldir,
                np.linalg.norm(al_delta, axis=1) / pos_scale,
                _onehot(al_signal, len(SIGNAL_STATES)),
                _onehot(turn[al_src], len(TURN_FLAGS)),
            ]
        )
    else:
        al_feats = np.zeros((0, AL_EDGE_DIM))

    return SceneGraph(
        t=t,
        agent_rows=rows,
        agent_ids=ids,
        agent_pos=pos,
        agent_class=cls,
        lane_rows=lane_rows.astype(np.int64),
        lane_mid=mids,
        lane_dir=dirs,
        lane_signal=sig,
        lane_turn=turn,
        aa_src=aa_src.astype(np.int64),
        aa_dst=aa_dst.astype(np.int64),
        aa_delta=aa_delta,
        al_src=al_src.astype(np.int64),
        al_dst=al_dst.astype(np.int64),
        al_delta=al_delta,
        al_signal=al_signal,
        node_feats=node_feats,
        aa_feats=aa_feats,
        al_feats=al_feats,
    )


@dataclass(frozen=True)
class BatchedGraph:
    """Disjoint union of several timestep graphs; node k maps to output slot ``slots[k]``."""

    num_slots: int
    slots: np.ndarray
    node_feats: np.ndarray
    aa_src: np.ndarray
    aa_dst: np.ndarray
    aa_feats: np.ndarray
    al_dst: np.ndarray
    al_feats: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.slots)


def batch_graphs(graphs: Sequence[SceneGraph], num_agents: int) -> BatchedGraph:
    """Stack timestep graphs; slot of agent row r at graph index k is k*num_agents + r."""
    slots, nf, aas, aad, aaf, ald, alf = [], [], [], [], [], [], []
    offset = 0
    for k, g in enumerate(graphs):
        slots.append(k * num_agents + g.agent_rows)
        nf.append(g.node_feats)
        aas.append(g.aa_src + offset)
        aad.append(g.aa_dst + offset)
        aaf.append(g.aa_feats)
        ald.append(g.al_dst + offset)
        alf.append(g.al_feats)
        offset += g.num_agents
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    return BatchedGraph(
        num_slots=len(graphs) * num_agents,
        slots=cat(slots, (0,)).astype(np.int64),
        node_feats=cat(nf, (0, AGENT_FEAT_DIM)),
        aa_src=cat(aas, (0,)).astype(np.int64),
        aa_dst=cat(aad, (0,)).astype(np.int64),
        aa_feats=cat(aaf, (0, AA_EDGE_DIM)),
        al_dst=cat(ald, (0,)).astype(np.int64),
        al_feats=cat(alf, (0, AL_EDGE_DIM)),
    )


# -------------------------------------------------------------- parameters


def init_encoder(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator, prefix: str = "enc") -> None:
    D = cfg.hidden_dim
    dc.init_linear(store, f"{prefix}.in0", AGENT_FEAT_DIM, D, rng)
    dc.init_linear(store, f"{prefix}.in1", D, D, rng)
    for l in range(cfg.num_gat_layers):
        init_gat_layer(store, f"{prefix}.gat{l}", D, rng)
    store.add(f"{prefix}.placeholder", rng.normal(0.0, 0.1, D))


def init_gat_layer(store: ParamStore, name: str, D: int, rng: np.random.Generator) -> None:
    dc.init_linear(store, f"{name}.q", D, D, rng)
    dc.init_linear(store, f"{name}.k", D, D, rng)
    dc.init_linear(store, f"{name}.v", D, D, rng)
    dc.init_linear(store, f"{name}.ek", AA_EDGE_DIM, D, rng)
    dc.init_linear(store, f"{name}.ev", AA_EDGE_DIM, D, rng)
    dc.init_linear(store, f"{name}.lk", AL_EDGE_DIM, D, rng)
    dc.init_linear(store, f"{name}.lv", AL_EDGE_DIM, D, rng)
    bound = 1.0 / math.sqrt(D)
    store.add(f"{name}.o.W", rng.uniform(-bound, bound, (D, D)))
    dc.init_layer_norm(store, f"{name}.ln", D)


def init_pta(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator, prefix: str = "pta") -> None:
    D = cfg.hidden_dim
    dc.init_attention(store, f"{prefix}.attn", D, rng)
    dc.init_layer_norm(store, f"{prefix}.ln", D)
    dc.init_linear(store, f"{prefix}.mlp0", D, D, rng)
    dc.init_linear(store, f"{prefix}.mlp1", D, D, rng)


# ------------------------------------------------------------------ layers


def graph_attention_layer(
    h: Tensor,
    heads: int,
    params: Mapping[str, Tensor],
    name: str,
    aa_src: np.ndarray,
    aa_dst: np.ndarray,
    aa_feats: np.ndarray,
    al_dst: np.ndarray | None = None,
    al_feats: np.ndarray | None = None,
) -> Tensor:
    """One attention layer over typed in-edges followed by residual + layer norm.

    Agent->agent keys/values combine the source embedding with edge
    attributes; lane->agent keys/values come from lane edge attributes only.
    Nodes without in-edges receive no message.
    """
    n, D = h.shape
    if D % heads:
        raise dc.ConfigError(f"width {D} not divisible by {heads} heads")
    dh = D // heads
    if al_dst is None:
        al_dst, al_feats = np.zeros(0, dtype=np.int64), np.zeros((0, AL_EDGE_DIM))
    E_aa, E_al = len(aa_src), len(al_dst)
    out = h
    if E_aa + E_al:
        q = dc.apply_linear(h, params, f"{name}.q")
        keys, vals, dst = [], [], []
        if E_aa:
            k_node = dc.apply_linear(h, params, f"{name}.k")
            v_node = dc.apply_linear(h, params, f"{name}.v")
            ef = Tensor(aa_feats)
            keys.append(dc.take(k_node, aa_src) + dc.apply_linear(ef, params, f"{name}.ek"))
            vals.append(dc.take(v_node, aa_src) + dc.apply_linear(ef, params, f"{name}.ev"))
            dst.append(aa_dst)
        if E_al:
            lf = Tensor(al_feats)
            keys.append(dc.apply_linear(lf, params, f"{name}.lk"))
            vals.append(dc.apply_linear(lf, params, f"{name}.lv"))
            dst.append(al_dst)
        K = dc.concat(keys, axis=0) if len(keys) > 1 else keys[0]
        V = dc.concat(vals, axis=0) if len(vals) > 1 else vals[0]
        dst = np.concatenate(dst)
        E = len(dst)
        qe = dc.reshape(dc.take(q, dst), (E, heads, dh))
        scores = dc.sum_(qe * dc.reshape(K, (E, heads, dh)), axis=-1) * (1.0 / math.sqrt(dh))
        alpha = dc.segment_softmax(scores, dst, n)
        weighted = dc.reshape(alpha, (E, heads, 1)) * dc.reshape(V, (E, heads, dh))
        msg = dc.reshape(dc.segment_sum(weighted, dst, n), (n, D))
        out = h + dc.matmul(msg, params[f"{name}.o.W"])
    return dc.apply_layer_norm(out, params, f"{name}.ln")


def encode_nodes(bg: BatchedGraph, cfg: ModelConfig, params, prefix: str = "enc") -> Tensor:
    """Run input projection and graph layers; returns (num_slots, D) with placeholders."""
    D = cfg.hidden_dim
    placeholder = params[f"{prefix}.placeholder"]
    present = np.zeros((bg.num_slots, 1))
    present[bg.slots] = 1.0
    if bg.num_nodes == 0:
        return dc.broadcast_to(dc.reshape(placeholder, (1, D)), (bg.num_slots, D))
    h = dc.relu(dc.apply_linear(Tensor(bg.node_feats), params, f"{prefix}.in0"))
    h = dc.apply_linear(h, params, f"{prefix}.in1")
    for l in range(cfg.num_gat_layers):
        h = graph_attention_layer(
            h, cfg.num_heads, params, f"{prefix}.gat{l}", bg.aa_src, bg.aa_dst, bg.aa_feats, bg.al_dst, bg.al_feats
        )
    scattered = dc.segment_sum(h, bg.slots, bg.num_slots)
    return scattered + dc.reshape(placeholder, (1, D)) * Tensor(1.0 - present)


def encode_timestep(g: SceneGraph, num_agents: int, cfg: ModelConfig, params, prefix: str = "enc") -> Tensor:
    """Embedding d_t of shape (num_agents, D); absent agents get the learned placeholder."""
    return encode_nodes(batch_graphs([g], num_agents), cfg, params, prefix)


def encode_history(graphs: Sequence[SceneGraph], num_agents: int, cfg: ModelConfig, params, prefix: str = "enc") -> Tensor:
    """All timesteps in one batched pass; returns (t_h, num_agents, D)."""
    flat = encode_nodes(batch_graphs(graphs, num_agents), cfg, params, prefix)
    return dc.reshape(flat, (len(graphs), num_agents, cfg.hidden_dim))


# --------------------------------------------------------------------- PTA


@dataclass
class PastCache:
    k_p: int
    entries: deque = field(default_factory=deque)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, d: Tensor) -> None:
        self.entries.append(d)
        while len(self.entries) > self.k_p:
            self.entries.popleft()

    def window(self) -> list[Tensor]:
        return list(self.entries)


def pta(d_t: Tensor, cache: PastCache, t: int, cfg: ModelConfig, params, prefix: str = "pta") -> Tensor:
    """Past-time attention for step ``t``; pushes ``d_t`` into ``cache`` afterwards."""
    k_p = cache.k_p
    if len(cache) != min(t, k_p):
        raise CacheStateError(f"cache holds {len(cache)} entries at t={t}, expected {min(t, k_p)}")
    if t >= k_p and cfg.pta:
        N, D = d_t.shape
        past = dc.stack(cache.window(), axis=1)  # (N, k_p, D)
        current = dc.repeat(dc.reshape(d_t, (N, 1, D)), k_p, axis=1)
        if cfg.pta_query == "current":
            att = dc.multi_head_attention(current, past, cfg.num_heads, params, f"{prefix}.attn.")
        else:
            att = dc.multi_head_attention(past, current, cfg.num_heads, params, f"{prefix}.attn.")
        pooled = dc.mean(att, axis=1)
        out = dc.apply_layer_norm(d_t + pooled, params, f"{prefix}.ln")
    else:
        out = dc.apply_linear(dc.relu(dc.apply_linear(d_t, params, f"{prefix}.mlp0")), params, f"{prefix}.mlp1")
    cache.push(d_t)
    return out


def temporal_summary(d_all: Tensor, cfg: ModelConfig, params, prefix: str = "pta") -> Tensor:
    """Run PTA over every step of a (t_h, N, D) history; returns E at the last step."""
    T = d_all.shape[0]
    cache = PastCache(cfg.k_p)
    out = None
    for t in range(T):
        d_t = d_all[t]
        if t < T - 1:
            # earlier outputs are not consumed downstream; only the cache matters
            if len(cache) != min(t, cfg.k_p):
                raise CacheStateError("cache out of sync")
            cache.push(d_t)
            continue
        out = pta(d_t, cache, t, cfg, params, prefix)
    return out
