"""Seeded synthetic V2X scenes with two imperfect observation views."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data_model import (
    ClassLabel,
    FutureTrack,
    ObservedTrack,
    Scene,
    SignalState,
    Source,
    TrackSet,
    TurnFlag,
    VectorMap,
    write_scenes,
)

LANE_WIDTH = 3.5
ROAD_HALF_LENGTH = 90.0
STOP_LINE = 2 * LANE_WIDTH + 3.0
SEGMENT_LENGTH = 10.0
MAX_ATTEMPTS = 50


@dataclass(frozen=True)
class WorldConfig:
    num_agents: tuple[int, int] = (4, 8)
    speed: tuple[float, float] = (4.0, 12.0)
    layout: str = "four_way_intersection"  # or "straight_road"
    sigma_V: float = 0.2
    sigma_I: float = 0.2
    dropout_V: float = 0.0
    dropout_I: float = 0.0
    # (center_deg, width_deg) blind sector around the sensor origin, or None
    occlusion_V: tuple[float, float] | None = None
    occlusion_I: tuple[float, float] | None = None
    sensor_origin_V: tuple[float, float] = (-30.0, -LANE_WIDTH / 2)
    sensor_origin_I: tuple[float, float] = (STOP_LINE + 2.0, STOP_LINE + 2.0)
    min_separation_m: float = 5.0
    turn_prob: float = 0.3
    pedestrian_frac: float = 0.0
    cyclist_frac: float = 0.0
    t_h: int = 10
    t_f: int = 10
    dt: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.layout not in ("straight_road", "four_way_intersection"):
            raise ValueError(f"layout: unknown {self.layout!r}")
        for name in ("dropout_V", "dropout_I", "turn_prob", "pedestrian_frac", "cyclist_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name}: must be a probability")
        if self.sigma_V < 0 or self.sigma_I < 0:
            raise ValueError("sigma: must be nonnegative")
        if self.t_h < 1 or self.t_f < 1:
            raise ValueError("t_h, t_f: must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt: must be positive")
        lo, hi = self.num_agents
        if not 1 <= lo <= hi:
            raise ValueError("num_agents: need 1 <= min <= max")
        if not 0 <= self.speed[0] <= self.speed[1]:
            raise ValueError("speed: need 0 <= min <= max")


# ------------------------------------------------------------------ geometry


@dataclass
class Lane:
    lane_id: int
    points: np.ndarray  # polyline (K, 2)
    signal: SignalState = SignalState.NONE
    turn: TurnFlag = TurnFlag.STRAIGHT
    successors: list[int] = field(default_factory=list)


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _line(a, b, step: float = SEGMENT_LENGTH) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
    return a + np.linspace(0.0, 1.0, n + 1)[:, None] * (b - a)


def _arc(start, end, heading_in: float, turn: str, n: int = 6) -> np.ndarray:
    """Quarter circle from ``start`` to ``end`` entering along ``heading_in``."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    d = end - start
    fwd = np.array([math.cos(heading_in), math.sin(heading_in)])
    left = np.array([-fwd[1], fwd[0]])
    sign = 1.0 if turn == "left" else -1.0
    radius = abs(float(d @ left))
    center = start + sign * radius * left
    a0 = math.atan2(*(start - center)[::-1])
    angles = a0 + sign * np.linspace(0.0, math.pi / 2, n + 1)
    return center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def straight_road() -> list[Lane]:
    lanes = []
    L = ROAD_HALF_LENGTH
    for k, y in enumerate((-1.5 * LANE_WIDTH, -0.5 * LANE_WIDTH)):
        lanes.append(Lane(k, _line((-L, y), (L, y))))
    for k, y in enumerate((0.5 * LANE_WIDTH, 1.5 * LANE_WIDTH)):
        lanes.append(Lane(2 + k, _line((L, y), (-L, y))))
    return lanes


def four_way_intersection() -> list[Lane]:
    """Two crossing two-lane-per-direction roads with static signal phases."""
    L, S, w = ROAD_HALF_LENGTH, STOP_LINE, LANE_WIDTH
    lanes: list[Lane] = []
    exits: dict[tuple[int, int], int] = {}
    # approach k heads along angle k*pi/2 toward the centre; inbound lanes sit right of the centre line
    for k in range(4):
        R = _rot(k * math.pi / 2)
        for j, off in enumerate((0.5 * w, 1.5 * w)):
            out_pts = np.array([(S, -off), (L, -off)]) @ R.T
            lane = Lane(len(lanes), _line(*out_pts))
            exits[(k, j)] = lane.lane_id
            lanes.append(lane)
    approaches: dict[tuple[int, int], int] = {}
    for k in range(4):
        R = _rot(k * math.pi / 2)
        signal = SignalState.GREEN if k % 2 == 0 else SignalState.RED
        for j, off in enumerate((-0.5 * w, -1.5 * w)):
            pts = np.array([(-L, off), (-S, off)]) @ R.T
            turn = TurnFlag.STRAIGHT_OR_TURN if j == 0 else TurnFlag.STRAIGHT
            lane = Lane(len(lanes), _line(*pts), signal=signal, turn=turn)
            approaches[(k, j)] = lane.lane_id
            lanes.append(lane)
    for k in range(4):
        R = _rot(k * math.pi / 2)
        heading = k * math.pi / 2
        for j, off in enumerate((-0.5 * w, -1.5 * w)):
            start = np.array([-S, off]) @ R.T
            straight_end = np.array([S, off]) @ R.T
            conn = Lane(len(lanes), _line(start, straight_end, step=5.0), turn=TurnFlag.STRAIGHT)
            conn.successors = [_exit_aligned(lanes, exits, straight_end)]
            lanes.append(conn)
            lanes[approaches[(k, j)]].successors.append(conn.lane_id)
        # left turn from inner lane, right turn from outer lane
        start = np.array([-S, -0.5 * w]) @ R.T
        end = np.array([0.5 * w, S]) @ R.T
        conn = Lane(len(lanes), _arc(start, end, heading, "left", n=8), turn=TurnFlag.LEFT)
        conn.successors = [_exit_aligned(lanes, exits, end)]
        lanes.append(conn)
        lanes[approaches[(k, 0)]].successors.append(conn.lane_id)
        start = np.array([-S, -1.5 * w]) @ R.T
        end = np.array([-1.5 * w, -S]) @ R.T
        conn = Lane(len(lanes), _arc(start, end, heading, "right", n=4), turn=TurnFlag.RIGHT)
        conn.successors = [_exit_aligned(lanes, exits, end)]
        lanes.append(conn)
        lanes[approaches[(k, 1)]].successors.append(conn.lane_id)
    return lanes


def _exit_aligned(lanes: list[Lane], exits: dict, point: np.ndarray) -> int:
    best = min(exits.values(), key=lambda lid: np.linalg.norm(lanes[lid].points[0] - point))
    return best


def build_layout(name: str) -> list[Lane]:
    return straight_road() if name == "straight_road" else four_way_intersection()


def lanes_to_map(lanes: Sequence[Lane]) -> VectorMap:
    ends, ids, sig, turn = [], [], [], []
    for lane in lanes:
        for a, b in zip(lane.points[:-1], lane.points[1:]):
            ends.append([a, b])
            ids.append(lane.lane_id)
            sig.append(lane.signal)
            turn.append(lane.turn)
    return VectorMap(np.array(ends).reshape(-1, 2, 2), np.array(ids, dtype=np.int64), tuple(sig), tuple(turn))


def _route(lanes: list[Lane], rng: np.random.Generator, turn_prob: float) -> np.ndarray:
    """Concatenate a lane and its successors into one driving polyline."""
    entries = [l for l in lanes if l.successors] or lanes
    starts = [l for l in entries if l.turn in (TurnFlag.STRAIGHT, TurnFlag.STRAIGHT_OR_TURN) and l.signal != SignalState.NONE]
    lane = starts[rng.integers(len(starts))] if starts else entries[rng.integers(len(entries))]
    pts = [lane.points]
    while lane.successors:
        succ = [lanes[i] for i in lane.successors]
        turns = [s for s in succ if s.turn in (TurnFlag.LEFT, TurnFlag.RIGHT)]
        straight = [s for s in succ if s not in turns]
        if turns and (not straight or rng.random() < turn_prob):
            lane = turns[rng.integers(len(turns))]
        else:
            lane = straight[rng.integers(len(straight))]
        pts.append(lane.points[1:])
    return np.concatenate(pts, axis=0)


def _sample_along(poly: np.ndarray, s: np.ndarray) -> np.ndarray:
    seg = np.diff(poly, axis=0)
    seglen = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    s = np.clip(s, 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / np.where(seglen[idx] > 0, seglen[idx], 1.0)
    return poly[idx] + frac[:, None] * seg[idx]


def _polyline_length(poly: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(poly, axis=0), axis=1).sum())


# -------------------------------------------------------------------- views


def _occluded(points: np.ndarray, origin, sector) -> np.ndarray:
    if sector is None:
        return np.zeros(len(points), dtype=bool)
    center, width = sector
    d = points - np.asarray(origin, float)
    ang = np.degrees(np.arctan2(d[:, 1], d[:, 0]))
    diff = (ang - center + 180.0) % 360.0 - 180.0
    return np.abs(diff) <= width / 2.0


def _view_mask(rng, truth_h: np.ndarray, dropout: float, origin, sector) -> np.ndarray:
    T = len(truth_h)
    keep = rng.random(T) >= dropout
    keep[0] = True  # first step is exempt from dropout
    return keep & ~_occluded(truth_h, origin, sector)


def _try_generate(cfg: WorldConfig, rng: np.random.Generator) -> tuple[Scene, dict[int, np.ndarray]] | None:
    lanes = build_layout(cfg.layout)
    T = cfg.t_h + cfg.t_f
    n_target = int(rng.integers(cfg.num_agents[0], cfg.num_agents[1] + 1))
    truths: list[np.ndarray] = []
    classes: list[ClassLabel] = []
    for _ in range(n_target):
        for _attempt in range(MAX_ATTEMPTS):
            r = rng.random()
            if r < cfg.pedestrian_frac:
                cls, speed = ClassLabel.PEDESTRIAN, rng.uniform(0.8, 2.0)
                side = rng.choice([-1.0, 1.0]) * (2 * LANE_WIDTH + 2.0)
                poly = _line((-ROAD_HALF_LENGTH, side), (ROAD_HALF_LENGTH, side))
                if rng.random() < 0.5:
                    poly = poly[::-1]
            else:
                cls = ClassLabel.CYCLIST if r < cfg.pedestrian_frac + cfg.cyclist_frac else ClassLabel.VEHICLE
                lo, hi = cfg.speed if cls == ClassLabel.VEHICLE else (3.0, 6.0)
                speed = rng.uniform(lo, hi)
                poly = _route(lanes, rng, cfg.turn_prob)
            travel = speed * cfg.dt * (T - 1)
            length = _polyline_length(poly)
            if length <= travel:
                continue
            # start so that the history spans the area around the intersection
            s_lo = max(0.0, length / 2 - ROAD_HALF_LENGTH / 2 - travel)
            s_hi = min(length - travel, length / 2 + 5.0)
            if s_hi <= s_lo:
                s_lo, s_hi = 0.0, length - travel
            s0 = rng.uniform(s_lo, s_hi)
            path = _sample_along(poly, s0 + speed * cfg.dt * np.arange(T))
            if truths and cfg.min_separation_m > 0:
                others = np.stack(truths)[:, : cfg.t_h]
                gaps = np.linalg.norm(others - path[None, : cfg.t_h], axis=-1)
                if gaps.min() < cfg.min_separation_m:
                    continue
            truths.append(path)
            classes.append(cls)
            break
    if not truths:
        return None

    n = len(truths)
    views = {}
    masks = {}
    for src, sigma, drop, origin, sector in (
        (Source.VEHICLE, cfg.sigma_V, cfg.dropout_V, cfg.sensor_origin_V, cfg.occlusion_V),
        (Source.INFRA, cfg.sigma_I, cfg.dropout_I, cfg.sensor_origin_I, cfg.occlusion_I),
    ):
        ms = np.stack([_view_mask(rng, tr[: cfg.t_h], drop, origin, sector) for tr in truths])
        noise = rng.normal(0.0, 1.0, (n, cfg.t_h, 2)) * sigma
        views[src] = np.stack([tr[: cfg.t_h] for tr in truths]) + noise
        masks[src] = ms
    if not (masks[Source.VEHICLE] | masks[Source.INFRA]).any(axis=1).all():
        return None

    gt: dict[tuple[Source, int], int] = {}
    sets = {}
    for src in (Source.VEHICLE, Source.INFRA):
        ids = rng.permutation(10 * n + 10)[:n]
        tracks = []
        for a in range(n):
            m = masks[src][a]
            if not m.any():
                continue
            pos = np.where(m[:, None], views[src][a], 0.0)
            tracks.append(ObservedTrack(int(ids[a]), classes[a], pos, m, src))
            gt[(src, int(ids[a]))] = a
        tracks.sort(key=lambda t: t.track_id)
        sets[src] = TrackSet(tuple(tracks), cfg.t_h, cfg.dt)

    futures = {a: FutureTrack(truths[a][cfg.t_h :], np.ones(cfg.t_f, dtype=bool)) for a in range(n)}
    focal = tuple(a for a in range(n) if masks[Source.VEHICLE][a].any())
    scene = Scene(
        scene_id=f"synth-{cfg.seed:06d}",
        vehicle_tracks=sets[Source.VEHICLE],
        infra_tracks=sets[Source.INFRA],
        map=lanes_to_map(lanes),
        futures=futures,
        gt_identity=gt,
        focal_ids=focal,
    )
    return scene, {a: truths[a] for a in range(n)}


def generate_scene_with_truth(cfg: WorldConfig) -> tuple[Scene, dict[int, np.ndarray]]:
    """Scene plus each agent's noiseless (t_h + t_f, 2) path, keyed by agent id."""
    for attempt in range(1000):
        rng = np.random.default_rng([cfg.seed, attempt])
        out = _try_generate(cfg, rng)
        if out is not None:
            return out
    raise RuntimeError(f"could not generate a feasible scene for seed {cfg.seed}")


def generate_scene(cfg: WorldConfig) -> Scene:
    """One scene, deterministic in ``cfg.seed``; infeasible draws are redrawn from a sub-stream."""
    return generate_scene_with_truth(cfg)[0]


def generate_dataset(cfg: WorldConfig, count: int, path: str | os.PathLike) -> None:
    if count < 1:
        raise ValueError("count must be >= 1")
    write_scenes((generate_scene(replace(cfg, seed=cfg.seed + i)) for i in range(count)), path)


def generate_scenes(cfg: WorldConfig, count: int) -> list[Scene]:
    return [generate_scene(replace(cfg, seed=cfg.seed + i)) for i in range(count)]
