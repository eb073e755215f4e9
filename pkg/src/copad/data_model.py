"""Scenes, tracks, maps and predictions, plus the JSON-lines scene format."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np


class ValidationError(ValueError):
    pass


class SceneParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ClassLabel(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"
    OTHER = "other"


class Source(str, Enum):
    VEHICLE = "vehicle_view"
    INFRA = "infrastructure_view"
    FUSED = "fused"


class SignalState(str, Enum):
    NONE = "none"
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"


class TurnFlag(str, Enum):
    STRAIGHT = "straight"
    LEFT = "left"
    RIGHT = "right"
    STRAIGHT_OR_TURN = "straight_or_turn"


CLASS_LABELS = list(ClassLabel)
SIGNAL_STATES = list(SignalState)
TURN_FLAGS = list(TurnFlag)


def _readonly(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObservedTrack:
    track_id: int
    class_label: ClassLabel
    positions: np.ndarray  # (t_h, 2)
    valid: np.ndarray  # (t_h,) bool
    source: Source

    def __post_init__(self):
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))
        object.__setattr__(self, "source", Source(self.source))
        pos = _readonly(self.positions, np.float64).reshape(-1, 2)
        valid = _readonly(self.valid, bool)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "valid", valid)
        if valid.ndim != 1 or len(valid) != len(pos):
            raise ValidationError(
                f"track {self.track_id}: valid mask length {valid.shape} != positions length {len(pos)}"
            )
        if not valid.any():
            raise ValidationError(f"track {self.track_id}: no valid timestep")
        if not np.isfinite(pos[valid]).all():
            raise ValidationError(f"track {self.track_id}: non-finite position at a valid step")

    @property
    def t_h(self) -> int:
        return len(self.valid)

    def valid_steps(self) -> np.ndarray:
        return np.flatnonzero(self.valid)

    def __eq__(self, other):
        if not isinstance(other, ObservedTrack):
            return NotImplemented
        return (
            self.track_id == other.track_id
            and self.class_label == other.class_label
            and self.source == other.source
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.positions[self.valid], other.positions[other.valid])
        )


@dataclass(frozen=True)
class TrackSet:
    tracks: tuple[ObservedTrack, ...]
    t_h: int
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        ids = [t.track_id for t in self.tracks]
        if len(set(ids)) != len(ids):
            raise ValidationError("tracks: duplicate track_id")
        for t in self.tracks:
            if t.t_h != self.t_h:
                raise ValidationError(f"tracks: track {t.track_id} has t_h={t.t_h}, set has {self.t_h}")
        if not self.dt > 0:
            raise ValidationError("dt: must be positive")

    def __len__(self) -> int:
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks)

    def by_id(self) -> dict[int, ObservedTrack]:
        return {t.track_id: t for t in self.tracks}


@dataclass(frozen=True, eq=False)
class VectorMap:
    """Lane segments: ``endpoints`` is (N_l, 2, 2); attributes are per segment."""

    endpoints: np.ndarray
    lane_ids: np.ndarray
    signal_states: tuple[SignalState, ...]
    turn_flags: tuple[TurnFlag, ...]

    def __post_init__(self):
        ends = _readonly(self.endpoints, np.float64).reshape(-1, 2, 2)
        object.__setattr__(self, "endpoints", ends)
        object.__setattr__(self, "lane_ids", _readonly(self.lane_ids, np.int64).reshape(-1))
        object.__setattr__(self, "signal_states", tuple(SignalState(s) for s in self.signal_states))
        object.__setattr__(self, "turn_flags", tuple(TurnFlag(s) for s in self.turn_flags))
        n = len(ends)
        if not (len(self.lane_ids) == len(self.signal_states) == len(self.turn_flags) == n):
            raise ValidationError("map: segment attribute lengths differ")
        if not np.isfinite(ends).all():
            raise ValidationError("map: non-finite segment endpoint")

    @classmethod
    def empty(cls) -> "VectorMap":
        return cls(np.zeros((0, 2, 2)), np.zeros(0, dtype=np.int64), (), ())

    def __len__(self) -> int:
        return len(self.endpoints)

    @property
    def midpoints(self) -> np.ndarray:
        return self.endpoints.mean(axis=1)

    @property
    def directions(self) -> np.ndarray:
        d = self.endpoints[:, 1] - self.endpoints[:, 0]
        n = np.linalg.norm(d, axis=1, keepdims=True)
        return np.divide(d, n, out=np.zeros_like(d), where=n > 0)

    def __eq__(self, other):
        if not isinstance(other, VectorMap):
            return NotImplemented
        return (
            np.array_equal(self.endpoints, other.endpoints)
            and np.array_equal(self.lane_ids, other.lane_ids)
            and self.signal_states == other.signal_states
            and self.turn_flags == other.turn_flags
        )


@dataclass(frozen=True, eq=False)
class FutureTrack:
    positions: np.ndarray  # (t_f, 2)
    valid: np.ndarray  # (t_f,)

    def __post_init__(self):
        pos = _readonly(self.positions, np.float64).reshape(-1, 2)
        valid = _readonly(self.valid, bool)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "valid", valid)
        if len(valid) != len(pos):
            raise ValidationError("futures: mask length differs from positions")
        if not np.isfinite(pos[valid]).all():
            raise ValidationError("futures: non-finite position at a valid step")

    def __eq__(self, other):
        if not isinstance(other, FutureTrack):
            return NotImplemented
        return np.array_equal(self.valid, other.valid) and np.array_equal(
            self.positions[self.valid], other.positions[other.valid]
        )


GtKey = tuple[Source, int]


@dataclass(frozen=True)
class Scene:
    scene_id: str
    vehicle_tracks: TrackSet
    infra_tracks: TrackSet
    map: VectorMap
    futures: Mapping[int, FutureTrack]
    gt_identity: Mapping[GtKey, int] | None = None
    focal_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "futures", dict(sorted(self.futures.items())))
        object.__setattr__(self, "focal_ids", tuple(self.focal_ids))
        if self.gt_identity is not None:
            object.__setattr__(
                self, "gt_identity", {(Source(s), int(i)): int(g) for (s, i), g in sorted(self.gt_identity.items())}
            )
        if self.vehicle_tracks.dt != self.infra_tracks.dt:
            raise ValidationError("dt: vehicle and infrastructure sampling intervals differ")
        if self.vehicle_tracks.t_h != self.infra_tracks.t_h:
            raise ValidationError("t_h: vehicle and infrastructure history lengths differ")
        lengths = {len(f.valid) for f in self.futures.values()}
        if len(lengths) > 1:
            raise ValidationError("futures: t_f differs across agents")
        for fid in self.focal_ids:
            if fid not in self.futures:
                raise ValidationError(f"focal_ids: agent {fid} has no future")

    @property
    def dt(self) -> float:
        return self.vehicle_tracks.dt

    @property
    def t_h(self) -> int:
        return self.vehicle_tracks.t_h

    @property
    def t_f(self) -> int:
        for f in self.futures.values():
            return len(f.valid)
        return 0

    def agent_id(self, source: Source, track_id: int) -> int | None:
        """Global agent id of a source-local track, if known."""
        if self.gt_identity is not None:
            return self.gt_identity.get((Source(source), track_id))
        if Source(source) == Source.VEHICLE:
            return track_id
        return None


@dataclass(frozen=True, eq=False)
class PredictionSet:
    trajectories: np.ndarray  # (F, N, t_f, 2)
    scores: np.ndarray  # (N, F)
    agent_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        traj = _readonly(self.trajectories, np.float64)
        scores = _readonly(self.scores, np.float64)
        object.__setattr__(self, "trajectories", traj)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "agent_ids", tuple(int(a) for a in self.agent_ids))
        if traj.ndim != 4 or traj.shape[-1] != 2:
            raise ValidationError(f"trajectories: expected F x N x t_f x 2, got {traj.shape}")
        F, N = traj.shape[:2]
        if scores.shape != (N, F):
            raise ValidationError(f"scores: expected {(N, F)}, got {scores.shape}")
        if not (np.isfinite(traj).all() and np.isfinite(scores).all()):
            raise ValidationError("trajectories: NaN or Inf entry")
        if (scores < 0).any() or (N and not np.allclose(scores.sum(axis=1), 1.0, atol=1e-6, rtol=0)):
            raise ValidationError("scores: rows must be nonnegative and sum to 1")
        if self.agent_ids and len(self.agent_ids) != N:
            raise ValidationError("agent_ids: length differs from N")

    @property
    def num_modes(self) -> int:
        return self.trajectories.shape[0]

    @property
    def num_agents(self) -> int:
        return self.trajectories.shape[1]


# --------------------------------------------------------------------- JSON IO


def _pts(a: np.ndarray, valid: np.ndarray | None = None) -> list[list[float]]:
    out = a.tolist()
    if valid is not None:
        # invalid content is unspecified; zero it so output is canonical
        out = [p if v else [0.0, 0.0] for p, v in zip(out, valid.tolist())]
    return out


def _mask(m: np.ndarray) -> list[int]:
    return [int(v) for v in m.tolist()]


def track_to_dict(t: ObservedTrack) -> dict:
    return {
        "track_id": t.track_id,
        "class": t.class_label.value,
        "positions": _pts(t.positions, t.valid),
        "valid": _mask(t.valid),
        "source": t.source.value,
    }


def track_from_dict(d: dict) -> ObservedTrack:
    return ObservedTrack(
        track_id=int(d["track_id"]),
        class_label=ClassLabel(d["class"]),
        positions=np.array(d["positions"], dtype=np.float64).reshape(-1, 2),
        valid=np.array(d["valid"], dtype=bool),
        source=Source(d["source"]),
    )


def map_to_dict(m: VectorMap) -> dict:
    return {
        "segments": [
            {
                "endpoints": m.endpoints[i].tolist(),
                "lane_id": int(m.lane_ids[i]),
                "signal_state": m.signal_states[i].value,
                "turn_flag": m.turn_flags[i].value,
            }
            for i in range(len(m))
        ]
    }


def map_from_dict(d: dict) -> VectorMap:
    segs = d["segments"]
    return VectorMap(
        endpoints=np.array([s["endpoints"] for s in segs], dtype=np.float64).reshape(-1, 2, 2),
        lane_ids=np.array([s["lane_id"] for s in segs], dtype=np.int64),
        signal_states=tuple(s["signal_state"] for s in segs),
        turn_flags=tuple(s["turn_flag"] for s in segs),
    )


def scene_to_dict(s: Scene) -> dict:
    return {
        "scene_id": s.scene_id,
        "dt": s.dt,
        "t_h": s.t_h,
        "t_f": s.t_f,
        "vehicle_tracks": [track_to_dict(t) for t in s.vehicle_tracks],
        "infra_tracks": [track_to_dict(t) for t in s.infra_tracks],
        "map": map_to_dict(s.map),
        "futures": [
            {"agent_id": aid, "positions": _pts(f.positions, f.valid), "valid": _mask(f.valid)}
            for aid, f in s.futures.items()
        ],
        "gt_identity": None
        if s.gt_identity is None
        else [
            {"source": src.value, "track_id": tid, "agent_id": gid} for (src, tid), gid in s.gt_identity.items()
        ],
        "focal_ids": list(s.focal_ids),
    }


_SCENE_KEYS = {"scene_id", "dt", "t_h", "t_f", "vehicle_tracks", "infra_tracks", "map", "futures", "gt_identity", "focal_ids"}


def scene_from_dict(d: dict) -> Scene:
    missing = _SCENE_KEYS - d.keys()
    if missing:
        raise ValidationError(f"missing keys: {sorted(missing)}")
    t_h, t_f, dt = int(d["t_h"]), int(d["t_f"]), float(d["dt"])
    vt = TrackSet(tuple(track_from_dict(t) for t in d["vehicle_tracks"]), t_h, dt)
    it = TrackSet(tuple(track_from_dict(t) for t in d["infra_tracks"]), t_h, dt)
    futures = {
        int(f["agent_id"]): FutureTrack(np.array(f["positions"], dtype=np.float64).reshape(-1, 2), np.array(f["valid"], dtype=bool))
        for f in d["futures"]
    }
    for aid, f in futures.items():
        if len(f.valid) != t_f:
            raise ValidationError(f"futures: agent {aid} has {len(f.valid)} steps, t_f={t_f}")
    gt = d["gt_identity"]
    gt_identity = None if gt is None else {(Source(g["source"]), int(g["track_id"])): int(g["agent_id"]) for g in gt}
    return Scene(
        scene_id=str(d["scene_id"]),
        vehicle_tracks=vt,
        infra_tracks=it,
        map=map_from_dict(d["map"]),
        futures=futures,
        gt_identity=gt_identity,
        focal_ids=tuple(int(i) for i in d["focal_ids"]),
    )


def dumps_scene(s: Scene) -> str:
    return json.dumps(scene_to_dict(s), separators=(",", ":"), sort_keys=True)


def write_scenes(scenes: Iterable[Scene], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            fh.write(dumps_scene(s))
            fh.write("\n")


def read_scenes(path: str | os.PathLike) -> list[Scene]:
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise SceneParseError(lineno, f"malformed JSON: {e.msg}") from e
            try:
                scenes.append(scene_from_dict(d))
            except ValidationError as e:
                raise ValidationError(f"line {lineno}: {e}") from e
            except (KeyError, TypeError, ValueError) as e:
                raise SceneParseError(lineno, f"invalid scene: {e!r}") from e
    return scenes


def scenes_equal(a: Scene, b: Scene) -> bool:
    return (
        a.scene_id == b.scene_id
        and a.dt == b.dt
        and a.vehicle_tracks == b.vehicle_tracks
        and a.infra_tracks == b.infra_tracks
        and a.map == b.map
        and dict(a.futures) == dict(b.futures)
        and a.gt_identity == b.gt_identity
        and a.focal_ids == b.focal_ids
    )


def prediction_to_dict(p: PredictionSet) -> dict:
    return {"trajectories": p.trajectories.tolist(), "scores": p.scores.tolist(), "agent_ids": list(p.agent_ids)}


def prediction_from_dict(d: dict) -> PredictionSet:
    return PredictionSet(np.array(d["trajectories"]), np.array(d["scores"]), tuple(d.get("agent_ids", ())))
