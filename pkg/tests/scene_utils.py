"""Scene transforms for equivariance tests."""
from __future__ import annotations

import math

import numpy as np

from copad.data_model import FutureTrack, ObservedTrack, Scene, TrackSet, VectorMap


def rotation(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def _rot_pts(pts: np.ndarray, R: np.ndarray) -> np.ndarray:
    return np.asarray(pts) @ R.T


def _rot_tracks(ts: TrackSet, R: np.ndarray, order=None) -> TrackSet:
    tracks = list(ts.tracks) if order is None else [ts.tracks[i] for i in order]
    return TrackSet(
        tuple(ObservedTrack(t.track_id, t.class_label, _rot_pts(t.positions, R), t.valid, t.source) for t in tracks),
        ts.t_h,
        ts.dt,
    )


def rotate_scene(scene: Scene, phi: float) -> Scene:
    """The same scene seen in a world frame rotated by ``phi`` about the origin."""
    R = rotation(phi)
    m = scene.map
    return Scene(
        scene.scene_id,
        _rot_tracks(scene.vehicle_tracks, R),
        _rot_tracks(scene.infra_tracks, R),
        VectorMap(_rot_pts(m.endpoints, R), m.lane_ids, m.signal_states, m.turn_flags),
        {k: FutureTrack(_rot_pts(f.positions, R), f.valid) for k, f in scene.futures.items()},
        scene.gt_identity,
        scene.focal_ids,
    )


def relabel_agents(scene: Scene, rng: np.random.Generator) -> tuple[Scene, dict[int, int]]:
    """Permute vehicle-side track ids (and their order); returns (scene, old_id -> new_id)."""
    tracks = list(scene.vehicle_tracks.tracks)
    ids = [t.track_id for t in tracks]
    new_ids = [int(i) for i in rng.permutation(ids)]
    mapping = dict(zip(ids, new_ids))
    order = rng.permutation(len(tracks))
    relabeled = TrackSet(
        tuple(
            ObservedTrack(mapping[tracks[i].track_id], tracks[i].class_label, tracks[i].positions, tracks[i].valid, tracks[i].source)
            for i in order
        ),
        scene.t_h,
        scene.dt,
    )
    gt = None
    if scene.gt_identity is not None:
        gt = {(src, mapping[tid] if src.value == "vehicle_view" else tid): g for (src, tid), g in scene.gt_identity.items()}
    return Scene(scene.scene_id, relabeled, scene.infra_tracks, scene.map, scene.futures, gt, scene.focal_ids), mapping
