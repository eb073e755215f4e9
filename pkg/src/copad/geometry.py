"""Agent-centric coordinate frames."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data_model import ObservedTrack


@dataclass(frozen=True)
class RotationFrame:
    origin: np.ndarray  # (2,) last observed position
    heading: float  # radians

    @property
    def rotation(self) -> np.ndarray:
        """Maps agent-frame vectors to world-frame vectors."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, -s], [s, c]])

    def to_frame(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, float) - self.origin) @ self.rotation

    def from_frame(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, float) @ self.rotation.T + self.origin


def make_frame(track: ObservedTrack) -> RotationFrame:
    steps = track.valid_steps()
    origin = track.positions[steps[-1]].copy()
    heading = 0.0
    if len(steps) >= 2:
        d = track.positions[steps[-1]] - track.positions[steps[-2]]
        if np.any(d != 0):
            heading = math.atan2(d[1], d[0])
    return RotationFrame(origin, heading)


def stack_frames(frames) -> tuple[np.ndarray, np.ndarray]:
    """(N, 2) origins and (N, 2, 2) agent-to-world rotations."""
    frames = list(frames)
    if not frames:
        return np.zeros((0, 2)), np.zeros((0, 2, 2))
    return np.stack([f.origin for f in frames]), np.stack([f.rotation for f in frames])


def rotate_world(frames_rot: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Express world vectors ``vecs[..., i, :]`` in the frame of agent i (R_i^T v)."""
    return np.einsum("nji,...nj->...ni", frames_rot, vecs)
