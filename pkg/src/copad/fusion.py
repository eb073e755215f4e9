"""Early fusion of vehicle-side and infrastructure-side track sets.

Tracks are associated with a Hungarian assignment on endpoint distances,
matched pairs are merged with a constant-velocity Kalman filter, and
unmatched tracks from either side are carried through unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data_model import ObservedTrack, Scene, Source, TrackSet


class Provenance(str, Enum):
    VEHICLE_ONLY = "vehicle_only"
    INFRA_ONLY = "infra_only"
    FUSED = "fused"


@dataclass(frozen=True)
class CostMatrix:
    costs: np.ndarray  # (|V|, |I|), +inf where infeasible
    row_ids: tuple[int, ...]
    col_ids: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape

    def transpose(self) -> "CostMatrix":
        return CostMatrix(self.costs.T.copy(), self.col_ids, self.row_ids)


@dataclass(frozen=True)
class MatchResult:
    pairs: frozenset[tuple[int, int]]
    unmatched_vehicle: frozenset[int]
    unmatched_infra: frozenset[int]

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.pairs)


@dataclass(frozen=True)
class KalmanConfig:
    process_noise: float = 0.5  # (m/s^2)^2
    meas_noise_vehicle: float = 0.25  # m^2
    meas_noise_infra: float = 0.25  # m^2
    gate_m: float = 3.0  # per endpoint
    init_vel_var: float = 100.0  # (m/s)^2

    def __post_init__(self):
        for name in ("process_noise", "meas_noise_vehicle", "meas_noise_infra", "gate_m", "init_vel_var"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class FusedTrackSet:
    tracks: TrackSet
    provenance: tuple[Provenance, ...]
    # (vehicle_track_id | None, infra_track_id | None) per output track
    parents: tuple[tuple[int | None, int | None], ...]
    match: MatchResult = field(compare=False)

    def __len__(self) -> int:
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks)


# ------------------------------------------------------------------- costs


def endpoint_cost(a: ObservedTrack, b: ObservedTrack) -> float:
    if a.class_label != b.class_label:
        return np.inf
    common = np.flatnonzero(a.valid & b.valid)
    if len(common) == 0:
        return np.inf
    first, last = common[0], common[-1]
    d_first = float(np.hypot(*(a.positions[first] - b.positions[first])))
    if first == last:
        return 2.0 * d_first
    return d_first + float(np.hypot(*(a.positions[last] - b.positions[last])))


def build_cost_matrix(vehicle: TrackSet, infra: TrackSet) -> CostMatrix:
    if vehicle.t_h != infra.t_h:
        raise ValueError(f"t_h mismatch: {vehicle.t_h} vs {infra.t_h}")
    costs = np.full((len(vehicle), len(infra)), np.inf)
    for i, a in enumerate(vehicle):
        for j, b in enumerate(infra):
            costs[i, j] = endpoint_cost(a, b)
    return CostMatrix(costs, tuple(t.track_id for t in vehicle), tuple(t.track_id for t in infra))


# -------------------------------------------------------------- assignment


def linear_assignment(costs: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(n, m) rows to columns.

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(n^2 m). Entries must be finite.
    """
    costs = np.asarray(costs, dtype=np.float64)
    n, m = costs.shape
    if n == 0 or m == 0:
        return []
    if n > m:
        return [(r, c) for c, r in linear_assignment(costs.T)]

    # 1-based arrays; column 0 is a virtual start
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = costs[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    return sorted((int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j] != 0)


def hungarian_assign(c: CostMatrix, gate: float = 3.0) -> MatchResult:
    """Optimal matching over feasible pairs; pairs costing more than 2*gate are dropped."""
    if not gate > 0:
        raise ValueError("gate must be positive")
    costs = c.costs
    feasible = np.isfinite(costs)
    pairs: set[tuple[int, int]] = set()
    if feasible.any():
        # infeasible entries priced above any feasible total, so the solver
        # prefers more feasible pairs and never returns one unless forced
        big = float(costs[feasible].sum()) + 1.0
        big = max(big, 1.0) * (min(costs.shape) + 1)
        work = np.where(feasible, costs, big)
        for r, col in linear_assignment(work):
            if feasible[r, col] and costs[r, col] <= 2.0 * gate:
                pairs.add((c.row_ids[r], c.col_ids[col]))
    matched_v = {p[0] for p in pairs}
    matched_i = {p[1] for p in pairs}
    return MatchResult(
        frozenset(pairs),
        frozenset(set(c.row_ids) - matched_v),
        frozenset(set(c.col_ids) - matched_i),
    )


# -------------------------------------------------------------------- Kalman


def cv_model(dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant-velocity transition and white-acceleration process noise for [x, y, vx, vy]."""
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    q1 = q * np.array([[dt**4 / 4, dt**3 / 2], [dt**3 / 2, dt**2]])
    Q = np.zeros((4, 4))
    Q[np.ix_([0, 2], [0, 2])] = q1
    Q[np.ix_([1, 3], [1, 3])] = q1
    return F, Q


_H = np.hstack([np.eye(2), np.zeros((2, 2))])


def kalman_filter_positions(
    measurements: list[list[tuple[np.ndarray, float]]],
    dt: float,
    q: float,
    init_vel_var: float = 100.0,
) -> np.ndarray:
    """Forward filter over per-step lists of (position, variance) measurements.

    The position prior is flat until the first step with data; that step
    yields the precision-weighted mean of its measurements. Returns filtered
    positions, NaN before the first measurement.
    """
    F, Q = cv_model(dt, q)
    T = len(measurements)
    out = np.full((T, 2), np.nan)
    x = None
    P = None
    for t, meas in enumerate(measurements):
        if x is not None:
            x = F @ x
            P = F @ P @ F.T + Q
        for z, r in meas:
            if x is None:
                w = np.array([1.0 / rr for _, rr in meas])
                zs = np.array([zz for zz, _ in meas])
                pos = (w[:, None] * zs).sum(axis=0) / w.sum()
                x = np.array([pos[0], pos[1], 0.0, 0.0])
                P = np.diag([1.0 / w.sum()] * 2 + [init_vel_var] * 2)
                break
            S = _H @ P @ _H.T + r * np.eye(2)
            K = P @ _H.T @ np.linalg.inv(S)
            x = x + K @ (z - _H @ x)
            P = (np.eye(4) - K @ _H) @ P
            P = 0.5 * (P + P.T)
        if x is not None:
            out[t] = x[:2]
    return out


def kalman_fuse_pair(a: ObservedTrack, b: ObservedTrack, cfg: KalmanConfig, dt: float = 0.1, track_id: int | None = None) -> ObservedTrack:
    """Fuse a vehicle-side track ``a`` with an infrastructure-side track ``b``."""
    if a.t_h != b.t_h:
        raise ValueError("tracks differ in length")
    union = a.valid | b.valid
    if not union.any():
        raise ValueError("no valid step in either track")
    meas = []
    for t in range(a.t_h):
        step = []
        if a.valid[t]:
            step.append((a.positions[t], cfg.meas_noise_vehicle))
        if b.valid[t]:
            step.append((b.positions[t], cfg.meas_noise_infra))
        meas.append(step)
    pos = kalman_filter_positions(meas, dt, cfg.process_noise, cfg.init_vel_var)
    pos = np.where(union[:, None], pos, 0.0)
    return ObservedTrack(
        track_id=a.track_id if track_id is None else track_id,
        class_label=a.class_label,
        positions=pos,
        valid=union,
        source=Source.FUSED,
    )


def early_fuse(scene: Scene, cfg: KalmanConfig | None = None) -> FusedTrackSet:
    cfg = cfg or KalmanConfig()
    V, I = scene.vehicle_tracks, scene.infra_tracks
    match = hungarian_assign(build_cost_matrix(V, I), cfg.gate_m)
    vmap, imap = V.by_id(), I.by_id()

    tracks, prov, parents = [], [], []
    for vid, iid in match.sorted_pairs():
        tracks.append(kalman_fuse_pair(vmap[vid], imap[iid], cfg, scene.dt, track_id=len(tracks)))
        prov.append(Provenance.FUSED)
        parents.append((vid, iid))
    for vid in sorted(match.unmatched_vehicle):
        t = vmap[vid]
        tracks.append(ObservedTrack(len(tracks), t.class_label, t.positions, t.valid, Source.FUSED))
        prov.append(Provenance.VEHICLE_ONLY)
        parents.append((vid, None))
    for iid in sorted(match.unmatched_infra):
        t = imap[iid]
        tracks.append(ObservedTrack(len(tracks), t.class_label, t.positions, t.valid, Source.FUSED))
        prov.append(Provenance.INFRA_ONLY)
        parents.append((None, iid))
    return FusedTrackSet(TrackSet(tuple(tracks), scene.t_h, scene.dt), tuple(prov), tuple(parents), match)


def single_view(scene: Scene, source: Source) -> FusedTrackSet:
    """Pass one view through unchanged, in the same container as early_fuse."""
    ts = scene.vehicle_tracks if source == Source.VEHICLE else scene.infra_tracks
    prov = Provenance.VEHICLE_ONLY if source == Source.VEHICLE else Provenance.INFRA_ONLY
    tracks, parents = [], []
    for t in sorted(ts, key=lambda t: t.track_id):
        tracks.append(ObservedTrack(len(tracks), t.class_label, t.positions, t.valid, Source.FUSED))
        parents.append((t.track_id, None) if source == Source.VEHICLE else (None, t.track_id))
    ids = frozenset(t.track_id for t in ts)
    match = MatchResult(
        frozenset(),
        ids if source == Source.VEHICLE else frozenset(),
        ids if source == Source.INFRA else frozenset(),
    )
    return FusedTrackSet(TrackSet(tuple(tracks), scene.t_h, scene.dt), (prov,) * len(tracks), tuple(parents), match)


def fused_agent_ids(scene: Scene, fused: FusedTrackSet) -> list[int | None]:
    """Global agent id for every fused track (vehicle parent wins on conflict)."""
    out = []
    for vid, iid in fused.parents:
        gid = None
        if vid is not None:
            gid = scene.agent_id(Source.VEHICLE, vid)
        if gid is None and iid is not None:
            gid = scene.agent_id(Source.INFRA, iid)
        out.append(gid)
    return out


def match_quality(scene: Scene, match: MatchResult) -> tuple[int, int, int]:
    """(true positive pairs, predicted pairs, ground-truth pairs) against gt_identity."""
    if scene.gt_identity is None:
        raise ValueError("scene has no gt_identity")
    gt_v = {tid: g for (src, tid), g in scene.gt_identity.items() if src == Source.VEHICLE}
    gt_i = {tid: g for (src, tid), g in scene.gt_identity.items() if src == Source.INFRA}
    vids = {t.track_id for t in scene.vehicle_tracks}
    iids = {t.track_id for t in scene.infra_tracks}
    inv_i = {g: tid for tid, g in gt_i.items() if tid in iids}
    truth = {(vid, inv_i[g]) for vid, g in gt_v.items() if vid in vids and g in inv_i}
    tp = sum(1 for p in match.pairs if p in truth)
    return tp, len(match.pairs), len(truth)
