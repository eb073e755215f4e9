"""SVG rendering of a scene with optional multi-modal predictions."""
from __future__ import annotations

import xml.etree.ElementTree as ET
from typing import Sequence

import numpy as np

from .data_model import PredictionSet, Scene
from .fusion import early_fuse, fused_agent_ids

LANE_COLOR = "#9e9e9e"
HISTORY_COLOR = "#2e7d32"
TRUTH_COLOR = "#c62828"
PRED_COLOR = "#1565c0"
MIN_OPACITY = 0.15


class PlotError(ValueError):
    pass


def _points(xy: np.ndarray) -> str:
    # SVG y grows downward; flip so the plot reads like a map
    return " ".join(f"{x:.3f},{-y:.3f}" for x, y in xy)


def _polyline(parent, xy, color, cls, width, opacity=1.0, agent=None):
    el = ET.SubElement(
        parent,
        "polyline",
        {
            "points": _points(xy),
            "fill": "none",
            "stroke": color,
            "stroke-width": f"{width:g}",
            "stroke-opacity": f"{opacity:.4f}",
            "class": cls,
        },
    )
    if agent is not None:
        el.set("data-agent", str(agent))
    return el


def render_svg(scene: Scene, pred: PredictionSet | None = None, width_px: int = 800) -> str:
    """Lanes, per-agent fused history and ground truth, and every predicted mode.

    Without a prediction all agents with a future are drawn. With one, only
    the predicted agents are drawn and each must exist in the scene.
    """
    fused = early_fuse(scene)
    history = {}
    for track, gid in zip(fused.tracks, fused_agent_ids(scene, fused)):
        if gid is not None and gid not in history:
            history[gid] = track.positions[track.valid]

    if pred is None or pred.num_agents == 0:
        agents: Sequence[int] = [a for a in scene.futures if a in history]
        rows: dict[int, int] = {}
    else:
        if not pred.agent_ids:
            raise PlotError("prediction carries no agent ids")
        agents = list(pred.agent_ids)
        for a in agents:
            if a not in history or a not in scene.futures:
                raise PlotError(f"agent {a} not found in scene {scene.scene_id}")
        rows = {a: r for r, a in enumerate(agents)}

    pts = [scene.map.endpoints.reshape(-1, 2)] if len(scene.map) else []
    for a in agents:
        f = scene.futures[a]
        pts += [history[a], f.positions[f.valid]]
        if a in rows:
            pts.append(pred.trajectories[:, rows[a]].reshape(-1, 2))
    allp = np.concatenate(pts) if pts else np.zeros((1, 2))
    lo, hi = allp.min(axis=0) - 5.0, allp.max(axis=0) + 5.0
    span = hi - lo
    height_px = int(round(width_px * span[1] / max(span[0], 1e-9)))

    svg = ET.Element(
        "svg",
        {
            "xmlns": "http://www.w3.org/2000/svg",
            "version": "1.1",
            "width": str(width_px),
            "height": str(max(height_px, 1)),
            "viewBox": f"{lo[0]:.3f} {-hi[1]:.3f} {span[0]:.3f} {span[1]:.3f}",
        },
    )
    ET.SubElement(svg, "title").text = f"scene {scene.scene_id}"
    lanes = ET.SubElement(svg, "g", {"id": "lanes"})
    for seg in scene.map.endpoints:
        _polyline(lanes, seg, LANE_COLOR, "lane", 0.4)
    layer = ET.SubElement(svg, "g", {"id": "agents"})
    for a in agents:
        g = ET.SubElement(layer, "g", {"data-agent": str(a)})
        f = scene.futures[a]
        _polyline(g, history[a], HISTORY_COLOR, "history", 0.6, agent=a)
        _polyline(g, f.positions[f.valid], TRUTH_COLOR, "truth", 0.6, agent=a)
        if a in rows:
            r = rows[a]
            top = pred.scores[r].max()
            for m in range(pred.num_modes):
                opacity = MIN_OPACITY + (1 - MIN_OPACITY) * pred.scores[r, m] / max(top, 1e-12)
                el = _polyline(g, pred.trajectories[m, r], PRED_COLOR, "prediction", 0.5, opacity, agent=a)
                el.set("data-mode", str(m))
                el.set("data-score", f"{pred.scores[r, m]:.6f}")
    ET.indent(svg)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(svg, encoding="unicode") + "\n"
