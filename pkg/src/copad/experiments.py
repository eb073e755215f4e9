"""Ablation sweeps and paired evaluations shared by the CLI and scripts."""
from __future__ import annotations

import itertools
from dataclasses import replace
from typing import Callable, Iterable, Sequence

from .config import FUSION_VARIANTS, RunConfig
from .data_model import Scene
from .synth import WorldConfig
from .model import prepare_inputs
from .objective_metrics import MetricsReport
from .train import evaluate_inputs, train

ABLATION_AXES = {
    "fusion": FUSION_VARIANTS,
    "pta": (True, False),
    "mode_attention": (True, False),
    "num_anchors": (0, 1, 2, 3),
}


def ablation_grid(axes: dict[str, Sequence] | None = None) -> list[dict]:
    """Cartesian product of the ablation axes, in axis order."""
    axes = {**ABLATION_AXES, **(axes or {})}
    unknown = set(axes) - set(ABLATION_AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes {sorted(unknown)}")
    names = list(ABLATION_AXES)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def train_and_evaluate(
    cfg: RunConfig,
    train_scenes: Sequence[Scene],
    test_scenes: Sequence[Scene],
    views: Iterable[str] = ("cooperative",),
) -> dict[str, MetricsReport]:
    """Train once under ``cfg`` and evaluate the same weights under each view."""
    result = train(train_scenes, cfg)
    out = {}
    for view in views:
        inputs = [prepare_inputs(s, cfg, view) for s in test_scenes]
        out[view] = evaluate_inputs(result.store, inputs, cfg.model, cfg.eval.miss_threshold_m)
    return out


def run_ablation(
    cfg: RunConfig,
    train_scenes: Sequence[Scene],
    test_scenes: Sequence[Scene],
    axes: dict[str, Sequence] | None = None,
    on_row: Callable[[dict], None] | None = None,
) -> list[dict]:
    rows = []
    for setting in ablation_grid(axes):
        run = replace(cfg, model=replace(cfg.model, **setting))
        report = train_and_evaluate(run, train_scenes, test_scenes, (cfg.eval.view,))[cfg.eval.view]
        row = {**setting, **{k: v for k, v in report.to_json().items() if k in ("minADE", "minFDE", "MR", "num_agents")}}
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    """Plain-text table with one ablation setting per line."""
    head = f"{'fusion':<20} {'PTA':<4} {'MA':<4} {'anchors':<8} {'minADE':>8} {'minFDE':>8} {'MR':>6}"
    lines = [head, "-" * len(head)]
    tick = lambda b: "x" if b else "-"
    for r in rows:
        lines.append(
            f"{r['fusion']:<20} {tick(r['pta']):<4} {tick(r['mode_attention']):<4} {r['num_anchors']:<8d}"
            f" {r['minADE']:>8.3f} {r['minFDE']:>8.3f} {r['MR']:>6.3f}"
        )
    return "\n".join(lines)


def occlusion_heavy(cfg: WorldConfig) -> WorldConfig:
    """Vehicle view with a wide blind sector and heavy dropout; clean infrastructure view."""
    return replace(cfg, occlusion_V=(20.0, 60.0), dropout_V=0.6, dropout_I=0.1, turn_prob=0.3)


def cooperative_trend(cfg: RunConfig, train_scenes: Sequence[Scene], test_scenes: Sequence[Scene]) -> dict[str, MetricsReport]:
    """Paired comparison on the same test agents.

    ``cooperative`` / ``vehicle-only``: one KF model evaluated with and without
    the infrastructure view. ``kf`` / ``none``: separately trained models with
    early fusion and with vehicle-view input only, both given all data they use.
    """
    kf = replace(cfg, model=replace(cfg.model, fusion="kf"))
    none = replace(cfg, model=replace(cfg.model, fusion="none"))
    out = train_and_evaluate(kf, train_scenes, test_scenes, ("cooperative", "vehicle-only"))
    out["kf"] = out["cooperative"]
    out["none"] = train_and_evaluate(none, train_scenes, test_scenes)["cooperative"]
    return out
