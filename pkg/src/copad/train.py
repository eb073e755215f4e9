"""Training loop, evaluation and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .config import ModelConfig, RunConfig, config_to_dict, model_from_dict
from .data_model import PredictionSet, Scene
from .diffcore import ParamStore
from .model import SceneInputs, forward, init_model, prepare_inputs, scene_loss
from .objective_metrics import MetricsReport, evaluate, merge_reports

CHECKPOINT_FORMAT = "copad-checkpoint/1"


class DivergenceError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainResult:
    store: ParamStore
    log: list[dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.log[0]["total"] if self.log else math.nan

    @property
    def final_loss(self) -> float:
        return self.log[-1]["total"] if self.log else math.nan


def train(
    scenes: Sequence[Scene],
    cfg: RunConfig,
    inputs: Sequence[SceneInputs] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    tc, mc = cfg.train, cfg.model
    store = init_model(mc, tc.seed)
    if inputs is None:
        inputs = [prepare_inputs(s, cfg, tc.view) for s in scenes]
    inputs = [inp for inp in inputs if inp.num_agents and inp.target_valid.any()]
    result = TrainResult(store)
    if tc.epochs == 0 or not inputs:
        return result
    per_epoch = math.ceil(len(inputs) / tc.batch_size)
    total = tc.epochs * per_epoch
    order_rng = np.random.default_rng([tc.seed, 1])
    drop_rng = np.random.default_rng([tc.seed, 2])
    step = 0
    for epoch in range(tc.epochs):
        order = order_rng.permutation(len(inputs))
        for b in range(per_epoch):
            batch = [inputs[i] for i in order[b * tc.batch_size : (b + 1) * tc.batch_size]]
            lr = dc.cosine_lr(step, total, tc.lr0)
            sums = {"cls": 0.0, "reg": 0.0, "anchor": 0.0, "total": 0.0}
            for inp in batch:
                out = forward(store, inp, mc, train=True, dropout=tc.dropout, rng=drop_rng)
                try:
                    lb = scene_loss(out, inp, mc, tc.alpha, tc.huber_delta, tc.reg_mode)
                except FloatingPointError as e:
                    raise DivergenceError(f"step {step}: {e}") from e
                dc.backward(lb.total * (1.0 / len(batch)))
                for k, v in lb.as_floats().items():
                    if k in sums:
                        sums[k] += v / len(batch)
            if not all(math.isfinite(v) for v in sums.values()):
                raise DivergenceError(f"step {step}: non-finite loss {sums}")
            dc.adamw_step(store, lr, tc.weight_decay, allow_missing=True)
            record = {"step": step, "epoch": epoch, "lr": lr, **sums}
            result.log.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
    return result


def predict(store: ParamStore, inp: SceneInputs, cfg: ModelConfig) -> PredictionSet:
    out = forward(store, inp, cfg, train=False)
    return out.decoded.prediction_set([-1 if a is None else a for a in inp.agent_ids])


def evaluate_inputs(
    store: ParamStore,
    inputs: Sequence[SceneInputs],
    cfg: ModelConfig,
    threshold: float = 2.0,
    oracle: bool = False,
) -> MetricsReport:
    """Pool focal-agent metrics over scenes. ``oracle`` substitutes ground truth for every mode."""
    reports = []
    for inp in inputs:
        rows = inp.focal_rows
        if rows is None or len(rows) == 0:
            continue
        if oracle:
            traj = np.broadcast_to(inp.target_world[None], (cfg.num_modes,) + inp.target_world.shape)
        else:
            traj = predict(store, inp, cfg).trajectories
        reports.append(evaluate(traj[:, rows], inp.target_world[rows], inp.target_valid[rows], threshold))
    return merge_reports(reports)


# -------------------------------------------------------------- checkpoints


def checkpoint_dict(store: ParamStore, cfg: RunConfig) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": config_to_dict(cfg),
        "step": store.step,
        "params": {
            name: {
                "shape": list(store.params[name].shape),
                "values": store.params[name].data.ravel().tolist(),
                "m": store.m[name].ravel().tolist(),
                "v": store.v[name].ravel().tolist(),
            }
            for name in store.names()
        },
    }


def save_checkpoint(store: ParamStore, cfg: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(store, cfg), fh, separators=(",", ":"), sort_keys=True)


def load_checkpoint(path: str | os.PathLike) -> tuple[ParamStore, RunConfig]:
    from .config import config_from_dict

    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {data.get('format')!r}")
    cfg = config_from_dict(data["config"])
    store = init_model(cfg.model, cfg.train.seed)
    if set(store.names()) != set(data["params"]):
        raise CheckpointError(f"{path}: parameter names do not match the stored model config")
    for name, rec in data["params"].items():
        shape = tuple(rec["shape"])
        if store.params[name].shape != shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        store.params[name].data = np.array(rec["values"], dtype=np.float64).reshape(shape)
        store.m[name] = np.array(rec["m"], dtype=np.float64).reshape(shape)
        store.v[name] = np.array(rec["v"], dtype=np.float64).reshape(shape)
    store.step = int(data["step"])
    return store, cfg


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
