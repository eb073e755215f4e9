"""Training losses and displacement metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data_model import PredictionSet
from .diffcore import Tensor

log = logging.getLogger(__name__)

MISS_THRESHOLD_M = 2.0
PROB_FLOOR = 1e-12


def best_mode(trajectories: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per agent, the mode with least mean L2 error over valid future steps.

    Returns (index, usable); agents without a valid step get index 0 and
    usable=False.
    """
    err = np.linalg.norm(trajectories - gt[None], axis=-1)  # (F, N, T)
    counts = valid.sum(axis=-1)
    usable = counts > 0
    ade = (err * valid[None]).sum(axis=-1) / np.maximum(counts, 1)[None]
    idx = np.argmin(ade, axis=0)
    return np.where(usable, idx, 0), usable


def _gather_best(x: Tensor, best: np.ndarray) -> Tensor:
    return x[best, np.arange(len(best))]


def laplace_nll(x: Tensor, mu: Tensor, b: Tensor) -> Tensor:
    """Elementwise -log Laplace(x | mu, b) = log(2b) + |x - mu| / b."""
    return dc.log(b * 2.0) + dc.abs_(x - mu) / b


def laplace_reg_loss(
    local: Tensor,
    scales: Tensor,
    target_local: np.ndarray,
    valid: np.ndarray,
    best: np.ndarray,
    scores: Tensor | None = None,
    mode: str = "wta",
) -> Tensor:
    """Mean over agents and valid steps of the 2-D Laplace NLL (coordinates summed).

    ``wta`` scores only each agent's best mode; ``mixture`` uses the full
    score-weighted mixture over modes.
    """
    F, N, T, _ = local.shape
    count = float(valid.sum())
    if count == 0:
        return Tensor(0.0)
    w = Tensor(valid.astype(float))
    tgt = Tensor(target_local)
    if mode == "wta":
        mu = _gather_best(local, best)  # (N, T, 2)
        b = dc.reshape(_gather_best(scales, best), (N, T, 1))
        nll = dc.sum_(laplace_nll(tgt, mu, b), axis=-1)
        return dc.sum_(nll * w) * (1.0 / count)
    if mode == "mixture":
        if scores is None:
            raise ValueError("mixture regression needs scores")
        b = dc.reshape(scales, (F, N, T, 1))
        nll = dc.sum_(laplace_nll(dc.reshape(tgt, (1, N, T, 2)), local, b), axis=-1)  # (F, N, T)
        traj_ll = -dc.sum_(nll * dc.reshape(w, (1, N, T)), axis=-1)  # (F, N)
        log_pi = dc.log(dc.clip_min(dc.transpose(scores, (1, 0)), PROB_FLOOR))
        lse = dc.logsumexp(dc.transpose(traj_ll + log_pi, (1, 0)), axis=-1)  # (N,)
        has = Tensor((valid.sum(axis=-1) > 0).astype(float))
        return -dc.sum_(lse * has) * (1.0 / count)
    raise ValueError(f"unknown reg mode {mode!r}")


def cls_loss(scores: Tensor, best: np.ndarray, usable: np.ndarray | None = None, stats: dict | None = None) -> Tensor:
    """Mean cross-entropy of the best mode under the predicted scores."""
    N = scores.shape[0]
    usable = np.ones(N, dtype=bool) if usable is None else usable
    n = int(usable.sum())
    if n == 0:
        return Tensor(0.0)
    p = scores[np.arange(N), best]
    clamped = int((p.data[usable] < PROB_FLOOR).sum())
    if clamped:
        log.warning("cls_loss: %d target probabilities clamped at %g", clamped, PROB_FLOOR)
        if stats is not None:
            stats["clamped"] = stats.get("clamped", 0) + clamped
    nll = -dc.log(dc.clip_min(p, PROB_FLOOR))
    return dc.sum_(nll * Tensor(usable.astype(float))) * (1.0 / n)


def anchor_loss(
    anchors: Tensor,
    target_local: np.ndarray,
    valid: np.ndarray,
    best: np.ndarray,
    steps: Sequence[int],
    delta: float = 1.0,
) -> Tensor:
    """Mean per-coordinate Huber loss between best-mode anchors and truth at the anchored steps."""
    steps = list(steps)
    if not steps:
        return Tensor(0.0)
    N = anchors.shape[1]
    mask = valid[:, steps].astype(float)  # (N, A); invalid anchored steps skipped
    count = 2.0 * mask.sum()
    if count == 0:
        return Tensor(0.0)
    pred = _gather_best(anchors, best)  # (N, A, 2)
    tgt = Tensor(target_local[:, steps])
    h = dc.huber(pred - tgt, delta)
    return dc.sum_(h * Tensor(mask[..., None])) * (1.0 / count)


@dataclass
class LossBreakdown:
    cls: Tensor
    reg: Tensor
    anchor: Tensor
    alpha: float
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "cls": float(self.cls.data),
            "reg": float(self.reg.data),
            "anchor": float(self.anchor.data),
            "total": float(self.total.data),
            "alpha": self.alpha,
        }


def total_loss(cls: Tensor, reg: Tensor, anchor: Tensor, alpha: float = 0.5) -> LossBreakdown:
    cls, reg, anchor = dc.as_tensor(cls), dc.as_tensor(reg), dc.as_tensor(anchor)
    parts = [float(cls.data), float(reg.data), float(anchor.data)]
    if not np.isfinite(parts).all():
        raise FloatingPointError(f"non-finite loss component {parts}")
    return LossBreakdown(cls, reg, anchor, alpha, cls + reg + anchor * alpha)


# ----------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    minADE: float
    minFDE: float
    MR: float
    num_agents: int
    num_modes: int
    per_agent_ade: np.ndarray = field(repr=False)
    per_agent_fde: np.ndarray = field(repr=False)
    per_agent_miss: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        return {
            "minADE": self.minADE,
            "minFDE": self.minFDE,
            "MR": self.MR,
            "num_agents": self.num_agents,
            "num_modes": self.num_modes,
        }


def per_agent_errors(
    trajectories: np.ndarray, gt: np.ndarray, valid: np.ndarray, threshold: float = MISS_THRESHOLD_M
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(minADE, minFDE, miss, usable) per agent; the final step is the last valid one."""
    F, N, T, _ = trajectories.shape
    err = np.linalg.norm(trajectories - gt[None], axis=-1)  # (F, N, T)
    counts = valid.sum(axis=-1)
    usable = counts > 0
    ade = (err * valid[None]).sum(axis=-1) / np.maximum(counts, 1)[None]
    last = np.where(usable, T - 1 - np.argmax(valid[:, ::-1], axis=-1), 0)
    fde = err[:, np.arange(N), last]  # (F, N)
    min_ade = ade.min(axis=0)
    best_fde = fde.min(axis=0)
    miss = best_fde > threshold
    return min_ade, best_fde, miss, usable


def evaluate(
    pred: PredictionSet | np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray | None = None,
    threshold: float = MISS_THRESHOLD_M,
) -> MetricsReport:
    traj = pred.trajectories if isinstance(pred, PredictionSet) else np.asarray(pred)
    gt = np.asarray(gt, dtype=float)
    valid = np.ones(gt.shape[:2], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    ade, fde, miss, usable = per_agent_errors(traj, gt, valid, threshold)
    return _report(ade[usable], fde[usable], miss[usable], traj.shape[0])


def _report(ade: np.ndarray, fde: np.ndarray, miss: np.ndarray, num_modes: int) -> MetricsReport:
    if len(ade) == 0:
        raise ValueError("evaluate: no agent with a valid future step")
    return MetricsReport(
        minADE=float(ade.mean()),
        minFDE=float(fde.mean()),
        MR=float(miss.mean()),
        num_agents=int(len(ade)),
        num_modes=num_modes,
        per_agent_ade=ade,
        per_agent_fde=fde,
        per_agent_miss=miss,
    )


def merge_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Pool per-agent errors of several scenes into one report."""
    if not reports:
        raise ValueError("merge_reports: nothing to merge")
    return _report(
        np.concatenate([r.per_agent_ade for r in reports]),
        np.concatenate([r.per_agent_fde for r in reports]),
        np.concatenate([r.per_agent_miss for r in reports]),
        reports[0].num_modes,
    )
