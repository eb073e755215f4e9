import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copad import diffcore as dc
from copad.data_model import PredictionSet
from copad.diffcore import Tensor
from copad.objective_metrics import (
    MISS_THRESHOLD_M,
    anchor_loss,
    best_mode,
    cls_loss,
    evaluate,
    laplace_nll,
    laplace_reg_loss,
    merge_reports,
    total_loss,
)

from fd import check_grads
from oracles import brute_force_best_mode, brute_force_metrics


def test_threshold_and_mode_defaults():
    assert MISS_THRESHOLD_M == 2.0


# ----------------------------------------------------------------- metrics


def test_exact_prediction_scores_zero():
    gt = np.random.default_rng(0).normal(size=(3, 10, 2))
    rep = evaluate(np.stack([gt] * 6), gt)
    assert rep.minADE == rep.minFDE == rep.MR == 0.0 and rep.num_modes == 6 and rep.num_agents == 3


def test_constant_offset():
    gt = np.zeros((1, 10, 2))
    rep = evaluate(np.full((1, 1, 10, 2), [3.0, 4.0]), gt)
    assert rep.minADE == pytest.approx(5.0) and rep.minFDE == pytest.approx(5.0) and rep.MR == 1.0


def test_miss_threshold_is_strict():
    gt = np.zeros((2, 4, 2))
    traj = np.zeros((1, 2, 4, 2))
    traj[0, 0, -1] = [2.0, 0.0]  # exactly at the threshold: not a miss
    traj[0, 1, -1] = [2.0 + 1e-9, 0.0]
    assert evaluate(traj, gt).MR == 0.5


def test_best_mode_picks_closest():
    gt = np.zeros((1, 5, 2))
    traj = np.stack([np.full((1, 5, 2), d) for d in (3.0, 0.5, 1.0)])
    idx, usable = best_mode(traj, gt, np.ones((1, 5), bool))
    assert idx.tolist() == [1] and usable.all()


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_metrics_match_brute_force(F, N, T, seed):
    r = np.random.default_rng(seed)
    gt = r.normal(size=(N, T, 2)) * 5
    traj = gt[None] + r.normal(size=(F, N, T, 2)) * r.uniform(0.1, 3)
    rep = evaluate(traj, gt)
    ade, fde, mr = brute_force_metrics(traj.tolist(), gt.tolist())
    assert abs(rep.minADE - ade) < 1e-9 and abs(rep.minFDE - fde) < 1e-9 and abs(rep.MR - mr) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_best_mode_matches_brute_force(F, N, seed):
    r = np.random.default_rng(seed)
    T = 6
    gt = r.normal(size=(N, T, 2))
    traj = r.normal(size=(F, N, T, 2))
    valid = r.random((N, T)) < 0.7
    valid[:, 0] = True
    idx, _ = best_mode(traj, gt, valid)
    assert idx.tolist() == brute_force_best_mode(traj.tolist(), gt.tolist(), valid.tolist())


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_adding_modes_never_hurts(F, seed):
    r = np.random.default_rng(seed)
    gt = r.normal(size=(3, 6, 2))
    traj = r.normal(size=(F + 1, 3, 6, 2)) * 3
    a, b = evaluate(traj[:F], gt), evaluate(traj, gt)
    assert b.minADE <= a.minADE + 1e-12 and b.minFDE <= a.minFDE + 1e-12 and b.MR <= a.MR


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100), st.floats(-100, 100))
def test_translation_invariance(seed, dx, dy):
    r = np.random.default_rng(seed)
    gt = r.normal(size=(3, 6, 2))
    traj = r.normal(size=(4, 3, 6, 2))
    a = evaluate(traj, gt)
    b = evaluate(traj + [dx, dy], gt + [dx, dy])
    assert a.minADE == pytest.approx(b.minADE, abs=1e-9) and a.minFDE == pytest.approx(b.minFDE, abs=1e-9)


def test_masked_final_step_uses_last_valid():
    gt = np.zeros((1, 4, 2))
    traj = np.zeros((1, 1, 4, 2))
    traj[0, 0, 2] = [1.0, 0.0]
    traj[0, 0, 3] = [50.0, 0.0]
    rep = evaluate(traj, gt, np.array([[1, 1, 1, 0]], bool))
    assert rep.minFDE == pytest.approx(1.0) and rep.minADE == pytest.approx(1 / 3)


def test_agents_without_valid_future_are_skipped():
    rep = evaluate(np.zeros((1, 2, 3, 2)), np.ones((2, 3, 2)), np.array([[1, 1, 1], [0, 0, 0]], bool))
    assert rep.num_agents == 1
    with pytest.raises(ValueError):
        evaluate(np.zeros((1, 1, 3, 2)), np.zeros((1, 3, 2)), np.zeros((1, 3), bool))


def test_prediction_set_accepted():
    gt = np.zeros((2, 3, 2))
    rep = evaluate(PredictionSet(np.ones((2, 2, 3, 2)), np.full((2, 2), 0.5)), gt)
    assert rep.minADE == pytest.approx(math.sqrt(2))


def test_merge_pools_agents():
    r = np.random.default_rng(1)
    parts = [(r.normal(size=(6, n, 5, 2)), r.normal(size=(n, 5, 2))) for n in (1, 3, 2)]
    merged = merge_reports([evaluate(t, g) for t, g in parts])
    whole = evaluate(np.concatenate([t for t, _ in parts], axis=1), np.concatenate([g for _, g in parts]))
    assert merged.minADE == pytest.approx(whole.minADE, abs=1e-12) and merged.num_agents == 6


# ------------------------------------------------------------------ losses


def test_laplace_nll_value():
    assert float(laplace_nll(Tensor(1.0), Tensor(0.0), Tensor(1.0)).data) == pytest.approx(math.log(2) + 1)


def test_uniform_scores_cross_entropy():
    scores = Tensor(np.full((2, 6), 1 / 6))
    assert float(cls_loss(scores, np.array([0, 3])).data) == pytest.approx(math.log(6))


def test_cross_entropy_clamps_and_counts(caplog):
    scores = Tensor(np.array([[1.0, 0.0]]))
    stats = {}
    loss = cls_loss(scores, np.array([1]), stats=stats)
    assert float(loss.data) == pytest.approx(-math.log(1e-12)) and stats["clamped"] == 1
    assert "clamped" in caplog.text


def test_wta_perfect_best_mode():
    F, N, T = 3, 2, 4
    tgt = np.random.default_rng(2).normal(size=(N, T, 2))
    local = np.random.default_rng(3).normal(size=(F, N, T, 2))
    local[1] = tgt
    best = np.array([1, 1])
    scales = np.full((F, N, T), 0.5)
    reg = laplace_reg_loss(Tensor(local), Tensor(scales), tgt, np.ones((N, T), bool), best)
    assert float(reg.data) == pytest.approx(2 * math.log(2 * 0.5))


def test_mixture_equals_wta_with_one_mode():
    r = np.random.default_rng(4)
    tgt = r.normal(size=(2, 4, 2))
    local, scales = Tensor(r.normal(size=(1, 2, 4, 2))), Tensor(np.full((1, 2, 4), 0.7))
    valid = np.ones((2, 4), bool)
    best = np.zeros(2, int)
    wta = laplace_reg_loss(local, scales, tgt, valid, best)
    mix = laplace_reg_loss(local, scales, tgt, valid, best, Tensor(np.ones((2, 1))), "mixture")
    assert float(wta.data) == pytest.approx(float(mix.data), abs=1e-12)


def test_anchor_loss_zero_at_truth_and_huber_tail():
    tgt = np.zeros((1, 10, 2))
    tgt[0, 4] = [1.0, 2.0]
    tgt[0, 9] = [3.0, 4.0]
    anchors = np.zeros((2, 1, 2, 2))
    anchors[1, 0] = [[1.0, 2.0], [3.0, 4.0]]
    assert float(anchor_loss(Tensor(anchors), tgt, np.ones((1, 10), bool), np.array([1]), [4, 9]).data) == 0.0
    # best = 0: errors (1, 2, 3, 4) -> huber 0.5, 1.5, 2.5, 3.5; mean 2.0
    assert float(anchor_loss(Tensor(anchors), tgt, np.ones((1, 10), bool), np.array([0]), [4, 9]).data) == pytest.approx(2.0)


def test_total_loss_combines_and_rejects_nan():
    lb = total_loss(Tensor(1.0), Tensor(2.0), Tensor(4.0), alpha=0.5)
    assert float(lb.total.data) == pytest.approx(5.0)
    with pytest.raises(FloatingPointError):
        total_loss(Tensor(np.nan), Tensor(0.0), Tensor(0.0))


def test_total_loss_gradient_reaches_all_inputs():
    r = np.random.default_rng(5)
    F, N, T = 3, 2, 6
    local = Tensor(r.normal(size=(F, N, T, 2)), requires_grad=True)
    raw_b = Tensor(r.normal(size=(F, N, T)), requires_grad=True)
    logits = Tensor(r.normal(size=(N, F)), requires_grad=True)
    anchors = Tensor(r.normal(size=(F, N, 2, 2)), requires_grad=True)
    tgt = r.normal(size=(N, T, 2))
    valid = r.random((N, T)) < 0.8
    valid[:, -1] = True
    best, usable = best_mode(local.data, tgt, valid)

    def f():
        scales = dc.softplus(raw_b) + 1e-3
        scores = dc.softmax(logits, axis=-1)
        reg = laplace_reg_loss(local, scales, tgt, valid, best)
        return total_loss(cls_loss(scores, best, usable), reg, anchor_loss(anchors, tgt, valid, best, [2, 5])).total

    assert check_grads(f, [local, raw_b, logits, anchors], h=1e-6) < 1e-4
    assert all(np.abs(t.grad).sum() > 0 for t in (local, raw_b, logits, anchors))
