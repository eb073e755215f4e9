"""Acceptance criteria, one test per criterion.

Each test records a ``[ACCEPT n] PASS|FAIL <name>: <measurement>`` line, which
is printed in the "acceptance criteria" section of the terminal summary, and
asserts the stated tolerance and wall-clock budget.
"""
import hashlib
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from copad import diffcore as dc
from copad.anchor_decoder import decode_trajectories, init_decoder, make_frame, predict_anchors
from copad.cli import main as cli_main
from copad.config import ModelConfig, RunConfig, TrainConfig
from copad.data_model import ClassLabel, ObservedTrack, Source
from copad.diffcore import ParamStore, Tensor
from copad.experiments import cooperative_trend, occlusion_heavy
from copad.fusion import CostMatrix, KalmanConfig, early_fuse, hungarian_assign, kalman_fuse_pair, match_quality
from copad.mode_attention import init_mode_attention, mode_gat
from copad.model import init_model, prepare_inputs
from copad.objective_metrics import anchor_loss, best_mode, cls_loss, evaluate, laplace_reg_loss, total_loss
from copad.scene_encoder import AA_EDGE_DIM, AL_EDGE_DIM, PastCache, graph_attention_layer, init_gat_layer, init_pta, pta
from copad.synth import WorldConfig, generate_scene, generate_scene_with_truth, generate_scenes
from copad.train import evaluate_inputs, predict, train

from conftest import ACCEPTANCE_LINES
from fd import check_grads, max_param_grad_error
from oracles import brute_force_assignment_cost, brute_force_metrics, scalar_cv_kalman
from scene_utils import relabel_agents, rotate_scene, rotation
from test_diffcore import PRIMITIVES, leaf, weighted

TOY = ModelConfig(hidden_dim=16, num_heads=2, mode_attn_heads=2, num_modes=6, t_f=10, k_p=5)


def report(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"[ACCEPT {n:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    assert ok, f"criterion {n} ({name}) failed: {detail}"


def _sha(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# ---------------------------------------------------------------- 1


def test_01_assignment_optimality():
    t0 = time.perf_counter()
    r = np.random.default_rng(1)
    worst = 0.0
    for n in range(1, 8):
        ids = tuple(range(n))
        for _ in range(1000):
            c = r.uniform(0, 10, (n, n))
            # gate large enough that no optimal pair is demoted
            m = hungarian_assign(CostMatrix(c, ids, ids), gate=1e6)
            assert len(m.pairs) == n
            got = sum(c[i, j] for i, j in m.pairs)
            worst = max(worst, abs(got - brute_force_assignment_cost(c)))
    dt = time.perf_counter() - t0
    report(1, "assignment optimality", worst <= 1e-9 and dt < 10, f"max |cost - brute force| = {worst:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------- 2


def _track(tid, xy, valid, source):
    return ObservedTrack(tid, ClassLabel.VEHICLE, np.where(valid[:, None], xy, 0.0), valid, source)


def test_02_kalman_oracle():
    t0 = time.perf_counter()
    cfg = KalmanConfig()
    r = np.random.default_rng(2)
    worst = 0.0
    T = 10
    for k in range(100):
        truth = r.uniform(-20, 20) + r.uniform(-10, 10) * np.arange(T) * 0.1
        za, zb = truth + r.normal(0, 0.5, T), truth + r.normal(0, 0.5, T)
        # half the tracks fully observed, half with random gaps
        va = np.ones(T, bool) if k % 2 == 0 else r.random(T) < 0.7
        vb = np.ones(T, bool) if k % 2 == 0 else r.random(T) < 0.7
        va[0] = True
        a = _track(0, np.stack([za, np.zeros(T)], 1), va, Source.VEHICLE)
        b = _track(1, np.stack([zb, np.zeros(T)], 1), vb, Source.INFRA)
        out = kalman_fuse_pair(a, b, cfg)
        meas = [
            ([(za[t], cfg.meas_noise_vehicle)] if va[t] else []) + ([(zb[t], cfg.meas_noise_infra)] if vb[t] else [])
            for t in range(T)
        ]
        ref = np.array(scalar_cv_kalman(meas, 0.1, cfg.process_noise, cfg.init_vel_var))
        worst = max(worst, np.abs(out.positions[out.valid, 0] - ref[va | vb]).max())
    dt = time.perf_counter() - t0
    report(2, "Kalman oracle", worst <= 1e-9 and dt < 5, f"max |filtered - scalar recursion| = {worst:.1e}, {dt:.2f}s")


# ---------------------------------------------------------------- 3


def _rmse(tracks, truth_of) -> list[float]:
    out = []
    for tr, truth in ((t, truth_of(t)) for t in tracks):
        if truth is not None:
            d = tr.positions[tr.valid] - truth[tr.valid]
            out.append(float(np.sqrt((d**2).sum(axis=1).mean())))
    return out


def test_03_fusion_noise_reduction():
    t0 = time.perf_counter()
    world = WorldConfig(layout="straight_road", turn_prob=0.0, sigma_V=0.5, sigma_I=0.5)
    per = {"fused": [], "vehicle": [], "infra": []}
    for seed in range(100):
        scene, truths = generate_scene_with_truth(replace(world, seed=seed))
        t_h = scene.t_h
        fused = early_fuse(scene)
        gt = scene.gt_identity
        hist = lambda src: (lambda tr: truths[gt[(src, tr.track_id)]][:t_h])
        per["vehicle"] += _rmse(scene.vehicle_tracks, hist(Source.VEHICLE))
        per["infra"] += _rmse(scene.infra_tracks, hist(Source.INFRA))
        for tr, (vid, _iid) in zip(fused, fused.parents):
            if vid is not None:
                per["fused"] += _rmse([tr], lambda _t: truths[gt[(Source.VEHICLE, vid)]][:t_h])
    means = {k: float(np.mean(v)) for k, v in per.items()}
    dt = time.perf_counter() - t0
    ok = means["fused"] <= min(means["vehicle"], means["infra"]) and dt < 30
    detail = ", ".join(f"{k} {v:.3f} m" for k, v in means.items()) + f", {dt:.1f}s"
    report(3, "fusion noise reduction", ok, detail)


# ---------------------------------------------------------------- 4


def test_04_matching_quality():
    t0 = time.perf_counter()
    world = WorldConfig(sigma_V=0.2, sigma_I=0.2, dropout_V=0.3, dropout_I=0.3, min_separation_m=5.0)
    tp = pred = truth = 0
    for seed in range(200):
        s = generate_scene(replace(world, seed=seed))
        a, b, c = match_quality(s, early_fuse(s).match)
        tp, pred, truth = tp + a, pred + b, truth + c
    precision, recall = tp / pred, tp / truth
    dt = time.perf_counter() - t0
    ok = precision >= 0.99 and recall >= 0.99 and dt < 30
    report(4, "matching quality", ok, f"precision {precision:.4f}, recall {recall:.4f} over {truth} true pairs, {dt:.1f}s")


# ---------------------------------------------------------------- 5


def test_05_mask_union_completeness():
    checked = bad = 0
    for seed in range(200):
        world = WorldConfig(seed=seed, dropout_V=0.4, dropout_I=0.4, occlusion_V=(0.0, 40.0), cyclist_frac=0.2, pedestrian_frac=0.1)
        s = generate_scene(world)
        fused = early_fuse(s)
        vmap, imap = s.vehicle_tracks.by_id(), s.infra_tracks.by_id()
        for tr, (vid, iid) in zip(fused, fused.parents):
            if vid is not None and iid is not None:
                checked += 1
                bad += not np.array_equal(tr.valid, vmap[vid].valid | imap[iid].valid)
    report(5, "mask-union completeness", bad == 0 and checked > 0, f"{checked - bad}/{checked} matched pairs exact")


# ---------------------------------------------------------------- 6


def _rand_weighted(y):
    return dc.sum_(y * Tensor(np.random.default_rng(y.data.size).normal(size=y.shape)))


def _gat_block():
    store = ParamStore()
    init_gat_layer(store, "g", 8, np.random.default_rng(4))
    r = np.random.default_rng(4)
    h = Tensor(r.normal(size=(3, 8)), requires_grad=True)
    src, dst = np.array([0, 1, 2, 1]), np.array([1, 0, 1, 2])
    feats = r.normal(size=(4, AA_EDGE_DIM))
    al_dst, al_feats = np.array([0, 2]), r.normal(size=(2, AL_EDGE_DIM))
    f = lambda: _rand_weighted(graph_attention_layer(h, 2, store, "g", src, dst, feats, al_dst, al_feats))
    return max(check_grads(f, [h]), max_param_grad_error(f, store, h=1e-5))


def _pta_block():
    cfg = ModelConfig(hidden_dim=8, num_heads=2, mode_attn_heads=2, num_modes=3, t_f=6, k_p=3)
    store = ParamStore()
    init_pta(store, cfg, np.random.default_rng(5))
    r = np.random.default_rng(5)
    ds = [Tensor(r.normal(size=(2, 8)), requires_grad=True) for _ in range(cfg.k_p + 1)]

    def f():
        cache = PastCache(cfg.k_p)
        for d in ds[:-1]:
            cache.push(d)
        return _rand_weighted(pta(ds[-1], cache, cfg.k_p, cfg, store))

    names = [n for n in store.names() if n.startswith("pta.attn") or n.startswith("pta.ln")]
    return max(check_grads(f, ds), max_param_grad_error(f, store, names, h=1e-5))


def _mode_gat_block():
    store = ParamStore()
    init_mode_attention(store, ModelConfig(hidden_dim=8, num_heads=2, mode_attn_heads=2, num_modes=4), np.random.default_rng(7))
    E = Tensor(np.random.default_rng(7).normal(size=(4, 2, 8)), requires_grad=True)
    f = lambda: _rand_weighted(mode_gat(E, 2, store))
    used = [n for n in store.names() if n != "modes.embed"]
    return max(check_grads(f, [E]), max_param_grad_error(f, store, used, h=1e-5))


def _decoder_block():
    cfg = ModelConfig(hidden_dim=8, num_heads=2, mode_attn_heads=2, num_modes=6, t_f=6)
    store = ParamStore()
    init_decoder(store, cfg, np.random.default_rng(6))
    r = np.random.default_rng(6)
    E_m = Tensor(r.normal(size=(6, 2, 8)), requires_grad=True)
    frames = [make_frame(_track(k, np.cumsum(r.normal(size=(5, 2)), 0), np.ones(5, bool), Source.VEHICLE)) for k in range(2)]

    def f():
        dec = decode_trajectories(E_m, predict_anchors(E_m, cfg, store), frames, cfg, store)
        return _rand_weighted(dec.local) + _rand_weighted(dec.scales) + _rand_weighted(dec.scores)

    return max(check_grads(f, [E_m], h=1e-5), max_param_grad_error(f, store, h=1e-5, max_entries=15))


def _total_loss_block():
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
        reg = laplace_reg_loss(local, dc.softplus(raw_b) + 1e-3, tgt, valid, best)
        scores = dc.softmax(logits, axis=-1)
        return total_loss(cls_loss(scores, best, usable), reg, anchor_loss(anchors, tgt, valid, best, [2, 5])).total

    return check_grads(f, [local, raw_b, logits, anchors])


def test_06_gradient_suite():
    t0 = time.perf_counter()
    prim = {}
    for name, op in sorted(PRIMITIVES.items()):
        a, b = leaf(3, 3), leaf(3, 3)
        prim[name] = check_grads(lambda: weighted(op(a, b)), [a, b])
    blocks = {
        "graph attention": _gat_block(),
        "PTA": _pta_block(),
        "mode GAT": _mode_gat_block(),
        "decoder": _decoder_block(),
        "total loss": _total_loss_block(),
    }
    dt = time.perf_counter() - t0
    worst_prim = max(prim.values())
    worst_block = max(blocks.values())
    ok = worst_prim < 1e-6 and worst_block < 1e-4 and dt < 60
    detail = (
        f"{len(prim)} primitives max rel err {worst_prim:.1e} ({max(prim, key=prim.get)}); "
        + ", ".join(f"{k} {v:.1e}" for k, v in blocks.items())
        + f"; {dt:.1f}s"
    )
    report(6, "gradient suite", ok, detail)


# ---------------------------------------------------------------- 7


def test_07_metric_oracle():
    t0 = time.perf_counter()
    r = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        N, T = int(r.integers(1, 5)), int(r.integers(1, 11))
        gt = r.normal(0, 5, (N, T, 2))
        traj = gt[None] + r.normal(0, r.uniform(0.1, 3.0), (6, N, T, 2))
        rep = evaluate(traj, gt, threshold=2.0)
        ref = brute_force_metrics(traj, gt, threshold=2.0)
        worst = max(worst, abs(rep.minADE - ref[0]), abs(rep.minFDE - ref[1]), abs(rep.MR - ref[2]))
    dt = time.perf_counter() - t0
    report(7, "metric oracle", worst <= 1e-9 and dt < 10, f"max |metric - brute force| = {worst:.1e}, {dt:.2f}s")


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_08_overfit():
    t0 = time.perf_counter()
    # default model and training sections are the toy configuration: D=64,
    # 8 scenes in one batch for 200 epochs = 200 AdamW steps, lr0 3e-4, cosine
    cfg = RunConfig()
    assert (cfg.train.lr0, cfg.train.epochs, cfg.train.batch_size) == (3e-4, 200, 8)
    scenes = generate_scenes(WorldConfig(seed=0), 8)
    res = train(scenes, cfg)
    inputs = [prepare_inputs(s, cfg) for s in scenes]
    ade = evaluate_inputs(res.store, inputs, cfg.model).minADE
    steps = len(res.log)
    ratio = res.final_loss / res.initial_loss
    dt = time.perf_counter() - t0
    ok = steps == 200 and ade < 0.5 and ratio < 0.5 and dt < 300
    detail = f"{steps} steps, train minADE {ade:.3f} m, loss {res.initial_loss:.2f} -> {res.final_loss:.2f} (ratio {ratio:.2f}), {dt:.0f}s"
    report(8, "overfit smoke test", ok, detail)


# ---------------------------------------------------------------- 9


@pytest.mark.slow
def test_09_cooperative_trend():
    t0 = time.perf_counter()
    world = occlusion_heavy(WorldConfig(seed=100))
    train_scenes = generate_scenes(world, 64)
    test_scenes = generate_scenes(replace(world, seed=5000), 32)
    cfg = RunConfig(model=TOY, train=TrainConfig(epochs=40, batch_size=8, dropout=0.0, seed=0))
    r = cooperative_trend(cfg, train_scenes, test_scenes)
    dt = time.perf_counter() - t0
    coop, veh, kf, none = (r[k].minADE for k in ("cooperative", "vehicle-only", "kf", "none"))
    ok = coop <= veh and kf <= none and dt < 600
    detail = (
        f"cooperative {coop:.3f} vs vehicle-only {veh:.3f}; kf {kf:.3f} vs none {none:.3f} "
        f"(minADE m, {r['cooperative'].num_agents} paired agents), {dt:.0f}s"
    )
    report(9, "cooperative trend", ok, detail)


# ---------------------------------------------------------------- 10


def test_10_equivariance():
    worst_rot = worst_perm = 0.0
    perm_ok = True
    for fusion in ("kf", "none", "intermediate-add", "intermediate-concat"):
        cfg = RunConfig(model=replace(TOY, fusion=fusion))
        store = init_model(cfg.model, seed=10)
        for seed in range(3):
            scene = generate_scene(WorldConfig(seed=seed, dropout_V=0.2, dropout_I=0.2))
            phi = float(np.random.default_rng(seed).uniform(-np.pi, np.pi))
            base = prepare_inputs(scene, cfg)
            a = predict(store, base, cfg.model)
            rot = prepare_inputs(rotate_scene(scene, phi), cfg)
            b = predict(store, rot, cfg.model)
            ia = {k: i for i, k in enumerate(base.agent_ids)}
            ib = {k: i for i, k in enumerate(rot.agent_ids)}
            perm_ok &= ia.keys() == ib.keys()
            for k in ia:
                worst_rot = max(worst_rot, np.abs(a.trajectories[:, ia[k]] @ rotation(phi).T - b.trajectories[:, ib[k]]).max())

            relabeled, _ = relabel_agents(scene, np.random.default_rng(seed))
            perm = prepare_inputs(relabeled, cfg)
            c = predict(store, perm, cfg.model)
            ic = {k: i for i, k in enumerate(perm.agent_ids)}
            perm_ok &= ia.keys() == ic.keys()
            for k in ia:
                worst_perm = max(worst_perm, np.abs(a.trajectories[:, ia[k]] - c.trajectories[:, ic[k]]).max())
                worst_perm = max(worst_perm, np.abs(a.scores[ia[k]] - c.scores[ic[k]]).max())
    ok = worst_rot <= 1e-6 and perm_ok and worst_perm <= 1e-9
    report(10, "equivariance", ok, f"rotation max err {worst_rot:.1e}, permutation max err {worst_perm:.1e}")


# ---------------------------------------------------------------- 11


def test_11_determinism(tmp_path):
    (tmp_path / "cfg.json").write_text(
        json.dumps({"model": {"hidden_dim": 16, "num_heads": 2, "mode_attn_heads": 2}, "train": {"epochs": 3, "batch_size": 4, "dropout": 0.1}})
    )
    hashes = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        cfg = str(tmp_path / "cfg.json")
        assert cli_main(["generate", "--config", cfg, "--seed", "11", "--count", "6", "--out", str(d / "s.jsonl")]) == 0
        assert cli_main(["train", "--config", cfg, "--scenes", str(d / "s.jsonl"), "--out", str(d / "m.json")]) == 0
        assert cli_main(["eval", "--scenes", str(d / "s.jsonl"), "--checkpoint", str(d / "m.json"), "--out", str(d / "e.json"), "--predictions", str(d / "p.jsonl")]) == 0
        hashes.append(tuple(_sha(d / f) for f in ("s.jsonl", "m.json", "m.json.log.jsonl", "e.json", "p.jsonl")))
    same = sum(x == y for x, y in zip(*hashes))
    report(11, "determinism", hashes[0] == hashes[1], f"{same}/{len(hashes[0])} artifact hashes identical across reruns")
