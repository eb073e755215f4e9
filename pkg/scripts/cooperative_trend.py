"""Paired evaluation on occlusion-heavy scenes: cooperative vs vehicle-only, KF fusion vs no fusion.

    python3 scripts/cooperative_trend.py --train 64 --test 32 --epochs 40
"""
import argparse
import json
from dataclasses import replace

from copad.config import ModelConfig, RunConfig, TrainConfig
from copad.experiments import cooperative_trend, occlusion_heavy
from copad.synth import WorldConfig, generate_scenes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=64)
    ap.add_argument("--test", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--hidden-dim", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    world = occlusion_heavy(WorldConfig(seed=100 + args.seed))
    train_scenes = generate_scenes(world, args.train)
    test_scenes = generate_scenes(replace(world, seed=5000 + args.seed), args.test)
    model = ModelConfig(hidden_dim=args.hidden_dim, num_heads=2, mode_attn_heads=2)
    cfg = RunConfig(model=model, train=TrainConfig(epochs=args.epochs, batch_size=8, dropout=0.0, seed=args.seed))
    reports = cooperative_trend(cfg, train_scenes, test_scenes)
    print(f"{'setting':<14} {'minADE':>8} {'minFDE':>8} {'MR':>6}")
    for name, r in reports.items():
        print(f"{name:<14} {r.minADE:>8.3f} {r.minFDE:>8.3f} {r.MR:>6.3f}")
    print(json.dumps({k: v.to_json() for k, v in reports.items()}, sort_keys=True))


if __name__ == "__main__":
    main()
