"""Ablation sweep over fusion variant, PTA, mode attention and anchor count.

    python3 scripts/ablation.py --train 32 --test 16 --epochs 20 --out runs/ablation.json
    python3 scripts/ablation.py --fusion kf,none --anchors 0,2   # a sub-grid
"""
import argparse
import json
from dataclasses import replace

from copad.config import ModelConfig, RunConfig, TrainConfig
from copad.experiments import format_table, occlusion_heavy, run_ablation
from copad.synth import WorldConfig, generate_scenes


def _bools(s):
    return tuple(v == "on" for v in s.split(","))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=32)
    ap.add_argument("--test", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--hidden-dim", type=int, default=16)
    ap.add_argument("--fusion", default="kf,none,intermediate-add,intermediate-concat")
    ap.add_argument("--pta", default="on,off")
    ap.add_argument("--mode-attention", default="on,off")
    ap.add_argument("--anchors", default="0,1,2,3")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    world = occlusion_heavy(WorldConfig(seed=100))
    train_scenes = generate_scenes(world, args.train)
    test_scenes = generate_scenes(replace(world, seed=5000), args.test)
    cfg = RunConfig(
        model=ModelConfig(hidden_dim=args.hidden_dim, num_heads=2, mode_attn_heads=2),
        train=TrainConfig(epochs=args.epochs, batch_size=8, dropout=0.0),
    )
    axes = {
        "fusion": tuple(args.fusion.split(",")),
        "pta": _bools(args.pta),
        "mode_attention": _bools(args.mode_attention),
        "num_anchors": tuple(int(a) for a in args.anchors.split(",")),
    }
    rows = run_ablation(cfg, train_scenes, test_scenes, axes, on_row=lambda r: print(json.dumps(r), flush=True))
    print(format_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"rows": rows}, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
