"""Overfit the default (toy-scale) model on a handful of synthetic scenes.

    python3 scripts/overfit_demo.py --scenes 8 --out runs/overfit
"""
import argparse
import json
import os

from copad.config import RunConfig
from copad.model import prepare_inputs
from copad.synth import WorldConfig, generate_scenes
from copad.train import evaluate_inputs, save_checkpoint, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()

    cfg = RunConfig()
    scenes = generate_scenes(WorldConfig(seed=args.seed), args.scenes)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "loss.jsonl"), "w") as fh:
        res = train(scenes, cfg, on_step=lambda r: fh.write(json.dumps(r, sort_keys=True) + "\n"))
    save_checkpoint(res.store, cfg, os.path.join(args.out, "model.json"))
    rep = evaluate_inputs(res.store, [prepare_inputs(s, cfg) for s in scenes], cfg.model)
    print(f"steps {len(res.log)}  loss {res.initial_loss:.3f} -> {res.final_loss:.3f}")
    print(json.dumps(rep.to_json(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
