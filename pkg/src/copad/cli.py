"""Command-line entry point: ``copad {generate|fuse|train|eval|ablate|plot}``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from .config import FUSION_VARIANTS, VIEWS, ConfigError, RunConfig, load_config
from .data_model import (
    SceneParseError,
    ValidationError,
    read_scenes,
    track_to_dict,
)
from .fusion import early_fuse, match_quality
from .synth import generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("copad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig()
    elif not os.path.exists(args.config):
        raise UsageError(f"config file not found: {args.config}")
    else:
        cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, synth=replace(cfg.synth, seed=args.seed), train=replace(cfg.train, seed=args.seed))
    return cfg


def _scenes(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"scene file not found: {path}")
    return read_scenes(path)


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    cfg = _config(args)
    generate_dataset(cfg.synth, args.count, args.out)
    print(_dump({"scenes": args.count, "out": args.out, "seed": cfg.synth.seed}))
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = _config(args)
    scenes = _scenes(args.scenes)
    totals = {"scenes": len(scenes), "vehicle_tracks": 0, "infra_tracks": 0, "matched": 0, "unmatched_V": 0, "unmatched_I": 0}
    tp = pred = truth = 0
    have_gt = bool(scenes) and all(s.gt_identity is not None for s in scenes)
    lines = []
    for s in scenes:
        fused = early_fuse(s, cfg.fusion.kalman())
        m = fused.match
        totals["vehicle_tracks"] += len(s.vehicle_tracks)
        totals["infra_tracks"] += len(s.infra_tracks)
        totals["matched"] += len(m.pairs)
        totals["unmatched_V"] += len(m.unmatched_vehicle)
        totals["unmatched_I"] += len(m.unmatched_infra)
        if have_gt:
            a, b, c = match_quality(s, m)
            tp, pred, truth = tp + a, pred + b, truth + c
        lines.append(
            json.dumps(
                {
                    "scene_id": s.scene_id,
                    "tracks": [track_to_dict(t) for t in fused.tracks],
                    "provenance": [p.value for p in fused.provenance],
                    "parents": [list(p) for p in fused.parents],
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    report = dict(totals)
    if have_gt:
        report["precision"] = tp / pred if pred else 1.0
        report["recall"] = tp / truth if truth else 1.0
    _write_text(args.out, "".join(line + "\n" for line in lines))
    report_path = args.report or args.out + ".report.json"
    _write_text(report_path, _dump(report) + "\n")
    print(_dump(report))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import save_checkpoint, train

    cfg = _config(args)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    scenes = _scenes(args.scenes)
    log_path = args.log or args.out + ".log.jsonl"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        def on_step(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        result = train(scenes, cfg, on_step=on_step)
    save_checkpoint(result.store, cfg, args.out)
    print(_dump({"steps": len(result.log), "initial_loss": result.initial_loss, "final_loss": result.final_loss, "out": args.out}))
    return EXIT_OK


def _eval_config(args):
    from .model import init_model
    from .train import CheckpointError, load_checkpoint

    store, cfg = load_checkpoint(args.checkpoint)
    if args.fusion is not None and args.fusion != cfg.model.fusion:
        model = replace(cfg.model, fusion=args.fusion)
        if set(init_model(model, 0).names()) != set(store.names()):
            raise CheckpointError(
                f"checkpoint was trained with fusion={cfg.model.fusion!r}; its parameters do not fit fusion={args.fusion!r}"
            )
        cfg = replace(cfg, model=model)
    return store, cfg


def cmd_eval(args) -> int:
    from .model import prepare_inputs
    from .train import evaluate_inputs, predict

    store, cfg = _eval_config(args)
    view = args.view or cfg.eval.view
    scenes = _scenes(args.scenes)
    inputs = [prepare_inputs(s, cfg, view) for s in scenes]
    report = evaluate_inputs(store, inputs, cfg.model, cfg.eval.miss_threshold_m, oracle=args.oracle)
    out = {**report.to_json(), "view": view, "fusion": cfg.model.fusion, "oracle": args.oracle}
    if args.predictions:
        lines = []
        for inp in inputs:
            rows = [r for r, a in enumerate(inp.agent_ids) if a is not None]
            p = predict(store, inp, cfg.model)
            sub = {
                "trajectories": p.trajectories[:, rows].tolist(),
                "scores": p.scores[rows].tolist(),
                "agent_ids": [inp.agent_ids[r] for r in rows],
            }
            lines.append(json.dumps({"scene_id": inp.scene_id, "prediction": sub}, sort_keys=True, separators=(",", ":")))
        _write_text(args.predictions, "".join(line + "\n" for line in lines))
    text = _dump(out)
    if args.out:
        _write_text(args.out, text + "\n")
    print(text)
    return EXIT_OK


def _parse_axis(values, kind):
    if values is None:
        return None
    out = []
    for v in values.split(","):
        v = v.strip()
        if kind is bool:
            if v not in ("on", "off"):
                raise UsageError(f"expected on/off, got {v!r}")
            out.append(v == "on")
        elif kind is int:
            out.append(int(v))
        else:
            if v not in FUSION_VARIANTS:
                raise UsageError(f"unknown fusion variant {v!r}")
            out.append(v)
    return tuple(out)


def cmd_ablate(args) -> int:
    from .experiments import format_table, run_ablation

    cfg = _config(args)
    scenes = _scenes(args.scenes)
    if args.test_scenes:
        train_scenes, test_scenes = scenes, _scenes(args.test_scenes)
    else:
        if len(scenes) < 2:
            raise ValidationError("ablate needs at least 2 scenes to split into train and test")
        cut = max(1, int(round(0.75 * len(scenes))))
        train_scenes, test_scenes = scenes[:cut], scenes[cut:]
    axes = {}
    for name, value, kind in (
        ("fusion", args.fusion, str),
        ("pta", args.pta, bool),
        ("mode_attention", args.mode_attention, bool),
        ("num_anchors", args.anchors, int),
    ):
        parsed = _parse_axis(value, kind)
        if parsed is not None:
            axes[name] = parsed
    rows = run_ablation(cfg, train_scenes, test_scenes, axes, on_row=lambda r: log.info("ablation row %s", r))
    table = format_table(rows)
    if args.out:
        _write_text(args.out, _dump({"rows": rows, "train_scenes": len(train_scenes), "test_scenes": len(test_scenes)}) + "\n")
        _write_text(os.path.splitext(args.out)[0] + ".txt", table + "\n")
    print(table)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .data_model import PredictionSet, prediction_from_dict
    from .plot import render_svg

    scenes = _scenes(args.scenes)
    if not scenes:
        raise ValidationError("scene file is empty")
    by_id = {s.scene_id: s for s in scenes}
    scene_id = args.scene_id or scenes[0].scene_id
    if scene_id not in by_id:
        raise ValidationError(f"scene {scene_id!r} not in {args.scenes}")
    scene = by_id[scene_id]
    pred = None
    if args.predictions:
        with open(args.predictions, "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["scene_id"] == scene_id:
                    pred = prediction_from_dict(rec["prediction"])
                    break
        if pred is None:
            raise ValidationError(f"no prediction for scene {scene_id!r} in {args.predictions}")
    elif args.checkpoint:
        from .model import prepare_inputs
        from .train import load_checkpoint, predict

        store, cfg = load_checkpoint(args.checkpoint)
        inp = prepare_inputs(scene, cfg, cfg.eval.view)
        rows = [r for r, a in enumerate(inp.agent_ids) if a is not None]
        p = predict(store, inp, cfg.model)
        pred = PredictionSet(p.trajectories[:, rows], p.scores[rows], [inp.agent_ids[r] for r in rows])
    _write_text(args.out, render_svg(scene, pred))
    print(_dump({"scene_id": scene_id, "out": args.out, "modes": 0 if pred is None else pred.num_modes}))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="copad", description="Cooperative trajectory prediction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run-config JSON file (defaults apply when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="override synth and train seeds")

    sp = sub.add_parser("generate", help="write synthetic scenes")
    common(sp)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("fuse", help="early-fuse the two views of every scene")
    common(sp, seed=False)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", help="report path (default: <out>.report.json)")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("train", help="train a model and write a checkpoint")
    common(sp)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="loss log path (default: <out>.log.jsonl)")
    sp.add_argument("--epochs", type=int, help="override train.epochs")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--view", choices=VIEWS)
    sp.add_argument("--fusion", choices=FUSION_VARIANTS)
    sp.add_argument("--oracle", action="store_true", help="debug: substitute ground truth for every mode")
    sp.add_argument("--predictions", help="also write per-scene predictions (JSON lines)")
    sp.add_argument("--out", help="metrics JSON path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate a grid of model variants")
    common(sp)
    sp.add_argument("--scenes", required=True, help="training scenes (the last quarter is held out without --test-scenes)")
    sp.add_argument("--test-scenes")
    sp.add_argument("--fusion", help="comma list of fusion variants")
    sp.add_argument("--pta", help="comma list of on/off")
    sp.add_argument("--mode-attention", help="comma list of on/off")
    sp.add_argument("--anchors", help="comma list of anchor counts")
    sp.add_argument("--out", help="table JSON path; a .txt table is written alongside")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot", help="render a scene (and predictions) as SVG")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--scene-id")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--predictions", help="prediction JSON lines from `copad eval --predictions`")
    src.add_argument("--checkpoint", help="predict with this checkpoint")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    from .train import CheckpointError, DivergenceError
    from .plot import PlotError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"copad: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, SceneParseError, ConfigError, CheckpointError, PlotError, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        print(f"copad: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"copad: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - last-resort runtime failure
        print(f"copad: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
