"""Command-line interface.

Subcommands: gen-tasks, pretrain, train, eval, replay. Every run writes
its fully resolved configuration into the output directory so results
can be reproduced from the artifacts alone.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import clothsim, harness, neuralnet as nn, ppo, pretrain
from .config import ConfigError, load_config


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser():
    parser = _Parser(prog="clothrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file of dotted.key = value lines")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out-dir", default="runs/out", help="artifact directory")

    p = sub.add_parser("gen-tasks", help="generate a crumpled-task file")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--target", type=float, default=None,
                   help="max coverage percent (default pretrain.target_cov_max)")
    p.add_argument("--out", required=True, help="task file path")

    p = sub.add_parser("pretrain", help="stage 1: value pretraining")
    common(p)

    p = sub.add_parser("train", help="stage 2: PPO fine-tuning")
    common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pretrained", help="stage-1 checkpoint to start from")
    group.add_argument("--from-scratch", action="store_true",
                       help="random initialization baseline")

    p = sub.add_parser("eval", help="run the evaluation protocol")
    common(p)
    p.add_argument("--checkpoint", help="actor checkpoint (omit for --mode random)")
    p.add_argument("--tasks", required=True, help="task file")
    p.add_argument("--mode", choices=["greedy", "sample", "random"], default=None)

    p = sub.add_parser("replay", help="re-execute a logged eval and dump frames")
    common(p)
    p.add_argument("--steps", required=True, help="per-step CSV from eval")
    p.add_argument("--tasks", required=True, help="task file")
    return parser


def _setup(args):
    cfg = load_config(args.config, args.set, args.seed)
    sim_cfg = clothsim.SimConfig.from_run(cfg)
    geom = clothsim.ObsGeometry.from_run(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    cfg.write(os.path.join(args.out_dir, "resolved-config.cfg"))
    return cfg, sim_cfg, geom


def _cmd_gen_tasks(args):
    cfg, sim_cfg, geom = _setup(args)
    target = args.target if args.target is not None else cfg["pretrain.target_cov_max"]
    tasks = harness.gen_tasks(cfg["seed"], args.count, target, args.out, sim_cfg, geom)
    flagged = sum(t.flagged for t in tasks)
    print(f"wrote {len(tasks)} tasks to {args.out} ({flagged} flagged)")
    return 0


def _cmd_pretrain(args):
    cfg, sim_cfg, geom = _setup(args)

    def progress(step, value):
        if step > 0:
            print(f"collect step {step}: mean label {value:+.4f}", flush=True)
        else:
            print(f"update {-step}: mse {value:.6f}", flush=True)

    result = pretrain.run_pretrain(cfg, args.out_dir, sim_cfg, geom,
                                   progress=progress)
    stats = result["collect_stats"]
    print(
        f"pretrained on {stats['steps']} steps / {stats['episodes']} episodes; "
        f"checkpoint: {result['checkpoint']}"
    )
    return 0


def _cmd_train(args):
    cfg, sim_cfg, geom = _setup(args)
    ckpt = None if args.from_scratch else args.pretrained

    def progress(row):
        print(
            f"iter {row['iteration']}: coverage {row['mean_final_coverage']:.1f} "
            f"reward {row['mean_reward']:+.3f} entropy {row.get('entropy', 0):.3f} "
            f"clip {row.get('clip_fraction', 0):.3f}",
            flush=True,
        )

    result = ppo.train(cfg, args.out_dir, sim_cfg, geom, pretrained_ckpt=ckpt,
                       progress=progress)
    if result["halted"]:
        print(f"training halted: {result['halted']}", file=sys.stderr)
        return 2
    print(f"finished {len(result['history'])} iterations; "
          f"metrics: {result['metrics']}")
    return 0


def _cmd_eval(args):
    cfg, sim_cfg, geom = _setup(args)
    mode = args.mode or cfg["eval.mode"]
    actor = None
    if args.checkpoint:
        actor = {k: v for k, v in nn.load_checkpoint(args.checkpoint).items()}
    elif mode != "random":
        raise harness.HarnessError("--checkpoint is required unless --mode random")
    tasks = clothsim.load_tasks(args.tasks)
    steps_csv = os.path.join(args.out_dir, "eval_steps.csv")
    summary = harness.evaluate(actor, tasks, cfg, sim_cfg, geom,
                               steps_csv=steps_csv, mode=mode)
    harness.write_summary(summary, os.path.join(args.out_dir, "eval_summary.csv"))
    print(
        f"{len(tasks)} tasks | final coverage {summary.final_coverage_mean:.2f} | "
        f"delta {summary.delta_coverage_mean:+.2f} | "
        f"percent positive {summary.percent_positive:.1f}"
    )
    return 0


def _cmd_replay(args):
    cfg, sim_cfg, geom = _setup(args)
    tasks = clothsim.load_tasks(args.tasks)
    frames_dir = os.path.join(args.out_dir, "frames")
    n = harness.replay(args.steps, tasks, cfg, sim_cfg, geom, out_dir=frames_dir)
    print(f"replayed {n} steps, coverage reproduced exactly; frames in {frames_dir}")
    return 0


_COMMANDS = {
    "gen-tasks": _cmd_gen_tasks,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "replay": _cmd_replay,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, harness.HarnessError, clothsim.SimError,
            nn.CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
