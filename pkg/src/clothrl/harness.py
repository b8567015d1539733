"""Task-set management, the evaluation protocol, and episode replay.

Evaluation runs each task for up to `eval.max_steps` pick-places (or
until success / out-of-observation / no valid action), scoring final
coverage, delta coverage, and percent positive. Every number in the
emitted CSVs is recomputable from the per-step rows; replay re-executes
the logged actions and must reproduce the coverage column exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import actionmaps, clothsim, env as envmod, neuralnet as nn
from .autodiff import masked_log_softmax_raw  # noqa: F401  (re-export for tests)

STEP_HEADER = "task,step,action,coverage_before,coverage_after,delta,positive"
SUMMARY_HEADER = (
    "tasks,final_coverage_mean,delta_coverage_mean,percent_positive,mean_steps"
)


class HarnessError(Exception):
    pass


def task_seed_for(base_seed, index):
    return base_seed * 2_000_003 + index


def gen_tasks(base_seed, count, target_cov_max, out_path, sim_cfg, geom):
    """Write a deterministic task file plus a CSV manifest of achieved
    coverages; returns the Task list."""
    if count < 1:
        raise HarnessError(f"task count must be >= 1, got {count}")
    tasks = []
    for i in range(count):
        tasks.append(
            clothsim.generate_task(
                task_seed_for(base_seed, i), target_cov_max, sim_cfg, geom
            )
        )
    clothsim.save_tasks(tasks, out_path)
    with open(f"{out_path}.manifest.csv", "w", encoding="utf-8") as fh:
        fh.write("index,seed,coverage,flagged\n")
        for i, t in enumerate(tasks):
            fh.write(f"{i},{t.seed},{t.achieved_cov_pct!r},{int(t.flagged)}\n")
    return tasks


def check_task_compat(tasks, sim_cfg):
    for i, t in enumerate(tasks):
        if (t.rows, t.cols) != (sim_cfg.rows, sim_cfg.cols):
            raise HarnessError(
                f"task {i} is a {t.rows}x{t.cols} mesh but the config expects "
                f"{sim_cfg.rows}x{sim_cfg.cols}"
            )


def check_checkpoint_compat(params, net_cfg):
    expected = nn.init_policy_params(net_cfg, np.random.default_rng(0))
    for name, arr in expected.items():
        if name not in params:
            raise HarnessError(f"checkpoint is missing tensor {name!r}")
        if params[name].shape != arr.shape:
            raise HarnessError(
                f"checkpoint tensor {name!r} has shape {params[name].shape}, "
                f"config expects {arr.shape}"
            )


@dataclass
class EvalSummary:
    final_coverage: list
    delta_coverage: list
    steps: list
    positive_steps: int
    total_steps: int

    @property
    def final_coverage_mean(self):
        return float(np.mean(self.final_coverage))

    @property
    def delta_coverage_mean(self):
        return float(np.mean(self.delta_coverage))

    @property
    def percent_positive(self):
        if self.total_steps == 0:
            return 0.0
        return self.positive_steps / self.total_steps * 100.0

    @property
    def mean_steps(self):
        return float(np.mean(self.steps))

    def summary_row(self):
        return (
            f"{len(self.final_coverage)},{self.final_coverage_mean!r},"
            f"{self.delta_coverage_mean!r},{self.percent_positive!r},"
            f"{self.mean_steps!r}"
        )


def _pick_action(mode, logits, mask, rng):
    flat_mask = mask.reshape(-1)
    if mode == "random":
        valid = np.flatnonzero(flat_mask)
        return int(valid[rng.integers(0, len(valid))])
    if mode == "sample":
        dist = actionmaps.MaskedCategorical(logits.reshape(-1), flat_mask)
        return dist.sample(rng)
    if mode == "greedy":
        return actionmaps.greedy_index(logits.reshape(-1), flat_mask)
    raise HarnessError(f"unknown eval mode {mode!r}")


def evaluate(actor, tasks, run_cfg, sim_cfg, geom, steps_csv=None, mode=None):
    """Run the evaluation protocol over a task list.

    `actor` may be None for the random baseline. Writes the per-step CSV
    when a path is given; returns an EvalSummary.
    """
    net_cfg = nn.NetConfig.from_run(run_cfg)
    action_cfg = actionmaps.ActionSpaceConfig.from_run(run_cfg, geom)
    mode = mode or run_cfg["eval.mode"]
    max_steps = run_cfg["eval.max_steps"]
    threshold = run_cfg["eval.success_threshold"]
    if mode != "random" and actor is None:
        raise HarnessError(f"eval mode {mode!r} needs a checkpoint")
    if actor is not None:
        check_checkpoint_compat(actor, net_cfg)
    check_task_compat(tasks, sim_cfg)

    rng = np.random.default_rng(run_cfg["eval.sample_seed"])
    environment = envmod.UnfoldEnv(sim_cfg, geom)
    rows = []
    finals, deltas, steps_per_task = [], [], []
    positive = total = 0
    for t_index, task in enumerate(tasks):
        obs = environment.reset(task)
        start_cov = environment.coverage_pct
        steps_done = 0
        for step in range(max_steps):
            # unlike training rollouts, evaluation checks termination
            # before acting: an already-solved task takes no action
            mask = actionmaps.build_masks(obs, action_cfg, environment.geom)
            if envmod.episode_over(
                environment.coverage_pct, obs, bool(mask.any()), steps_done,
                max_steps, threshold,
            ) is not None:
                break
            if mode == "random":
                logits = None
            else:
                stack = nn.preprocess(
                    actionmaps.build_layer_stack(obs, action_cfg), net_cfg
                )
                logits = nn.forward_policy_raw(actor, stack, net_cfg)
            k = _pick_action(mode, logits, mask, rng)
            action = actionmaps.decode_action(k, action_cfg, environment.geom)
            result = environment.step(action)
            delta = result.coverage_after - result.coverage_before
            rows.append(
                f"{t_index},{step},{k},{result.coverage_before!r},"
                f"{result.coverage_after!r},{delta!r},{int(delta > 0)}"
            )
            positive += int(delta > 0)
            total += 1
            steps_done += 1
            obs = result.obs
        finals.append(environment.coverage_pct)
        deltas.append(environment.coverage_pct - start_cov)
        steps_per_task.append(steps_done)
    if steps_csv:
        with open(steps_csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(STEP_HEADER + "\n")
            for row in rows:
                fh.write(row + "\n")
    return EvalSummary(finals, deltas, steps_per_task, positive, total)


def write_summary(summary, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        fh.write(summary.summary_row() + "\n")


def read_steps_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != STEP_HEADER:
            raise HarnessError(f"{path}: unexpected step-CSV header {header!r}")
        out = []
        for line in fh:
            task, step, action, before, after, delta, pos = line.strip().split(",")
            out.append(
                {
                    "task": int(task),
                    "step": int(step),
                    "action": int(action),
                    "coverage_before": float(before),
                    "coverage_after": float(after),
                    "delta": float(delta),
                    "positive": int(pos),
                }
            )
    return out


def replay(steps_csv, tasks, run_cfg, sim_cfg, geom, out_dir=None):
    """Re-execute logged actions; verify coverage reproduces exactly.

    Optionally dumps per-channel PGM frames for every step. Returns the
    number of replayed steps; raises HarnessError on any mismatch.
    """
    action_cfg = actionmaps.ActionSpaceConfig.from_run(run_cfg, geom)
    check_task_compat(tasks, sim_cfg)
    records = read_steps_csv(steps_csv)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    environment = envmod.UnfoldEnv(sim_cfg, geom)
    current_task = None
    replayed = 0
    for rec in records:
        if rec["task"] != current_task:
            current_task = rec["task"]
            obs = environment.reset(tasks[current_task])
            if out_dir:
                _dump_frames(obs, out_dir, current_task, -1)
        action = actionmaps.decode_action(rec["action"], action_cfg, geom)
        result = environment.step(action)
        if result.coverage_after != rec["coverage_after"]:
            raise HarnessError(
                f"replay mismatch at task {current_task} step {rec['step']}: "
                f"log says {rec['coverage_after']!r}, "
                f"replay got {result.coverage_after!r}"
            )
        obs = result.obs
        if out_dir:
            _dump_frames(obs, out_dir, current_task, rec["step"])
        replayed += 1
    return replayed


def _dump_frames(obs, out_dir, task, step):
    frames = clothsim.observation_frames(obs)
    tag = "start" if step < 0 else f"step{step:02d}"
    for channel, gray in frames.items():
        clothsim.write_pgm(
            os.path.join(out_dir, f"task{task:03d}_{tag}_{channel}.pgm"), gray
        )
