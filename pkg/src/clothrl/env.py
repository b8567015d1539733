"""Episode-level wrapper around the cloth simulator.

One UnfoldEnv owns one cloth state plus the observation geometry and
coverage bookkeeping. The episode protocol shared by collection,
PPO rollouts, and evaluation: up to `max_steps` pick-place actions,
ending early when coverage exceeds the success threshold, the cloth
leaves the observation, or no valid action remains.

Environments are single-threaded and independent; run several instances
for parallel collection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import actionmaps, clothsim


@dataclass
class StepResult:
    obs: clothsim.Observation
    coverage_before: float  # percent
    coverage_after: float
    events: clothsim.ActionEvents


class UnfoldEnv:
    def __init__(self, sim_cfg, geom):
        self.sim_cfg = sim_cfg
        self.geom = geom
        self.mesh = clothsim.ClothMesh(sim_cfg.rows, sim_cfg.cols, sim_cfg.spacing)
        self.a_flat = clothsim.flat_reference_area(self.mesh, geom)
        self.state = None
        self.steps_taken = 0
        self._cov = None
        self._obs = None

    def reset(self, task):
        """Load a task (or a raw ClothState) and return the observation."""
        if isinstance(task, clothsim.ClothState):
            self.state = task.copy()
        else:
            self.state = task.state()
        self.steps_taken = 0
        self._refresh()
        return self._obs

    def _refresh(self):
        self._obs = clothsim.render_observation(self.state, self.geom)
        self._cov = float(self._obs.occupancy.sum()) * self.geom.pixel_size**2
        self._cov = self._cov / self.a_flat * 100.0

    def observe(self):
        return self._obs

    @property
    def coverage_pct(self):
        return self._cov

    @property
    def out_of_observation(self):
        return not bool(self._obs.occupancy.any())

    def step(self, action: actionmaps.WorldAction):
        """Execute one pick-place; returns the new observation and the
        coverage before/after in percent."""
        before = self._cov
        self.state, events = clothsim.apply_pick_place(
            self.state,
            action.pick,
            action.phi_deg,
            action.dist,
            self.sim_cfg,
            workspace=self.geom,
        )
        self.steps_taken += 1
        self._refresh()
        return StepResult(self._obs, before, self._cov, events)


def episode_over(coverage_pct, obs, mask_has_valid, steps_taken, max_steps,
                 success_threshold):
    """Shared termination rule; returns a reason string or None.

    `success_threshold` is a coverage fraction (e.g. 0.95), coverage is
    in percent.
    """
    if coverage_pct > success_threshold * 100.0:
        return "success"
    if not bool(obs.occupancy.any()):
        return "out_of_observation"
    if not mask_has_valid:
        return "no_valid_action"
    if steps_taken >= max_steps:
        return "max_steps"
    return None


def task_stream(base_seed, sim_cfg, geom, target_cov_max):
    """Deterministic endless task generator; element i is reproducible
    regardless of how many were consumed before it."""
    i = 0
    while True:
        yield clothsim.generate_task(
            base_seed + 7919 * i, target_cov_max, sim_cfg, geom
        )
        i += 1
