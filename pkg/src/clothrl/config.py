"""Run configuration: a flat tree of dotted keys with typed defaults.

Config files are line-oriented text, one `dotted.key = value` per line.
`#` starts a comment. Values are typed by the default they override:
int, float, bool (true/false), string, or list (`[a, b, c]`). Unknown
keys are rejected so typos fail loudly. Every run writes its fully
resolved config next to its outputs, and that file re-runs to identical
results.
"""

from __future__ import annotations

import copy


class ConfigError(Exception):
    pass


# Single source of truth for every tunable. Types are taken from these
# defaults when parsing overrides.
DEFAULTS = {
    "seed": 0,
    # --- cloth simulator ---
    "sim.rows": 16,
    "sim.cols": 16,
    "sim.spacing": 0.02,           # meters between neighboring particles
    "sim.max_particles": 4096,
    "sim.gravity": 9.8,
    "sim.dt": 0.01,
    "sim.damping": 0.98,
    "sim.relax_passes": 4,         # constraint passes per dynamics step
    "sim.polish_passes": 96,       # polish projection budget per settle call
    "sim.settle_max_iters": 30,
    "sim.substep_settle_iters": 3,
    "sim.settle_tolerance": 0.02,  # max structural strain after settle
    "sim.contact_tolerance": 1e-4,
    "sim.motion_tolerance": 1e-4,  # settle loop exits once max move per step drops below
    "sim.stiff_structural": 1.0,
    "sim.stiff_shear": 0.9,
    "sim.stiff_bend": 0.3,
    "sim.slack_structural": 0.0,   # compression slack per edge kind,
    "sim.slack_shear": 0.3,        # fraction of rest length; 1 = stretch-only
    "sim.slack_bend": 1.0,
    "sim.friction": 0.8,           # table friction coefficient
    "sim.inflate_rate": 0.5,       # pressure-lift gain in the settle polish
    "sim.grasp_radius_factor": 1.5,   # x rest spacing
    "sim.lift_factor": 1.5,           # lift height, x rest spacing
    "sim.substeps": 8,                # drag interpolation substeps per pick-place
    "sim.crumple_moves_max": 8,
    "sim.crumple_dist_min": 0.3,      # x cloth width
    "sim.crumple_dist_max": 1.0,
    # --- observation grid ---
    "obs.height": 64,
    "obs.width": 64,
    "obs.frame_fraction": 0.6,     # flat cloth span as a fraction of the frame
    "obs.pixel_size": 0.0,         # meters per pixel; 0 derives from frame_fraction
    # --- action space ---
    "action.rotations": 8,
    "action.scales": [1.0, 0.5],
    "action.pixel_displacement": 8.0,  # reference move length in pixels at scale 1
    # --- networks ---
    "net.channels": [16, 32, 16],
    "net.pool": False,             # one 2x down/up pair inside the trunk
    "net.height_scale": 10.0,      # multiplies the height channel at the net input
    # --- stage 1: self-supervised value pretraining ---
    "pretrain.collect_steps": 6000,
    "pretrain.updates": 3000,
    "pretrain.batch": 64,
    "pretrain.lr": 1e-3,
    "pretrain.epsilon_start": 1.0,
    "pretrain.epsilon_end": 0.1,
    "pretrain.capacity": 100000,
    "pretrain.task_seed": 1000,
    "pretrain.target_cov_max": 55.0,
    "pretrain.max_episode_steps": 10,
    "pretrain.log_every": 200,
    # --- stage 2: PPO fine-tuning ---
    "ppo.gamma": 0.99,
    "ppo.clip": 0.2,
    "ppo.epochs": 4,
    "ppo.minibatch": 64,
    "ppo.rollout_steps": 512,
    "ppo.envs": 8,
    "ppo.lr": 3e-4,
    "ppo.value_coef": 0.5,
    "ppo.entropy_coef": 0.01,
    "ppo.iterations": 30,
    "ppo.max_episode_steps": 10,
    "ppo.success_threshold": 0.95,
    "ppo.normalize_advantage": True,
    "ppo.scale_rewards": True,
    "ppo.scaled_critic_target": True,
    "ppo.init_logit_scale": 120.0, # multiplies the pretrained head when PPO starts
    "ppo.task_seed": 2000,
    "ppo.target_cov_max": 55.0,
    "ppo.checkpoint_every": 10,
    # --- evaluation protocol ---
    "eval.mode": "greedy",         # greedy | sample | random
    "eval.max_steps": 10,
    "eval.sample_seed": 123,
    "eval.success_threshold": 0.95,
}


def _parse_scalar(text, ref):
    """Parse one token with the type of the reference default."""
    text = text.strip()
    if isinstance(ref, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected bool, got {text!r}")
    if isinstance(ref, int):
        try:
            return int(text)
        except ValueError as e:
            raise ConfigError(f"expected int, got {text!r}") from e
    if isinstance(ref, float):
        try:
            return float(text)
        except ValueError as e:
            raise ConfigError(f"expected float, got {text!r}") from e
    return text


def parse_value(key, text):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key}")
    ref = DEFAULTS[key]
    text = text.strip()
    if isinstance(ref, list):
        if not (text.startswith("[") and text.endswith("]")):
            raise ConfigError(f"{key}: expected list like [a, b], got {text!r}")
        body = text[1:-1].strip()
        if not body:
            return []
        elem_ref = ref[0] if ref else 0.0
        return [_parse_scalar(tok, elem_ref) for tok in body.split(",")]
    return _parse_scalar(text, ref)


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved configuration: defaults plus file and --set overrides."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS)
        if values:
            for k, v in values.items():
                if k not in DEFAULTS:
                    raise ConfigError(f"unknown config key: {k}")
                self.values[k] = v

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f"unknown config key: {key}")
        return self.values[key]

    def set(self, key, value_text):
        self.values[key] = parse_value(key, value_text)

    def apply_file(self, path):
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, text = line.partition("=")
                key = key.strip()
                try:
                    self.values[key] = parse_value(key, text)
                except ConfigError as e:
                    raise ConfigError(f"{path}:{lineno}: {e}") from e

    def apply_sets(self, pairs):
        """Apply CLI overrides given as 'key=value' strings."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"--set expects key=value, got {pair!r}")
            key, _, text = pair.partition("=")
            self.set(key.strip(), text)

    def dump(self):
        lines = [f"{k} = {format_value(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dump())


def load_config(path=None, sets=(), seed=None):
    cfg = RunConfig()
    if path is not None:
        cfg.apply_file(path)
    cfg.apply_sets(sets)
    if seed is not None:
        cfg.values["seed"] = int(seed)
    return cfg
