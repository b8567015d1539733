"""Stage 2: PPO fine-tuning of the pretrained observation-aligned policy.

Rollouts sample from the masked categorical over the policy's layer
pyramid; updates maximize the clipped surrogate with a one-step TD
advantage, an MSE critic on discounted return-to-go, and an entropy
bonus. Rewards follow the coverage-based scheme (dense delta * 20,
-1 on decrease, +5 bonus for crossing 0.9) and are divided by the
running standard deviation of the reward sequence before use.

The stored log-probabilities are computed through the same float32
kernel the updates use, so before the first update of an iteration
every probability ratio is exactly 1.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import actionmaps, autodiff as ad, env as envmod, neuralnet as nn

METRICS_HEADER = (
    "iter,episode,step,coverage,reward,scaled_reward,value,advantage,"
    "entropy,clip_fraction,loss_policy,loss_value"
)


class PPOError(Exception):
    pass


@dataclass
class PPOConfig:
    gamma: float = 0.99
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 64
    rollout_steps: int = 512
    envs: int = 8
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    iterations: int = 30
    max_episode_steps: int = 10
    success_threshold: float = 0.95
    normalize_advantage: bool = True
    scale_rewards: bool = True
    scaled_critic_target: bool = True
    init_logit_scale: float = 40.0
    task_seed: int = 2000
    target_cov_max: float = 55.0
    checkpoint_every: int = 10

    def __post_init__(self):
        if not (0.0 < self.clip < 1.0):
            raise ValueError(f"clip range must be in (0, 1), got {self.clip}")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if not (0.0 < self.success_threshold <= 1.0):
            raise ValueError(
                f"success threshold must be in (0, 1], got {self.success_threshold}"
            )

    @classmethod
    def from_run(cls, run_cfg):
        return cls(
            gamma=run_cfg["ppo.gamma"],
            clip=run_cfg["ppo.clip"],
            epochs=run_cfg["ppo.epochs"],
            minibatch=run_cfg["ppo.minibatch"],
            rollout_steps=run_cfg["ppo.rollout_steps"],
            envs=run_cfg["ppo.envs"],
            lr=run_cfg["ppo.lr"],
            value_coef=run_cfg["ppo.value_coef"],
            entropy_coef=run_cfg["ppo.entropy_coef"],
            iterations=run_cfg["ppo.iterations"],
            max_episode_steps=run_cfg["ppo.max_episode_steps"],
            success_threshold=run_cfg["ppo.success_threshold"],
            normalize_advantage=run_cfg["ppo.normalize_advantage"],
            scale_rewards=run_cfg["ppo.scale_rewards"],
            scaled_critic_target=run_cfg["ppo.scaled_critic_target"],
            init_logit_scale=run_cfg["ppo.init_logit_scale"],
            task_seed=run_cfg["ppo.task_seed"],
            target_cov_max=run_cfg["ppo.target_cov_max"],
            checkpoint_every=run_cfg["ppo.checkpoint_every"],
        )


# ---------------------------------------------------------------------------
# reward


def compute_reward(prev_cov, new_cov, bonus_threshold=0.9):
    """Coverage-change reward, both arguments as fractions.

    Decrease: -1. Increase: 20 * delta. Crossing the bonus threshold
    upward adds a sparse +5 on top of the dense term. No change: 0.
    """
    if new_cov < prev_cov:
        reward = -1.0
    elif new_cov > prev_cov:
        reward = (new_cov - prev_cov) * 20.0
    else:
        reward = 0.0
    if prev_cov <= bonus_threshold < new_cov:
        reward += 5.0
    return reward


class RewardScaler:
    """Welford running statistics of every reward seen; scaling divides
    by the all-time population standard deviation (floored).

    Rewards pass through unchanged while the deviation is undefined or
    degenerate: fewer than two samples, or a history of identical values
    (dividing those by the floor would blow a -1 up to -1e8)."""

    FLOOR = 1e-8

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, reward):
        self.count += 1
        delta = reward - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (reward - self.mean)

    @property
    def sigma(self):
        if self.count < 1:
            return 0.0
        return float(np.sqrt(self.m2 / self.count))

    def scale(self, reward):
        if self.count < 2 or self.sigma < self.FLOOR:
            return float(reward)
        return float(reward / max(self.sigma, self.FLOOR))


def advantage(scaled_reward, value, value_next, done, gamma):
    """One-step TD advantage: r + gamma * V(o') - V(o), cut at episode end."""
    bootstrap = 0.0 if done else value_next
    return scaled_reward + gamma * bootstrap - value


# ---------------------------------------------------------------------------
# rollout storage


@dataclass
class Transition:
    stack: np.ndarray  # (L, H, W, 2) float32, preprocessed
    mask: np.ndarray  # (L*H*W,) bool
    obs_input: np.ndarray  # (H, W, 2) float32, preprocessed critic input
    action: int
    logp_old: float
    reward: float
    scaled_reward: float
    done: bool
    value: float
    value_next: float
    coverage: float  # percent, after the step
    episode: int
    step: int


@dataclass
class RolloutBuffer:
    transitions: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.transitions)

    def add(self, tr):
        self.transitions.append(tr)

    def clear(self):
        self.transitions.clear()
        self.advantages = None
        self.returns = None

    def finalize(self, gamma, use_scaled_for_return=True):
        """Fill per-transition advantages and discounted return-to-go.

        Episodes are contiguous runs ending in done=True; the recurrence
        G_t = r_t + gamma * G_{t+1} restarts at every boundary.
        """
        n = len(self.transitions)
        adv = np.zeros(n, dtype=np.float64)
        ret = np.zeros(n, dtype=np.float64)
        running = 0.0
        for t in range(n - 1, -1, -1):
            tr = self.transitions[t]
            r = tr.scaled_reward if use_scaled_for_return else tr.reward
            if tr.done:
                running = 0.0
            running = r + gamma * running
            ret[t] = running
            adv[t] = advantage(tr.scaled_reward, tr.value, tr.value_next,
                               tr.done, gamma)
        self.advantages = adv
        self.returns = ret
        return adv, ret


# ---------------------------------------------------------------------------
# acting


def policy_logits(actor, stack_pre, net_cfg):
    """(L, H, W) float32 logits from a preprocessed stack."""
    return nn.forward_policy_raw(actor, stack_pre, net_cfg)


def run_episode(environment, actor, critic, scaler, ppo_cfg, net_cfg, action_cfg,
                rng, task, episode_index=0):
    """Play one episode, returning its transitions and summary.

    Per step: render, build the layer stack and masks, sample from the
    masked categorical, execute, reward, scale. Terminates on success
    threshold, out-of-observation, NoValidAction, or the step cap.
    """
    obs = environment.reset(task)
    transitions = []
    reason = None
    start_cov = environment.coverage_pct
    mask = actionmaps.build_masks(obs, action_cfg, environment.geom)
    if not mask.any():
        return transitions, {"episode": episode_index, "reason": "no_valid_action",
                             "start_coverage": start_cov,
                             "final_coverage": start_cov, "steps": 0}
    stack = nn.preprocess(
        actionmaps.build_layer_stack(obs, action_cfg), net_cfg
    )
    obs_input = nn.preprocess(
        np.stack([obs.occupancy.astype(np.float64), obs.height], axis=-1), net_cfg
    )
    for step in range(ppo_cfg.max_episode_steps):
        logits = policy_logits(actor, stack, net_cfg)
        flat_mask = mask.reshape(-1)
        dist = actionmaps.MaskedCategorical(logits.reshape(-1), flat_mask)
        k = dist.sample(rng)
        logp_old = float(
            ad.masked_log_softmax_raw(
                logits.reshape(1, -1), flat_mask.reshape(1, -1)
            )[0][0, k]
        )
        value = float(nn.forward_critic_raw(critic, obs_input[None], net_cfg)[0])
        action = actionmaps.decode_action(k, action_cfg, environment.geom)
        result = environment.step(action)
        reward = compute_reward(result.coverage_before / 100.0,
                                result.coverage_after / 100.0)
        scaler.update(reward)
        scaled = scaler.scale(reward) if ppo_cfg.scale_rewards else reward

        next_obs = result.obs
        next_mask = actionmaps.build_masks(next_obs, action_cfg, environment.geom)
        next_obs_input = nn.preprocess(
            np.stack([next_obs.occupancy.astype(np.float64), next_obs.height],
                     axis=-1),
            net_cfg,
        )
        value_next = float(
            nn.forward_critic_raw(critic, next_obs_input[None], net_cfg)[0]
        )
        reason = envmod.episode_over(
            environment.coverage_pct, next_obs, bool(next_mask.any()),
            environment.steps_taken, ppo_cfg.max_episode_steps,
            ppo_cfg.success_threshold,
        )
        transitions.append(
            Transition(
                stack=stack.astype(np.float32),
                mask=flat_mask.copy(),
                obs_input=obs_input.astype(np.float32),
                action=k,
                logp_old=logp_old,
                reward=reward,
                scaled_reward=scaled,
                done=reason is not None,
                value=value,
                value_next=value_next,
                coverage=result.coverage_after,
                episode=episode_index,
                step=step,
            )
        )
        if reason is not None:
            break
        obs = next_obs
        mask = next_mask
        obs_input = next_obs_input
        stack = nn.preprocess(
            actionmaps.build_layer_stack(obs, action_cfg), net_cfg
        )
    return transitions, {
        "episode": episode_index,
        "reason": reason or "max_steps",
        "start_coverage": start_cov,
        "final_coverage": environment.coverage_pct,
        "steps": len(transitions),
    }


# ---------------------------------------------------------------------------
# loss


def ppo_loss(actor_vars, critic_vars, batch, ppo_cfg, net_cfg):
    """Clipped-surrogate + value + entropy loss over one minibatch.

    batch: dict with stacks (B, L, H, W, 2), masks (B, N), actions (B,),
    logp_old (B,), advantages (B,), returns (B,), obs (B, H, W, 2).
    Returns (loss Var, diagnostics dict).
    """
    stacks = batch["stacks"]
    B, L = stacks.shape[0], stacks.shape[1]
    masks = batch["masks"]
    adv = batch["advantages"]
    if ppo_cfg.normalize_advantage and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    adv = adv.astype(stacks.dtype)

    maps = nn.forward_policy_var(
        actor_vars, stacks.reshape((-1,) + stacks.shape[2:]), net_cfg
    )
    flat = ad.reshape(maps, (B, -1))
    logp_all = ad.masked_log_softmax(flat, masks)
    logp = ad.gather(logp_all, batch["actions"])
    ratio = ad.exp(ad.add(logp, ad.leaf(-batch["logp_old"].astype(stacks.dtype))))
    if not np.isfinite(ratio.data).all():
        bad = int(np.flatnonzero(~np.isfinite(ratio.data))[0])
        raise PPOError(f"non-finite probability ratio at transition {bad}")
    surr = ad.minimum(
        ad.mul(ratio, ad.leaf(adv)),
        ad.mul(ad.clip(ratio, 1.0 - ppo_cfg.clip, 1.0 + ppo_cfg.clip), ad.leaf(adv)),
    )
    policy_loss = ad.mul_const(ad.mean(surr), -1.0)

    values = nn.forward_critic_var(critic_vars, batch["obs"], net_cfg)
    verr = ad.add(values, ad.leaf(-batch["returns"].astype(stacks.dtype)))
    value_loss = ad.mean(ad.square(verr))

    entropy = ad.mean(ad.masked_entropy(logp_all, masks))
    loss = ad.add(
        policy_loss,
        ad.add(
            ad.mul_const(value_loss, ppo_cfg.value_coef),
            ad.mul_const(entropy, -ppo_cfg.entropy_coef),
        ),
    )
    clip_frac = float(np.mean(np.abs(ratio.data - 1.0) > ppo_cfg.clip))
    diag = {
        "loss_policy": float(policy_loss.data),
        "loss_value": float(value_loss.data),
        "entropy": float(entropy.data),
        "clip_fraction": clip_frac,
        "ratio_mean": float(ratio.data.mean()),
        "ratio_max": float(ratio.data.max()),
    }
    return loss, diag


def minibatch_of(buffer, idx):
    trs = [buffer.transitions[i] for i in idx]
    return {
        "stacks": np.stack([t.stack for t in trs]),
        "masks": np.stack([t.mask for t in trs]),
        "actions": np.array([t.action for t in trs], dtype=np.int64),
        "logp_old": np.array([t.logp_old for t in trs], dtype=np.float64),
        "advantages": buffer.advantages[idx],
        "returns": buffer.returns[idx],
        "obs": np.stack([t.obs_input for t in trs]),
    }


# ---------------------------------------------------------------------------
# training loop


def scaled_actor_head(params, scale):
    """Copy of pretrained params with the final head conv scaled, turning
    value maps into usably sharp initial logits (the head is linear, so
    this multiplies every logit by `scale`)."""
    out = {k: v.copy() for k, v in params.items()}
    head = max(
        int(k[4:-2]) for k in params if k.startswith("conv") and k.endswith("_w")
    )
    out[f"conv{head}_w"] *= scale
    out[f"conv{head}_b"] *= scale
    return out


def train(run_cfg, out_dir, sim_cfg, geom, pretrained_ckpt=None, progress=None,
          iteration_hook=None):
    """Full stage 2. With pretrained_ckpt=None trains from scratch.

    Writes metrics.csv (one row per transition, iteration aggregates
    attached) and periodic actor/critic checkpoints. Returns a summary
    with per-iteration aggregates; halts early (keeping the last good
    checkpoint) if anything goes non-finite.
    """
    os.makedirs(out_dir, exist_ok=True)
    net_cfg = nn.NetConfig.from_run(run_cfg)
    action_cfg = actionmaps.ActionSpaceConfig.from_run(run_cfg, geom)
    cfg = PPOConfig.from_run(run_cfg)
    rng = np.random.default_rng(run_cfg["seed"] + 11)

    if pretrained_ckpt is not None:
        base = {k: v.astype(net_cfg.np_dtype)
                for k, v in nn.load_checkpoint(pretrained_ckpt).items()}
        actor = scaled_actor_head(base, cfg.init_logit_scale)
        critic = nn.init_critic_params(net_cfg, rng, trunk_from=base)
    else:
        actor = nn.init_policy_params(net_cfg, rng)
        critic = nn.init_critic_params(net_cfg, rng, trunk_from=actor)

    envs = [envmod.UnfoldEnv(sim_cfg, geom) for _ in range(cfg.envs)]
    streams = [
        envmod.task_stream(cfg.task_seed + 1_000_003 * e, sim_cfg, geom,
                           cfg.target_cov_max)
        for e in range(cfg.envs)
    ]
    scaler = RewardScaler()
    opt_actor = nn.Adam(actor, lr=cfg.lr)
    opt_critic = nn.Adam(critic, lr=cfg.lr)
    buffer = RolloutBuffer()
    episode_counter = 0
    history = []
    halted = None

    metrics_path = os.path.join(out_dir, "metrics.csv")
    metrics = open(metrics_path, "w", encoding="utf-8")
    metrics.write(METRICS_HEADER + "\n")

    def save(tag):
        nn.save_checkpoint(actor, os.path.join(out_dir, f"actor_iter{tag}.ckpt"))
        nn.save_checkpoint(critic, os.path.join(out_dir, f"critic_iter{tag}.ckpt"))

    try:
        for it in range(1, cfg.iterations + 1):
            buffer.clear()
            ep_summaries = []
            while len(buffer) < cfg.rollout_steps:
                e = episode_counter % cfg.envs
                task = next(streams[e])
                trs, summary = run_episode(
                    envs[e], actor, critic, scaler, cfg, net_cfg, action_cfg,
                    rng, task, episode_index=episode_counter,
                )
                episode_counter += 1
                for tr in trs:
                    buffer.add(tr)
                ep_summaries.append(summary)
            buffer.finalize(cfg.gamma, use_scaled_for_return=cfg.scaled_critic_target)

            n = len(buffer)
            diag_last = None
            try:
                for _ in range(cfg.epochs):
                    order = rng.permutation(n)
                    for start in range(0, n, cfg.minibatch):
                        idx = order[start : start + cfg.minibatch]
                        if len(idx) < 2:
                            continue
                        batch = minibatch_of(buffer, idx)
                        avars = nn.as_vars(actor)
                        cvars = nn.as_vars(critic)
                        loss, diag = ppo_loss(avars, cvars, batch, cfg, net_cfg)
                        if not np.isfinite(loss.data):
                            raise PPOError(f"non-finite loss at iteration {it}")
                        ad.backward(loss)
                        actor = opt_actor.step(actor, nn.grads_of(avars))
                        critic = opt_critic.step(critic, nn.grads_of(cvars))
                        diag_last = diag
            except (PPOError, FloatingPointError) as err:
                halted = f"iteration {it}: {err}"
                break

            finals = [s["final_coverage"] for s in ep_summaries]
            row = {
                "iteration": it,
                "episodes": len(ep_summaries),
                "mean_final_coverage": float(np.mean(finals)),
                "mean_reward": float(np.mean([t.reward for t in buffer.transitions])),
                "mean_scaled_reward": float(
                    np.mean([t.scaled_reward for t in buffer.transitions])
                ),
                **(diag_last or {}),
            }
            history.append(row)
            for t, tr in enumerate(buffer.transitions):
                metrics.write(
                    f"{it},{tr.episode},{tr.step},{tr.coverage!r},{tr.reward!r},"
                    f"{tr.scaled_reward!r},{tr.value!r},"
                    f"{float(buffer.advantages[t])!r},"
                    f"{row.get('entropy', 0.0)!r},{row.get('clip_fraction', 0.0)!r},"
                    f"{row.get('loss_policy', 0.0)!r},{row.get('loss_value', 0.0)!r}\n"
                )
            metrics.flush()
            if progress:
                progress(row)
            if iteration_hook:
                iteration_hook(it, actor, critic, row)
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save(it)
    finally:
        metrics.close()
    save("_final")
    return {
        "actor": actor,
        "critic": critic,
        "history": history,
        "halted": halted,
        "metrics": metrics_path,
        "final_actor_ckpt": os.path.join(out_dir, "actor_iter_final.ckpt"),
        "final_critic_ckpt": os.path.join(out_dir, "critic_iter_final.ckpt"),
        "episodes": episode_counter,
    }
