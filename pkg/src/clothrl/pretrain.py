"""Stage 1: self-supervised per-pixel action-value pretraining.

Act in the simulator (epsilon-greedy over the masked value maps), label
every executed action with the coverage change it produced, store the
tuples in an on-disk replay log, and regress the per-pixel values with
MSE. The greedy argmax over the learned maps both drives later
collection and seeds the PPO actor.

Labels are the coverage delta as a fraction (percentage points / 100),
clipped to [-1, 1].
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import actionmaps, autodiff as ad, env as envmod, neuralnet as nn


class StoreFullError(Exception):
    pass


class StoreError(Exception):
    pass


@dataclass
class PretrainConfig:
    collect_steps: int = 6000
    updates: int = 3000
    batch: int = 64
    lr: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    capacity: int = 100000
    task_seed: int = 1000
    target_cov_max: float = 55.0
    max_episode_steps: int = 10
    success_threshold: float = 0.95
    log_every: int = 200

    @classmethod
    def from_run(cls, run_cfg):
        return cls(
            collect_steps=run_cfg["pretrain.collect_steps"],
            updates=run_cfg["pretrain.updates"],
            batch=run_cfg["pretrain.batch"],
            lr=run_cfg["pretrain.lr"],
            epsilon_start=run_cfg["pretrain.epsilon_start"],
            epsilon_end=run_cfg["pretrain.epsilon_end"],
            capacity=run_cfg["pretrain.capacity"],
            task_seed=run_cfg["pretrain.task_seed"],
            target_cov_max=run_cfg["pretrain.target_cov_max"],
            max_episode_steps=run_cfg["pretrain.max_episode_steps"],
            success_threshold=run_cfg["eval.success_threshold"],
            log_every=run_cfg["pretrain.log_every"],
        )


class ReplayStore:
    """Append-only on-disk sample log with uniform random reads.

    Record framing: u32 record length, then the payload -- occupancy
    plane (H*W float32), height plane (H*W float32), u32 flat action,
    float32 label. All little-endian. Records are immutable once
    written.
    """

    def __init__(self, path, height, width, capacity):
        self.path = path
        self.height = height
        self.width = width
        self.capacity = capacity
        self.plane = height * width
        self.record_payload = 4 * self.plane * 2 + 4 + 4
        self._offsets = []
        self._fh = open(path, "a+b")
        self._fh.seek(0, os.SEEK_END)
        if self._fh.tell():
            self._index_existing()

    def _index_existing(self):
        self._fh.seek(0)
        off = 0
        size = os.fstat(self._fh.fileno()).st_size
        while off < size:
            raw = self._read_at(off, 4)
            (length,) = struct.unpack("<I", raw)
            if length != self.record_payload:
                raise StoreError(
                    f"{self.path}: record length {length} does not match "
                    f"geometry {self.height}x{self.width}"
                )
            self._offsets.append(off)
            off += 4 + length
        if off != size:
            raise StoreError(f"{self.path}: trailing garbage")

    def _read_at(self, off, n):
        self._fh.seek(off)
        raw = self._fh.read(n)
        if len(raw) != n:
            raise StoreError(f"{self.path}: truncated record at {off}")
        return raw

    def __len__(self):
        return len(self._offsets)

    @property
    def full(self):
        return len(self._offsets) >= self.capacity

    def append(self, occupancy, height, action_k, label):
        if self.full:
            raise StoreFullError(f"store at capacity {self.capacity}")
        occ = np.ascontiguousarray(occupancy, dtype="<f4")
        hgt = np.ascontiguousarray(height, dtype="<f4")
        if occ.size != self.plane or hgt.size != self.plane:
            raise StoreError("sample does not match store geometry")
        self._fh.seek(0, os.SEEK_END)
        off = self._fh.tell()
        self._fh.write(struct.pack("<I", self.record_payload))
        self._fh.write(occ.tobytes())
        self._fh.write(hgt.tobytes())
        self._fh.write(struct.pack("<If", int(action_k), float(label)))
        self._offsets.append(off)

    def read(self, index):
        off = self._offsets[index] + 4
        raw = self._read_at(off, self.record_payload)
        occ = np.frombuffer(raw, dtype="<f4", count=self.plane).reshape(
            self.height, self.width
        )
        hgt = np.frombuffer(
            raw, dtype="<f4", count=self.plane, offset=4 * self.plane
        ).reshape(self.height, self.width)
        k, label = struct.unpack_from("<If", raw, 8 * self.plane)
        return occ.copy(), hgt.copy(), int(k), float(label)

    def sample_batch(self, rng, batch):
        idx = rng.integers(0, len(self._offsets), size=batch)
        return [self.read(int(i)) for i in idx]

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()


def greedy_action(params, obs, net_cfg, action_cfg, geom):
    """Argmax of the masked value maps; ties to the lowest flat index."""
    stack = actionmaps.build_layer_stack(obs, action_cfg)
    mask = actionmaps.build_masks(obs, action_cfg, geom)
    values = nn.forward_policy_raw(params, nn.preprocess(stack, net_cfg), net_cfg)
    return actionmaps.greedy_index(values, mask)


def _uniform_valid(mask, rng):
    flat = np.flatnonzero(mask.reshape(-1))
    return int(flat[rng.integers(0, len(flat))])


def epsilon_at(step, total, start, end):
    """Linear start -> end over the first half of collection, then flat."""
    half = max(total // 2, 1)
    if step >= half:
        return end
    return start + (end - start) * (step / half)


def collect(environment, params, net_cfg, action_cfg, cfg, rng, store,
            progress=None):
    """Run epsilon-greedy episodes, appending (obs, action, delta) samples.

    Returns collection stats. NoValidAction and protocol terminations
    reset the episode onto the next task of the deterministic stream.
    """
    tasks = envmod.task_stream(
        cfg.task_seed, environment.sim_cfg, environment.geom, cfg.target_cov_max
    )
    obs = environment.reset(next(tasks))
    episodes = 1
    no_valid_events = 0
    labels = []
    for step in range(cfg.collect_steps):
        mask = actionmaps.build_masks(obs, action_cfg, environment.geom)
        if not mask.any():
            no_valid_events += 1
            obs = environment.reset(next(tasks))
            episodes += 1
            mask = actionmaps.build_masks(obs, action_cfg, environment.geom)
        eps = epsilon_at(step, cfg.collect_steps, cfg.epsilon_start, cfg.epsilon_end)
        if rng.random() < eps:
            k = _uniform_valid(mask, rng)
        else:
            stack = actionmaps.build_layer_stack(obs, action_cfg)
            values = nn.forward_policy_raw(
                params, nn.preprocess(stack, net_cfg), net_cfg
            )
            k = actionmaps.greedy_index(values, mask)
        action = actionmaps.decode_action(k, action_cfg, environment.geom)
        result = environment.step(action)
        label = np.clip((result.coverage_after - result.coverage_before) / 100.0,
                        -1.0, 1.0)
        store.append(obs.occupancy.astype(np.float32), obs.height, k, label)
        labels.append(float(label))
        obs = result.obs
        reason = envmod.episode_over(
            environment.coverage_pct, obs, True, environment.steps_taken,
            cfg.max_episode_steps, cfg.success_threshold,
        )
        if reason is not None:
            obs = environment.reset(next(tasks))
            episodes += 1
        if progress and (step + 1) % cfg.log_every == 0:
            progress(step + 1, float(np.mean(labels[-cfg.log_every:])))
    store.flush()
    return {
        "steps": cfg.collect_steps,
        "episodes": episodes,
        "no_valid_events": no_valid_events,
        "mean_label": float(np.mean(labels)) if labels else 0.0,
    }


def batch_slices(samples, action_cfg, net_cfg):
    """Assemble the network input for each sample's own pyramid layer.

    Only the slice the action was taken in matters for the per-pixel
    regression, so each sample contributes one (H, W, 2) image plus the
    (v, u) index of the trained output pixel.
    """
    transforms = actionmaps.layer_transforms(action_cfg)
    m = action_cfg.n_scales
    xs = np.zeros(
        (len(samples), action_cfg.height, action_cfg.width, 2), dtype=np.float64
    )
    pix = np.zeros(len(samples), dtype=np.int64)
    labels = np.zeros(len(samples), dtype=np.float64)
    for n, (occ, hgt, k, label) in enumerate(samples):
        u, v, i, j = actionmaps.unflatten_index(k, action_cfg)
        xs[n] = actionmaps.transform_layer(occ, hgt, transforms[i * m + j])
        pix[n] = v * action_cfg.width + u
        labels[n] = label
    return nn.preprocess(xs, net_cfg), pix, labels


def pretrain_step(params, optimizer, samples, action_cfg, net_cfg):
    """One MSE step on a batch; returns (new params, batch mse).

    Gradients reach the trunk only through each sample's selected output
    pixel.
    """
    xs, pix, labels = batch_slices(samples, action_cfg, net_cfg)
    xs = xs.astype(net_cfg.np_dtype)
    pvars = nn.as_vars(params)
    maps = nn.forward_policy_var(pvars, xs, net_cfg)
    flat = ad.reshape(maps, (len(samples), -1))
    preds = ad.gather(flat, pix)
    err = ad.add(preds, ad.leaf(-labels.astype(net_cfg.np_dtype)))
    loss = ad.mean(ad.square(err))
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite pretraining loss")
    ad.backward(loss)
    new_params = optimizer.step(params, nn.grads_of(pvars))
    return new_params, float(loss.data)


def run_pretrain(run_cfg, out_dir, sim_cfg, geom, progress=None):
    """Full stage 1: collect, regress, checkpoint. Returns paths."""
    from .config import RunConfig  # noqa: F401  (type only)

    os.makedirs(out_dir, exist_ok=True)
    net_cfg = nn.NetConfig.from_run(run_cfg)
    action_cfg = actionmaps.ActionSpaceConfig.from_run(run_cfg, geom)
    cfg = PretrainConfig.from_run(run_cfg)
    rng = np.random.default_rng(run_cfg["seed"])
    params = nn.init_policy_params(net_cfg, rng)

    store_path = os.path.join(out_dir, "replay.bin")
    if os.path.exists(store_path):
        os.remove(store_path)
    store = ReplayStore(store_path, geom.height, geom.width, cfg.capacity)
    environment = envmod.UnfoldEnv(sim_cfg, geom)
    stats = collect(environment, params, net_cfg, action_cfg, cfg, rng, store,
                    progress=progress)

    optimizer = nn.Adam(params, lr=cfg.lr)
    metrics_path = os.path.join(out_dir, "pretrain_metrics.csv")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write("update,mse\n")
        for update in range(1, cfg.updates + 1):
            samples = store.sample_batch(rng, cfg.batch)
            params, mse = pretrain_step(params, optimizer, samples, action_cfg,
                                        net_cfg)
            fh.write(f"{update},{mse!r}\n")
            if progress and update % cfg.log_every == 0:
                progress(-update, mse)
    store.close()

    ckpt_path = os.path.join(out_dir, "pretrain.ckpt")
    nn.save_checkpoint(params, ckpt_path)
    return {"checkpoint": ckpt_path, "metrics": metrics_path, "store": store_path,
            "collect_stats": stats}
