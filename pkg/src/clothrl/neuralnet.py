"""Fully-convolutional policy head and pooled scalar critic.

The policy is a stack of 3x3 same-padding convolutions with rectifiers
and a final linear 1-channel convolution; it maps each (H, W, 2) image
to an (H, W) map of logits. Action-pyramid layers ride the batch axis,
which is exactly what makes the weights shared across rotations and
scales: slice l of the output depends only on slice l of the input.

The critic reuses the convolutional trunk (all but the final head
convolution), global-average-pools it, and applies a single affine head
to produce one scalar per observation.

Parameters live in a plain name -> ndarray dict. Forward passes come in
two flavors built on the same kernels: *_raw (no tape, for rollouts and
evaluation) and *_var (autodiff Vars, for training).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CKPT_MAGIC = b"CPPO"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class NetConfig:
    channels: tuple[int, ...] = (16, 32, 16)
    in_channels: int = 2
    pool: bool = False          # one 2x down/up pair around the middle convs
    height_scale: float = 10.0  # multiplies the metric height channel
    dtype: str = "f4"           # f4 for training, f8 for gradient checks

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f4" else np.float64

    @classmethod
    def from_run(cls, run_cfg):
        return cls(
            channels=tuple(run_cfg["net.channels"]),
            pool=run_cfg["net.pool"],
            height_scale=run_cfg["net.height_scale"],
        )


def _widths(cfg):
    """Channel widths per conv: in -> hidden... -> 1 (policy head)."""
    return (cfg.in_channels, *cfg.channels, 1)


def init_policy_params(cfg, rng):
    """Fan-in-scaled normal kernels, zero biases."""
    widths = _widths(cfg)
    params = {}
    for i, (ci, co) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        fan_in = 9 * ci
        params[f"conv{i}_w"] = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), size=(3, 3, ci, co)
        ).astype(cfg.np_dtype)
        params[f"conv{i}_b"] = np.zeros(co, dtype=cfg.np_dtype)
    return params


def init_critic_params(cfg, rng, trunk_from=None):
    """Critic = shared trunk (optionally copied from a policy) + affine head."""
    widths = _widths(cfg)
    n_trunk = len(widths) - 2  # all convs except the policy head
    params = {}
    for i in range(1, n_trunk + 1):
        if trunk_from is not None:
            params[f"conv{i}_w"] = trunk_from[f"conv{i}_w"].copy()
            params[f"conv{i}_b"] = trunk_from[f"conv{i}_b"].copy()
        else:
            ci, co = widths[i - 1], widths[i]
            params[f"conv{i}_w"] = rng.normal(
                0.0, np.sqrt(2.0 / (9 * ci)), size=(3, 3, ci, co)
            ).astype(cfg.np_dtype)
            params[f"conv{i}_b"] = np.zeros(co, dtype=cfg.np_dtype)
    c_last = widths[-2]
    params["value_w"] = rng.normal(0.0, np.sqrt(1.0 / c_last), size=(c_last,)).astype(
        cfg.np_dtype
    )
    params["value_b"] = np.zeros((), dtype=cfg.np_dtype)
    return params


def preprocess(stack, cfg):
    """Scale the height channel; accepts (..., H, W, 2)."""
    x = np.asarray(stack, dtype=cfg.np_dtype).copy()
    x[..., 1] *= cfg.height_scale
    return x


def n_convs(cfg):
    return len(cfg.channels) + 1


def forward_policy_raw(params, stack, cfg):
    """(B, H, W, 2) preprocessed input -> (B, H, W) logits, no tape."""
    x = stack
    last = n_convs(cfg)
    for i in range(1, last + 1):
        x = ad.conv3x3_raw(x, params[f"conv{i}_w"], params[f"conv{i}_b"])
        if i < last:
            x = np.maximum(x, 0.0)
            if cfg.pool and i == 1:
                x = ad.avg_pool2_raw(x)
        if cfg.pool and i == last - 1:
            x = ad.upsample2_raw(x)
    return x[..., 0]


def forward_policy_var(param_vars, stack, cfg):
    """Tape version of forward_policy_raw; stack is a constant ndarray."""
    x = ad.leaf(stack)
    last = n_convs(cfg)
    for i in range(1, last + 1):
        x = ad.conv3x3(x, param_vars[f"conv{i}_w"], param_vars[f"conv{i}_b"])
        if i < last:
            x = ad.relu(x)
            if cfg.pool and i == 1:
                x = ad.avg_pool2(x)
        if cfg.pool and i == last - 1:
            x = ad.upsample2(x)
    b, h, w = x.shape[0], x.shape[1], x.shape[2]
    return ad.reshape(x, (b, h, w))


def forward_critic_raw(params, obs_batch, cfg):
    """(B, H, W, 2) preprocessed observation -> (B,) values, no tape."""
    x = obs_batch
    n_trunk = n_convs(cfg) - 1
    for i in range(1, n_trunk + 1):
        x = ad.conv3x3_raw(x, params[f"conv{i}_w"], params[f"conv{i}_b"])
        x = np.maximum(x, 0.0)
        if cfg.pool and i == 1:
            x = ad.avg_pool2_raw(x)
    pooled = x.mean(axis=(1, 2))
    return pooled @ params["value_w"] + params["value_b"]


def forward_critic_var(param_vars, obs_batch, cfg):
    x = ad.leaf(obs_batch)
    n_trunk = n_convs(cfg) - 1
    for i in range(1, n_trunk + 1):
        x = ad.conv3x3(x, param_vars[f"conv{i}_w"], param_vars[f"conv{i}_b"])
        x = ad.relu(x)
        if cfg.pool and i == 1:
            x = ad.avg_pool2(x)
    pooled = ad.global_mean_pool(x)
    return ad.affine_vec(pooled, param_vars["value_w"], param_vars["value_b"])


def as_vars(params):
    return {k: ad.param(v) for k, v in params.items()}


def grads_of(param_vars):
    return {
        k: (v.grad if v.grad is not None else np.zeros_like(v.data))
        for k, v in param_vars.items()
    }


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, grads, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new params, mutates m/v.

    Raises on non-finite gradients, naming the offending parameter.
    """
    out = {}
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * (g * g)
        mhat = m[name] / (1.0 - beta1**t)
        vhat = v[name] / (1.0 - beta2**t)
        out[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return out


class Adam:
    """Stateful wrapper around adam_step."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, params, grads):
        self.t += 1
        return adam_step(
            params, grads, self.m, self.v, self.t,
            self.lr, self.beta1, self.beta2, self.eps,
        )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, path):
    """Bit-exact format: magic 'CPPO', u32 version, u32 tensor count;
    per tensor u32 name length, name bytes, u32 rank, u32 dims..., then
    row-major little-endian float32 payload."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(params)))
        for name, arr in params.items():
            # asarray keeps 0-d shapes (ascontiguousarray would promote
            # them to 1-d); tobytes() makes the row-major copy
            data = np.asarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    def need(fh, n):
        raw = fh.read(n)
        if len(raw) != n:
            raise CheckpointError(f"{path}: truncated checkpoint")
        return raw

    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        version, count = struct.unpack("<II", need(fh, 8))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", need(fh, 4))
            name = need(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", need(fh, 4))
            shape = struct.unpack(f"<{rank}I", need(fh, 4 * rank))
            n_items = int(np.prod(shape)) if rank else 1
            payload = need(fh, 4 * n_items)
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            params[name] = arr
    return params
