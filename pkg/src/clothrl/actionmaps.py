"""Observation-aligned discrete action space.

The policy's output lives in a pyramid of L = n_rotations * n_scales
image layers. Layer (i, j) is the observation rotated by angle phi_i
and scaled by s_j about the image center, so that picking pixel (u, v)
of that layer means: grasp the world point that pixel looks at, then
move by distance d_j = d_ref / s_j along direction phi_i. Zoomed-out
layers (small s_j) see fewer cloth pixels and decode to longer moves,
so the layer masks automatically give coarse, violent actions a
proportionally smaller slice of the categorical distribution.

Everything here is a pure function of its inputs; sampling takes a
caller-supplied numpy Generator. Angles are degrees counter-clockwise
from +x toward +y (y points down the rendered image); rotations are
about the pixel-center of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# substituted for masked logits ahead of the max-subtracted softmax;
# masked probabilities are then zeroed exactly
MASK_FILL = -1e9


class NoValidActionError(Exception):
    """Every action in the current observation is masked out."""


@dataclass
class ActionSpaceConfig:
    height: int
    width: int
    rotations: int
    scales: tuple[float, ...]
    d_ref: float  # meters moved by a scale-1.0 action

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if self.rotations < 1:
            raise ValueError("need at least one rotation")
        if not self.scales:
            raise ValueError("need at least one scale")
        if any(not (0.0 < s <= 1.0) for s in self.scales):
            raise ValueError(f"scales must lie in (0, 1], got {self.scales}")
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be strictly decreasing")
        if self.d_ref <= 0:
            raise ValueError("d_ref must be positive")

    @property
    def n_rotations(self):
        return self.rotations

    @property
    def n_scales(self):
        return len(self.scales)

    @property
    def n_layers(self):
        return self.rotations * len(self.scales)

    @property
    def n_actions(self):
        return self.n_layers * self.height * self.width

    @property
    def angles_deg(self):
        """Phi set: 360 * i / n for i = 1..n (the last one is a full turn)."""
        n = self.rotations
        return tuple(360.0 * (i + 1) / n for i in range(n))

    @property
    def distances(self):
        return tuple(self.d_ref / s for s in self.scales)

    @property
    def min_distance(self):
        return self.distances[0]

    @property
    def max_distance(self):
        return self.distances[-1]

    @classmethod
    def from_run(cls, run_cfg, geom):
        return cls(
            height=run_cfg["obs.height"],
            width=run_cfg["obs.width"],
            rotations=run_cfg["action.rotations"],
            scales=tuple(run_cfg["action.scales"]),
            d_ref=run_cfg["action.pixel_displacement"] * geom.pixel_size,
        )


def _rot_entries(phi_deg):
    """cos/sin with exact values at the four cardinal angles, so identity
    and 180-degree layers reproduce the input bit for bit."""
    a = phi_deg % 360.0
    table = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if a in table:
        return table[a]
    r = np.deg2rad(a)
    return float(np.cos(r)), float(np.sin(r))


@dataclass
class LayerTransform:
    """Pixel-to-pixel affine map for one (rotation, scale) layer.

    forward: input pixel -> layer pixel; inverse: layer pixel -> input
    pixel (which is also how layers are sampled). Both are about the
    image center ((W-1)/2, (H-1)/2).
    """

    phi_deg: float
    scale: float
    height: int
    width: int
    _cs: tuple[float, float] = field(init=False, repr=False)

    def __post_init__(self):
        self._cs = _rot_entries(self.phi_deg)

    @property
    def center(self):
        return 0.5 * (self.width - 1), 0.5 * (self.height - 1)

    def layer_to_input(self, u, v):
        """Source pixel sampled by layer pixel (u, v): rotate by +phi and
        unscale about the center."""
        c, s = self._cs
        cu, cv = self.center
        du = (np.asarray(u, dtype=np.float64) - cu) / self.scale
        dv = (np.asarray(v, dtype=np.float64) - cv) / self.scale
        return cu + c * du - s * dv, cv + s * du + c * dv

    def input_to_layer(self, u, v):
        c, s = self._cs
        cu, cv = self.center
        du = np.asarray(u, dtype=np.float64) - cu
        dv = np.asarray(v, dtype=np.float64) - cv
        return (
            cu + self.scale * (c * du + s * dv),
            cv + self.scale * (-s * du + c * dv),
        )


def layer_transforms(cfg):
    """All L transforms, layer index l = rotation_i * n_scales + scale_j."""
    out = []
    for phi in cfg.angles_deg:
        for s in cfg.scales:
            out.append(LayerTransform(phi, s, cfg.height, cfg.width))
    return out


def _sample_grids(transform):
    uu, vv = np.meshgrid(
        np.arange(transform.width, dtype=np.float64),
        np.arange(transform.height, dtype=np.float64),
    )
    return transform.layer_to_input(uu, vv)


def _nearest(plane, su, sv):
    h, w = plane.shape
    ui = np.rint(su).astype(np.int64)
    vi = np.rint(sv).astype(np.int64)
    inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    out = np.zeros(su.shape, dtype=plane.dtype)
    out[inside] = plane[vi[inside], ui[inside]]
    return out


def _bilinear(plane, su, sv):
    h, w = plane.shape
    u0 = np.floor(su).astype(np.int64)
    v0 = np.floor(sv).astype(np.int64)
    fu = su - u0
    fv = sv - v0
    out = np.zeros(su.shape, dtype=np.float64)
    for dv in (0, 1):
        for du in (0, 1):
            ui = u0 + du
            vi = v0 + dv
            wgt = (fu if du else 1.0 - fu) * (fv if dv else 1.0 - fv)
            inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
            vals = np.zeros(su.shape, dtype=np.float64)
            vals[inside] = plane[vi[inside], ui[inside]]
            out += wgt * vals
    return out


def transform_layer(occupancy, height, transform):
    """One (H, W, 2) transformed view: occupancy nearest-neighbor (stays
    binary), height bilinear; out-of-source pixels are empty."""
    su, sv = _sample_grids(transform)
    out = np.zeros((transform.height, transform.width, 2), dtype=np.float64)
    out[:, :, 0] = _nearest(np.asarray(occupancy, dtype=np.float64), su, sv)
    out[:, :, 1] = _bilinear(np.asarray(height, dtype=np.float64), su, sv)
    return out


def build_layer_stack(obs, cfg):
    """(L, H, W, 2) stack of transformed observations."""
    if obs.occupancy.shape != (cfg.height, cfg.width):
        raise ValueError(
            f"observation {obs.occupancy.shape} does not match "
            f"action config {(cfg.height, cfg.width)}"
        )
    stack = np.zeros((cfg.n_layers, cfg.height, cfg.width, 2), dtype=np.float64)
    for l, tr in enumerate(layer_transforms(cfg)):
        stack[l] = transform_layer(obs.occupancy, obs.height, tr)
    return stack


def build_masks(obs, cfg, geom):
    """(L, H, W) boolean validity: the layer pixel sees cloth AND the
    decoded place point stays inside the workspace.

    An all-zero result is legal here; callers treat it as NoValidAction
    (sampling and argmax raise)."""
    occ = obs.occupancy
    mask = np.zeros((cfg.n_layers, cfg.height, cfg.width), dtype=bool)
    transforms = layer_transforms(cfg)
    l = 0
    for i, phi in enumerate(cfg.angles_deg):
        rad = np.deg2rad(phi % 360.0)
        cphi, sphi = _rot_entries(phi)
        for j, s in enumerate(cfg.scales):
            tr = transforms[l]
            su, sv = _sample_grids(tr)
            on_cloth = _nearest(occ, su, sv).astype(bool)
            px, py = geom.pixel_to_world(su, sv)
            dist = cfg.d_ref / s
            in_bounds = geom.contains(px + dist * cphi, py + dist * sphi)
            mask[l] = on_cloth & in_bounds
            l += 1
    return mask


def has_valid_action(mask):
    return bool(np.asarray(mask).any())


# ---------------------------------------------------------------------------
# flat-index codec


def flatten_index(u, v, i, j, cfg):
    """k = ((i * m + j) * H + v) * W + u, validated."""
    u, v, i, j = int(u), int(v), int(i), int(j)
    m = cfg.n_scales
    if not (0 <= u < cfg.width and 0 <= v < cfg.height):
        raise ValueError(f"pixel ({u}, {v}) out of range")
    if not (0 <= i < cfg.rotations and 0 <= j < m):
        raise ValueError(f"layer ({i}, {j}) out of range")
    return ((i * m + j) * cfg.height + v) * cfg.width + u


def unflatten_index(k, cfg):
    """Inverse of flatten_index: k -> (u, v, i, j)."""
    k = int(k)
    if not (0 <= k < cfg.n_actions):
        raise ValueError(f"flat action {k} out of range [0, {cfg.n_actions})")
    u = k % cfg.width
    rest = k // cfg.width
    v = rest % cfg.height
    rest //= cfg.height
    m = cfg.n_scales
    return u, v, rest // m, rest % m


@dataclass
class WorldAction:
    pick: tuple[float, float]
    phi_deg: float
    dist: float


def decode_action(k, cfg, geom):
    """Flat index -> world pick point, move direction, move distance."""
    u, v, i, j = unflatten_index(k, cfg)
    tr = LayerTransform(cfg.angles_deg[i], cfg.scales[j], cfg.height, cfg.width)
    su, sv = tr.layer_to_input(float(u), float(v))
    x, y = geom.pixel_to_world(su, sv)
    return WorldAction(
        pick=(float(x), float(y)),
        phi_deg=cfg.angles_deg[i],
        dist=cfg.distances[j],
    )


# ---------------------------------------------------------------------------
# masked categorical distribution


class MaskedCategorical:
    """Discrete distribution over flat actions with hard validity masking.

    Masked logits are replaced by a large negative fill before a
    max-subtracted softmax, then their probabilities are zeroed exactly
    and the rest renormalized. log_prob of a masked action is -inf.
    """

    def __init__(self, logits, mask):
        logits = np.asarray(logits, dtype=np.float64).reshape(-1)
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if logits.shape != mask.shape:
            raise ValueError(f"logits {logits.shape} vs mask {mask.shape}")
        if not mask.any():
            raise NoValidActionError("all actions masked")
        if not np.isfinite(logits[mask]).all():
            raise ValueError("non-finite logits under the mask")
        z = np.where(mask, logits, MASK_FILL)
        zmax = z.max()
        exp = np.exp(z - zmax)
        exp[~mask] = 0.0
        total = exp.sum()
        self.mask = mask
        self._probs = exp / total
        self._log_norm = zmax + np.log(total)
        self._logits = z

    def probs(self):
        return self._probs

    def log_prob(self, k):
        k = int(k)
        if not self.mask[k]:
            return -np.inf
        return float(self._logits[k] - self._log_norm)

    def entropy(self):
        p = self._probs[self.mask]
        logp = self._logits[self.mask] - self._log_norm
        return float(-(p * logp).sum())

    def sample(self, rng):
        return int(rng.choice(len(self._probs), p=self._probs))

    def argmax(self):
        """Highest-probability valid action; ties go to the lowest index."""
        masked = np.where(self.mask, self._logits, -np.inf)
        return int(np.argmax(masked))


def greedy_index(values, mask):
    """Argmax of a value map over the valid set, ties to lowest flat
    index; raises NoValidActionError on an empty mask."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise NoValidActionError("all actions masked")
    return int(np.argmax(np.where(mask, values, -np.inf)))
