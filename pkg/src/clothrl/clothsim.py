"""Deterministic quasi-static cloth simulator.

A rectangular particle grid connected by structural, shear, and bend
distance constraints, relaxed with position-based dynamics: gravity as a
per-step displacement, Gauss-Seidel constraint projection over
precolored independent edge groups, a z >= 0 table plane, and velocity
damping. Everything is float64 numpy and bit-reproducible for fixed
inputs: same state + same action -> same successor, always.

Conventions:
  * world x, y span the table plane, z is up; the table is z = 0
  * observation pixel (v, u) = (row, col); world x grows with u and
    world y with v, so the image is the top view with y pointing down
    the screen
  * angles are degrees, counter-clockwise from +x toward +y

Edge groups are colored so that no particle appears twice within a
group; projecting a group in one vectorized update is then exactly a
sequential Gauss-Seidel sweep in group order.

Constraints limit stretch on every edge, but compression handling is
per kind: structural edges are bilateral (the sheet keeps local
density), shear edges allow a slack window before resisting compression
(a fold crease compresses the crossing diagonals to ~0.71 rest, so the
window is what lets creases persist while blocking in-plane collapse),
and bend edges never resist compression (thin fabric folds freely).

Table friction is position-based: a particle in contact keeps its xy
position when the requested slide is below mu times the normal push
(static), and loses that much slide otherwise (dynamic). Without it the
whole sheet drifts toward any pulled point and every drag gathers the
cloth into a heap.

Pure in-plane projection jams on bunched material: a compressed core
inside an at-rest shell cannot expand without hoop-stretching the
shell, which is exactly why real fabric buckles out of plane. The
settle polish therefore interleaves projection with a pressure lift
that raises every compressed particle in proportion to the compression
around it, letting excess area dome upward until the in-plane metric
relaxes back to rest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

STRUCTURAL, SHEAR, BEND = 0, 1, 2

# corrections below this relative strain are skipped, so a rest state is
# an exact fixed point of the projector
DEAD_BAND = 1e-12


# gray value per meter of height in PGM frame dumps (0.1 m saturates)
HEIGHT_GRAY_PER_METER = 2550.0

TASK_MAGIC = b"CTSK"
TASK_VERSION = 1


class SimError(Exception):
    pass


@dataclass
class SimConfig:
    rows: int = 16
    cols: int = 16
    spacing: float = 0.02
    max_particles: int = 4096
    gravity: float = 9.8
    dt: float = 0.01
    damping: float = 0.98
    relax_passes: int = 4
    polish_passes: int = 96
    settle_max_iters: int = 30
    substep_settle_iters: int = 6
    settle_tolerance: float = 0.02
    contact_tolerance: float = 1e-4
    motion_tolerance: float = 1e-4
    stiff_structural: float = 1.0
    stiff_shear: float = 0.9
    stiff_bend: float = 0.3
    # allowed compressions before an edge pushes back, as a fraction of
    # rest length: 0 = bilateral, 1 = stretch-only
    slack_structural: float = 0.0
    slack_shear: float = 0.3
    slack_bend: float = 1.0
    friction: float = 0.8
    inflate_rate: float = 0.5  # pressure-lift gain in the settle polish
    grasp_radius_factor: float = 1.5
    lift_factor: float = 1.5
    substeps: int = 8
    crumple_moves_max: int = 8
    crumple_dist_min: float = 0.3
    crumple_dist_max: float = 1.0

    @property
    def grasp_radius(self):
        return self.grasp_radius_factor * self.spacing

    @property
    def lift_height(self):
        return self.lift_factor * self.spacing

    @property
    def cloth_width(self):
        return (max(self.rows, self.cols) - 1) * self.spacing

    @classmethod
    def from_run(cls, run_cfg):
        return cls(
            rows=run_cfg["sim.rows"],
            cols=run_cfg["sim.cols"],
            spacing=run_cfg["sim.spacing"],
            max_particles=run_cfg["sim.max_particles"],
            gravity=run_cfg["sim.gravity"],
            dt=run_cfg["sim.dt"],
            damping=run_cfg["sim.damping"],
            relax_passes=run_cfg["sim.relax_passes"],
            polish_passes=run_cfg["sim.polish_passes"],
            settle_max_iters=run_cfg["sim.settle_max_iters"],
            substep_settle_iters=run_cfg["sim.substep_settle_iters"],
            settle_tolerance=run_cfg["sim.settle_tolerance"],
            contact_tolerance=run_cfg["sim.contact_tolerance"],
            motion_tolerance=run_cfg["sim.motion_tolerance"],
            stiff_structural=run_cfg["sim.stiff_structural"],
            stiff_shear=run_cfg["sim.stiff_shear"],
            stiff_bend=run_cfg["sim.stiff_bend"],
            slack_structural=run_cfg["sim.slack_structural"],
            slack_shear=run_cfg["sim.slack_shear"],
            slack_bend=run_cfg["sim.slack_bend"],
            friction=run_cfg["sim.friction"],
            inflate_rate=run_cfg["sim.inflate_rate"],
            grasp_radius_factor=run_cfg["sim.grasp_radius_factor"],
            lift_factor=run_cfg["sim.lift_factor"],
            substeps=run_cfg["sim.substeps"],
            crumple_moves_max=run_cfg["sim.crumple_moves_max"],
            crumple_dist_min=run_cfg["sim.crumple_dist_min"],
            crumple_dist_max=run_cfg["sim.crumple_dist_max"],
        )


class ClothMesh:
    """Particle-grid topology: edges with rest lengths plus render triangles.

    Edges come in three kinds: structural (grid neighbors, rest =
    spacing), shear (cell diagonals, rest = spacing*sqrt(2)) and bend
    (two-apart along rows/cols, rest = 2*spacing).
    """

    def __init__(self, rows, cols, spacing):
        if rows < 2 or cols < 2:
            raise SimError(f"degenerate grid {rows}x{cols}: need at least 2x2")
        if spacing <= 0:
            raise SimError(f"spacing must be positive, got {spacing}")
        self.rows = int(rows)
        self.cols = int(cols)
        self.spacing = float(spacing)

        pid = lambda r, c: r * cols + c
        ei, ej, rest, kind = [], [], [], []

        def edge(a, b, length, k):
            ei.append(a)
            ej.append(b)
            rest.append(length)
            kind.append(k)

        s = self.spacing
        for r in range(rows):
            for c in range(cols):
                if c + 1 < cols:
                    edge(pid(r, c), pid(r, c + 1), s, STRUCTURAL)
                if r + 1 < rows:
                    edge(pid(r, c), pid(r + 1, c), s, STRUCTURAL)
                if r + 1 < rows and c + 1 < cols:
                    edge(pid(r, c), pid(r + 1, c + 1), s * np.sqrt(2.0), SHEAR)
                    edge(pid(r, c + 1), pid(r + 1, c), s * np.sqrt(2.0), SHEAR)
                if c + 2 < cols:
                    edge(pid(r, c), pid(r, c + 2), 2.0 * s, BEND)
                if r + 2 < rows:
                    edge(pid(r, c), pid(r + 2, c), 2.0 * s, BEND)

        self.edge_i = np.asarray(ei, dtype=np.int64)
        self.edge_j = np.asarray(ej, dtype=np.int64)
        self.rest = np.asarray(rest, dtype=np.float64)
        self.kind = np.asarray(kind, dtype=np.int8)
        self.n_particles = rows * cols
        self.color_groups = self._color_edges()
        self.triangles = self._build_triangles()

    def _color_edges(self):
        """Greedy-color edges so no particle repeats within a color."""
        n_edges = len(self.edge_i)
        color = np.full(n_edges, -1, dtype=np.int64)
        used = []  # per color, a particle-membership bitmap
        for e in range(n_edges):
            a, b = self.edge_i[e], self.edge_j[e]
            for c, members in enumerate(used):
                if not (members[a] or members[b]):
                    color[e] = c
                    members[a] = members[b] = True
                    break
            else:
                members = np.zeros(self.n_particles, dtype=bool)
                members[a] = members[b] = True
                used.append(members)
                color[e] = len(used) - 1
        groups = []
        for c in range(len(used)):
            sel = np.flatnonzero(color == c)
            groups.append(
                (
                    self.edge_i[sel].copy(),
                    self.edge_j[sel].copy(),
                    self.rest[sel].copy(),
                    self.kind[sel].copy(),
                )
            )
        return groups

    def _build_triangles(self):
        tris = []
        for r in range(self.rows - 1):
            for c in range(self.cols - 1):
                p = r * self.cols + c
                tris.append((p, p + 1, p + self.cols))
                tris.append((p + 1, p + self.cols + 1, p + self.cols))
        return np.asarray(tris, dtype=np.int64)

    def validate(self):
        n = self.n_particles
        assert self.edge_i.min() >= 0 and self.edge_j.max() < n
        pairs = set()
        for a, b in zip(self.edge_i, self.edge_j):
            key = (min(a, b), max(a, b))
            assert key not in pairs, f"duplicate edge {key}"
            pairs.add(key)


@dataclass
class ClothState:
    positions: np.ndarray  # (N, 3) float64, z >= 0 is above the table
    mesh: ClothMesh
    pinned: int | None = None

    def copy(self):
        return ClothState(self.positions.copy(), self.mesh, self.pinned)


@dataclass
class SettleReport:
    converged: bool
    residual: float
    iters: int


@dataclass
class ActionEvents:
    grasped: bool
    pick_particle: int | None
    place_point: tuple[float, float] | None
    out_of_workspace: bool


@dataclass
class ObsGeometry:
    """Top-down observation grid: (v, u) pixel centers in world meters."""

    height: int
    width: int
    pixel_size: float
    origin_x: float  # world x of pixel (v=0, u=0) center
    origin_y: float

    def pixel_to_world(self, u, v):
        return (
            self.origin_x + np.asarray(u, dtype=np.float64) * self.pixel_size,
            self.origin_y + np.asarray(v, dtype=np.float64) * self.pixel_size,
        )

    def world_to_pixel(self, x, y):
        return (
            (np.asarray(x, dtype=np.float64) - self.origin_x) / self.pixel_size,
            (np.asarray(y, dtype=np.float64) - self.origin_y) / self.pixel_size,
        )

    @property
    def x_min(self):
        return self.origin_x - 0.5 * self.pixel_size

    @property
    def x_max(self):
        return self.origin_x + (self.width - 0.5) * self.pixel_size

    @property
    def y_min(self):
        return self.origin_y - 0.5 * self.pixel_size

    @property
    def y_max(self):
        return self.origin_y + (self.height - 0.5) * self.pixel_size

    def contains(self, x, y):
        return (
            (np.asarray(x) >= self.x_min)
            & (np.asarray(x) <= self.x_max)
            & (np.asarray(y) >= self.y_min)
            & (np.asarray(y) <= self.y_max)
        )

    @classmethod
    def from_run(cls, run_cfg):
        h = run_cfg["obs.height"]
        w = run_cfg["obs.width"]
        ps = run_cfg["obs.pixel_size"]
        if ps <= 0.0:
            span = (max(run_cfg["sim.rows"], run_cfg["sim.cols"]) - 1) * run_cfg["sim.spacing"]
            ps = span / (run_cfg["obs.frame_fraction"] * min(h, w))
        return cls(
            height=h,
            width=w,
            pixel_size=ps,
            origin_x=-0.5 * (w - 1) * ps,
            origin_y=-0.5 * (h - 1) * ps,
        )


@dataclass
class Observation:
    occupancy: np.ndarray  # (H, W) uint8, 1 where a cloth quad overlaps the cell
    height: np.ndarray  # (H, W) float64 meters, 0 where unoccupied
    pixel_size: float
    origin: tuple[float, float]


@dataclass
class CoverageReport:
    c_sim: float  # covered area, m^2
    a_flat: float  # flat-state reference area, m^2
    c_pct: float


# ---------------------------------------------------------------------------
# construction


def new_flat_cloth(rows, cols, spacing, center=(0.0, 0.0), max_particles=4096):
    """Flat rest-state grid at z = 0 centered on `center`.

    Residuals are zero up to float rounding; the projector's dead band
    treats that as an exact fixed point.
    """
    if rows < 2 or cols < 2:
        raise SimError(f"degenerate grid {rows}x{cols}: need at least 2x2")
    if rows * cols > max_particles:
        raise SimError(f"{rows * cols} particles exceed budget {max_particles}")
    mesh = ClothMesh(rows, cols, spacing)
    cc = np.arange(cols, dtype=np.float64) - 0.5 * (cols - 1)
    rr = np.arange(rows, dtype=np.float64) - 0.5 * (rows - 1)
    xx, yy = np.meshgrid(cc * spacing + center[0], rr * spacing + center[1])
    positions = np.zeros((rows * cols, 3), dtype=np.float64)
    positions[:, 0] = xx.ravel()
    positions[:, 1] = yy.ravel()
    return ClothState(positions, mesh)


# ---------------------------------------------------------------------------
# dynamics


def _solver_groups(mesh, cfg):
    """Per-color constraint arrays (i, j, upper, lower, stiffness).

    An edge corrects toward `upper` (its rest length) when stretched and
    toward `lower` = (1 - slack) * rest when compressed past the slack
    window; inside the window it is inactive.
    """
    key = (
        cfg.stiff_structural, cfg.stiff_shear, cfg.stiff_bend,
        cfg.slack_structural, cfg.slack_shear, cfg.slack_bend,
    )
    cache = getattr(mesh, "_solver_cache", None)
    if cache is not None and cache[0] == key:
        return cache[1]
    stiff = np.array(
        [cfg.stiff_structural, cfg.stiff_shear, cfg.stiff_bend], dtype=np.float64
    )
    slack = np.array(
        [cfg.slack_structural, cfg.slack_shear, cfg.slack_bend], dtype=np.float64
    )
    groups = []
    for ei, ej, rest, kind in mesh.color_groups:
        groups.append(
            (ei, ej, rest, np.maximum(1.0 - slack[kind], 0.0) * rest, stiff[kind])
        )
    mesh._solver_cache = (key, groups)
    return groups


def _weighted_groups(groups, pinned):
    """Attach effective bounds and per-endpoint correction weights; a
    pinned particle has weight 0 so its partner takes the whole
    correction (weights are None when nothing is pinned)."""
    out = []
    for ei, ej, upper, lower, stiff in groups:
        up_eff = upper * (1.0 + DEAD_BAND)
        lo_eff = lower * (1.0 - DEAD_BAND)
        if pinned is None:
            out.append((ei, ej, up_eff, lo_eff, 0.5 * stiff, None, None))
        else:
            wi = (ei != pinned).astype(np.float64)
            wj = (ej != pinned).astype(np.float64)
            tot = np.maximum(wi + wj, 1.0)
            out.append(
                (ei, ej, up_eff, lo_eff, stiff / tot, wi[:, None], wj[:, None])
            )
    return out


def _project_groups(pos, wgroups, passes):
    """In-place colored Gauss-Seidel distance-constraint projection.

    An edge is corrected toward whichever effective bound it violates;
    strain = ln - clip(ln, lower, upper) is zero inside the window."""
    for _ in range(passes):
        for ei, ej, upper, lower, gain, wi, wj in wgroups:
            d = pos[ej] - pos[ei]
            ln = np.sqrt(np.einsum("ij,ij->i", d, d))
            strain = ln - np.clip(ln, lower, upper)
            if not strain.any():
                continue
            corr = gain * strain / np.maximum(ln, 1e-12)
            step = corr[:, None] * d
            if wi is None:
                pos[ei] += step
                pos[ej] -= step
            else:
                pos[ei] += wi * step
                pos[ej] -= wj * step


def _structural_arrays(mesh):
    cache = getattr(mesh, "_structural_cache", None)
    if cache is None:
        sel = mesh.kind == STRUCTURAL
        cache = (mesh.edge_i[sel], mesh.edge_j[sel], mesh.rest[sel])
        mesh._structural_cache = cache
    return cache


def _pressure_lift(pos, mesh, rate, pinned):
    """Raise each particle by the structural compression around it."""
    ei, ej, rest = _structural_arrays(mesh)
    d = pos[ej] - pos[ei]
    ln = np.sqrt(np.einsum("ij,ij->i", d, d))
    comp = np.where(rest - ln > DEAD_BAND * rest, rest - ln, 0.0)
    if not comp.any():
        return
    pressure = np.zeros(len(pos), dtype=np.float64)
    np.add.at(pressure, ei, comp)
    np.add.at(pressure, ej, comp)
    if pinned is not None:
        pressure[pinned] = 0.0
    pos[:, 2] += rate * pressure


def _residual(pos, mesh):
    sel = mesh.kind == STRUCTURAL
    d = pos[mesh.edge_j[sel]] - pos[mesh.edge_i[sel]]
    ln = np.sqrt(np.einsum("ij,ij->i", d, d))
    return float(np.max(np.abs(ln - mesh.rest[sel]) / mesh.rest[sel]))


def structural_residual(state):
    """Max relative strain over structural edges."""
    return _residual(state.positions, state.mesh)


def settle(state, cfg, max_iters=None, pin_target=None, polish=True):
    """Relax to a quasi-static rest state; returns (state, report).

    Each iteration applies a damped gravity displacement, runs
    `relax_passes` projection passes, and clamps to the table plane.
    Once motion stalls (or iterations run out), a gravity-free polish
    of up to `polish_passes` projections interleaved with the pressure
    lift drives the structural residual toward the tolerance; the short
    internal settles between drag substeps skip the polish.
    Non-convergence is reported, never raised.
    """
    if max_iters is None:
        max_iters = cfg.settle_max_iters
    mesh = state.mesh
    pinned = state.pinned
    wgroups = _weighted_groups(_solver_groups(mesh, cfg), pinned)
    pos = state.positions.copy()
    if pinned is not None and pin_target is not None:
        pos[pinned] = pin_target
    vel = np.zeros_like(pos)
    g_dt = cfg.gravity * cfg.dt
    contact_eps = cfg.contact_tolerance + 1e-3
    iters = 0
    for it in range(max_iters):
        iters = it + 1
        vel[:, 2] -= g_dt
        vel *= cfg.damping
        if pinned is not None:
            vel[pinned] = 0.0
        pred = pos + cfg.dt * vel
        if pinned is not None:
            pred[pinned] = pos[pinned]
        _project_groups(pred, wgroups, cfg.relax_passes)
        # table contact: clamp to the plane, remember the normal push
        push = np.maximum(-pred[:, 2], 0.0)
        np.maximum(pred[:, 2], 0.0, out=pred[:, 2])
        # friction: in-contact particles lose mu * push of requested slide
        if cfg.friction > 0.0:
            contact = (pos[:, 2] < contact_eps) & (pred[:, 2] < contact_eps)
            if pinned is not None:
                contact[pinned] = False
            slide = pred[:, :2] - pos[:, :2]
            mag = np.sqrt(np.einsum("ij,ij->i", slide, slide))
            allowed = np.maximum(mag - cfg.friction * push, 0.0)
            scale = np.where(
                contact & (mag > 1e-15), allowed / np.maximum(mag, 1e-15), 1.0
            )
            pred[:, :2] = pos[:, :2] + scale[:, None] * slide
        if pinned is not None:
            pred[pinned] = pos[pinned]
        moved = float(np.max(np.abs(pred - pos)))
        vel = (pred - pos) / cfg.dt
        pos = pred
        if moved < cfg.motion_tolerance:
            break
    if polish:
        # gravity-free finish: projection rounds interleaved with the
        # pressure lift, stopping once the residual contract holds
        done_passes = 0
        while done_passes < cfg.polish_passes:
            block = min(cfg.relax_passes, cfg.polish_passes - done_passes)
            _project_groups(pos, wgroups, block)
            done_passes += block
            _pressure_lift(pos, mesh, cfg.inflate_rate, pinned)
            np.maximum(pos[:, 2], 0.0, out=pos[:, 2])
            if pinned is not None and pin_target is not None:
                pos[pinned] = pin_target
            if _residual(pos, mesh) <= 0.75 * cfg.settle_tolerance:
                break
    out = ClothState(pos, mesh, pinned)
    residual = structural_residual(out)
    return out, SettleReport(residual <= cfg.settle_tolerance, residual, iters)


def apply_pick_place(state, pick, phi_deg, dist, cfg, workspace=None):
    """Pick near `pick`, lift, drag along `phi_deg` by `dist`, place.

    The nearest particle within grasp_radius (top-down xy distance) is
    pinned, raised to lift_height, translated in `substeps` interpolated
    moves with a short settle after each, lowered back to the table,
    then released and settled fully. With no particle in range the
    action is void: the state is settled and returned with
    grasped=False.
    """
    if dist < 0:
        raise SimError(f"negative move distance {dist}")
    pos = state.positions
    d2 = (pos[:, 0] - pick[0]) ** 2 + (pos[:, 1] - pick[1]) ** 2
    idx = int(np.argmin(d2))
    phi = np.deg2rad(phi_deg % 360.0)
    direction = np.array([np.cos(phi), np.sin(phi)], dtype=np.float64)
    place = (pick[0] + dist * direction[0], pick[1] + dist * direction[1])
    oow = False
    if workspace is not None:
        oow = not bool(workspace.contains(place[0], place[1]))

    if np.sqrt(d2[idx]) > cfg.grasp_radius:
        settled, _ = settle(state.copy(), cfg)
        settled.pinned = None
        return settled, ActionEvents(False, None, place, oow)

    work = state.copy()
    work.pinned = idx
    target = work.positions[idx].copy()
    target[2] = cfg.lift_height
    work, _ = settle(
        work, cfg, max_iters=cfg.substep_settle_iters, pin_target=target, polish=False
    )
    step_xy = direction * (dist / cfg.substeps)
    for _ in range(cfg.substeps):
        target = work.positions[idx].copy()
        target[0] += step_xy[0]
        target[1] += step_xy[1]
        work, _ = settle(
            work, cfg, max_iters=cfg.substep_settle_iters, pin_target=target,
            polish=False,
        )
    target = work.positions[idx].copy()
    target[2] = 0.0
    work, _ = settle(
        work, cfg, max_iters=cfg.substep_settle_iters, pin_target=target,
        polish=False,
    )
    work.pinned = None
    work, _ = settle(work, cfg)
    return work, ActionEvents(True, idx, place, oow)


# ---------------------------------------------------------------------------
# rasterization, coverage, observation


def _sat_overlap(txs, tys, gu, gv):
    """Separating-axis triangle vs unit-cell overlap, batched.

    txs, tys: (T, 3) triangle corners in pixel space; gu, gv: (T, K)
    candidate cell centers per triangle. Returns (T, K) bool. The bbox
    axes are assumed pre-checked by candidate construction; the three
    edge normals are tested here. Degenerate (collinear) triangles fall
    back to their bbox, which is the right footprint for a segment.
    """
    keep = np.ones(gu.shape, dtype=bool)
    for a in range(3):
        b = (a + 1) % 3
        nx = -(tys[:, b] - tys[:, a])
        ny = txs[:, b] - txs[:, a]
        ok = nx * nx + ny * ny >= 1e-24
        proj = nx[:, None] * txs + ny[:, None] * tys
        tmin, tmax = proj.min(axis=1), proj.max(axis=1)
        center = nx[:, None] * gu + ny[:, None] * gv
        radius = 0.5 * (np.abs(nx) + np.abs(ny))[:, None]
        # non-strict: grazing contact (zero intersection area) is not overlap
        sep = (center + radius <= tmin[:, None]) | (center - radius >= tmax[:, None])
        keep &= ~(sep & ok[:, None])
    return keep


def _rasterize(positions, mesh, geom):
    """Mark every grid cell overlapped by a cloth triangle.

    Cells are closed unit squares around integer pixel centers in pixel
    space. Cell height is the max corner z over all triangles that
    overlap the cell; unoccupied cells have height 0.
    """
    H, W = geom.height, geom.width
    occ = np.zeros(H * W, dtype=bool)
    hgt = np.zeros(H * W, dtype=np.float64)
    px, py = geom.world_to_pixel(positions[:, 0], positions[:, 1])
    pz = positions[:, 2]
    tris = mesh.triangles
    txs, tys, tzs = px[tris], py[tris], pz[tris]
    xmin, xmax = txs.min(axis=1), txs.max(axis=1)
    ymin, ymax = tys.min(axis=1), tys.max(axis=1)
    zmax = tzs.max(axis=1)
    # cell u overlaps [xmin, xmax] iff u in [ceil(xmin-0.5), floor(xmax+0.5)]
    u0 = np.ceil(xmin - 0.5).astype(np.int64)
    u1 = np.floor(xmax + 0.5).astype(np.int64)
    v0 = np.ceil(ymin - 0.5).astype(np.int64)
    v1 = np.floor(ymax + 0.5).astype(np.int64)
    spans_u = u1 - u0 + 1
    spans_v = v1 - v0 + 1
    if len(tris) == 0:
        return occ.reshape(H, W), hgt.reshape(H, W)

    cap = 8  # vectorized path handles windows up to cap x cap cells
    small = (spans_u <= cap) & (spans_v <= cap) & (spans_u > 0) & (spans_v > 0)

    def mark(sel, k):
        if not sel.any():
            return
        offs = np.arange(k, dtype=np.int64)
        T = int(sel.sum())
        uu = np.broadcast_to(
            u0[sel, None, None] + offs[None, None, :], (T, k, k)
        )
        vv = np.broadcast_to(
            v0[sel, None, None] + offs[None, :, None], (T, k, k)
        )
        guf = uu.astype(np.float64).reshape(T, -1)
        gvf = vv.astype(np.float64).reshape(T, -1)
        keep = _sat_overlap(txs[sel], tys[sel], guf, gvf)
        inside = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        keep &= inside.reshape(T, -1)
        if not keep.any():
            return
        flat = (vv * W + uu).reshape(T, -1)
        idx = flat[keep]
        occ[idx] = True
        np.maximum.at(hgt, idx, np.broadcast_to(zmax[sel][:, None], keep.shape)[keep])

    k = int(max(spans_u[small].max(initial=1), spans_v[small].max(initial=1)))
    mark(small, max(k, 1))
    for t in np.flatnonzero(~small):
        a0, a1 = max(u0[t], 0), min(u1[t], W - 1)
        b0, b1 = max(v0[t], 0), min(v1[t], H - 1)
        if a0 > a1 or b0 > b1:
            continue
        cu, cv = np.meshgrid(
            np.arange(a0, a1 + 1, dtype=np.float64),
            np.arange(b0, b1 + 1, dtype=np.float64),
        )
        keep = _sat_overlap(
            txs[t][None], tys[t][None], cu.reshape(1, -1), cv.reshape(1, -1)
        )[0]
        flat = (cv.astype(np.int64) * W + cu.astype(np.int64)).reshape(-1)[keep]
        occ[flat] = True
        np.maximum.at(hgt, flat, zmax[t])
    hgt[~occ] = 0.0
    return occ.reshape(H, W), hgt.reshape(H, W)


def render_observation(state, geom):
    occ, hgt = _rasterize(state.positions, state.mesh, geom)
    return Observation(
        occupancy=occ.astype(np.uint8),
        height=hgt,
        pixel_size=geom.pixel_size,
        origin=(geom.origin_x, geom.origin_y),
    )


def flat_reference_area(mesh, geom, center=(0.0, 0.0)):
    """Area of the flat silhouette under the same rasterizer (A_flat)."""
    flat = new_flat_cloth(mesh.rows, mesh.cols, mesh.spacing, center,
                          max_particles=mesh.n_particles)
    occ, _ = _rasterize(flat.positions, flat.mesh, geom)
    return float(occ.sum()) * geom.pixel_size**2


def coverage(state, geom, a_flat):
    occ, _ = _rasterize(state.positions, state.mesh, geom)
    c_sim = float(occ.sum()) * geom.pixel_size**2
    return CoverageReport(c_sim=c_sim, a_flat=a_flat, c_pct=c_sim / a_flat * 100.0)


def is_out_of_observation(state, geom):
    occ, _ = _rasterize(state.positions, state.mesh, geom)
    return not bool(occ.any())


# ---------------------------------------------------------------------------
# task generation


@dataclass
class Task:
    seed: int
    rows: int
    cols: int
    spacing: float
    center: tuple[float, float]
    positions: np.ndarray  # (N, 3) float32, the crumpled start state
    achieved_cov_pct: float
    flagged: bool  # generator could not reach the target coverage

    def state(self):
        mesh = ClothMesh(self.rows, self.cols, self.spacing)
        return ClothState(self.positions.astype(np.float64), mesh)


def _recenter(state, geom):
    """Rigid xy translation of the cloth centroid onto the grid center."""
    pos = state.positions
    cx = 0.5 * (geom.x_min + geom.x_max)
    cy = 0.5 * (geom.y_min + geom.y_max)
    pos[:, 0] += cx - pos[:, 0].mean()
    pos[:, 1] += cy - pos[:, 1].mean()


def generate_task(seed, target_cov_max, cfg, geom):
    """Crumple a flat cloth with seeded random pick-places until coverage
    drops to `target_cov_max` percent, or the move budget runs out
    (best-effort state returned flagged). Deterministic per seed."""
    if not (0.0 < target_cov_max < 100.0):
        raise SimError(f"target coverage must be in (0, 100), got {target_cov_max}")
    rng = np.random.default_rng(seed)
    center = (0.5 * (geom.x_min + geom.x_max), 0.5 * (geom.y_min + geom.y_max))
    state = new_flat_cloth(cfg.rows, cfg.cols, cfg.spacing, center, cfg.max_particles)
    a_flat = flat_reference_area(state.mesh, geom, center)
    width = cfg.cloth_width
    cov = coverage(state, geom, a_flat).c_pct
    for _ in range(cfg.crumple_moves_max):
        p = int(rng.integers(0, state.mesh.n_particles))
        phi = float(rng.uniform(0.0, 360.0))
        dist = float(rng.uniform(cfg.crumple_dist_min, cfg.crumple_dist_max)) * width
        pick = (state.positions[p, 0], state.positions[p, 1])
        state, _ = apply_pick_place(state, pick, phi, dist, cfg)
        _recenter(state, geom)
        cov = coverage(state, geom, a_flat).c_pct
        if cov <= target_cov_max:
            break
    return Task(
        seed=int(seed),
        rows=cfg.rows,
        cols=cfg.cols,
        spacing=cfg.spacing,
        center=center,
        positions=state.positions.astype(np.float32),
        achieved_cov_pct=cov,
        flagged=cov > target_cov_max,
    )


# ---------------------------------------------------------------------------
# task files and frame dumps


def save_tasks(tasks, path):
    """Binary task file: little-endian, one record per task.

    Header: magic 'CTSK', u32 version, u32 count. Record: u64 seed,
    u32 rows, u32 cols, f32 spacing, f32 center_x, f32 center_y,
    u8 flagged, f32 achieved_cov, u32 n_particles, then n*3 f32
    positions row-major.
    """
    with open(path, "wb") as fh:
        fh.write(TASK_MAGIC)
        fh.write(struct.pack("<II", TASK_VERSION, len(tasks)))
        for t in tasks:
            pos = np.ascontiguousarray(t.positions, dtype="<f4")
            fh.write(
                struct.pack(
                    "<QIIfffBfI",
                    t.seed,
                    t.rows,
                    t.cols,
                    t.spacing,
                    t.center[0],
                    t.center[1],
                    1 if t.flagged else 0,
                    t.achieved_cov_pct,
                    pos.shape[0],
                )
            )
            fh.write(pos.tobytes())


def load_tasks(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TASK_MAGIC:
            raise SimError(f"{path}: not a task file (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != TASK_VERSION:
            raise SimError(f"{path}: unsupported task version {version}")
        tasks = []
        for _ in range(count):
            header = fh.read(struct.calcsize("<QIIfffBfI"))
            seed, rows, cols, spacing, cx, cy, flagged, cov, n = struct.unpack(
                "<QIIfffBfI", header
            )
            raw = fh.read(n * 3 * 4)
            if len(raw) != n * 3 * 4:
                raise SimError(f"{path}: truncated task record")
            pos = np.frombuffer(raw, dtype="<f4").reshape(n, 3).copy()
            tasks.append(
                Task(seed, rows, cols, spacing, (cx, cy), pos, cov, bool(flagged))
            )
    return tasks


def write_pgm(path, gray):
    """Binary PGM (P5, maxval 255) from a (H, W) uint8 array."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (gray.shape[1], gray.shape[0]))
        fh.write(gray.tobytes())


def observation_frames(obs):
    """Per-channel grayscale frames: occupancy 0/255, height scaled by
    HEIGHT_GRAY_PER_METER and clipped."""
    occ = (obs.occupancy.astype(np.uint8)) * 255
    hgt = np.clip(obs.height * HEIGHT_GRAY_PER_METER, 0.0, 255.0).astype(np.uint8)
    return {"occupancy": occ, "height": hgt}
