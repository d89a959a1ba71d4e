"""Driving-safety-field energies and the normalized interaction-force target.

Every surrounding agent is treated as a risk source radiating two energy
terms: an inverse-square static term that grows with source speed, and a
relative-motion kinetic term. The raw force a source exerts on the ego is
the mean total energy over the ego's oriented bounding box (midpoint
quadrature); min-max normalization over the valid sources produces the
regression target used in pre-training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .scene_model import Scene, AgentTrack, track_heading

DEGENERATE_FORCE_EPS = 1e-12


@dataclass
class FieldParams:
    """Field constants. The trained target is min-max normalized, so the
    overall scale matters less than the relative terms; defaults are pinned
    by the test suite."""
    g: float = 1.0
    vehicle_mass: float = 1500.0
    a_coef: float = 1.0
    b_coef: float = 1.0
    c_coef: float = 1.0
    k1: float = 1.0
    k2: float = 0.05
    r_min: float = 0.5          # singularity clamp, meters
    grid_res: float = 0.2       # quadrature spacing, meters
    # The kinetic exponent sign makes closing geometries *less* energetic;
    # implemented as given, with a switch to negate it.
    negate_exponent: bool = False
    pedestrian_mass_scale: float = 0.05
    cyclist_mass_scale: float = 0.1

    def __post_init__(self):
        for name in ("g", "vehicle_mass", "a_coef", "b_coef", "c_coef",
                     "k1", "k2", "r_min", "grid_res"):
            if getattr(self, name) <= 0:
                raise DataError(f"field parameter {name} must be strictly positive")

    def mass_scale(self, attribute: str) -> float:
        if attribute == "pedestrian":
            return self.pedestrian_mass_scale
        if attribute == "cyclist":
            return self.cyclist_mass_scale
        return 1.0


@dataclass
class AgentSnapshot:
    """An agent's state at the current timestep, as the field sees it."""
    position: np.ndarray
    velocity: np.ndarray
    attribute: str = "vehicle"
    bbox: tuple[float, float] = (4.8, 1.8)
    heading: float = 0.0

    @classmethod
    def from_track(cls, track: AgentTrack) -> "AgentSnapshot":
        heading, _ = track_heading(track)
        return cls(position=track.positions[-1].copy(),
                   velocity=track.velocities[-1].copy(),
                   attribute=track.attribute,
                   bbox=tuple(track.bbox),
                   heading=heading)


@dataclass
class BboxPose:
    """Oriented ego bounding box plus the ego's velocity (field probe)."""
    center: np.ndarray
    heading: float
    length: float
    width: float
    velocity: np.ndarray


@dataclass
class VifTarget:
    """Normalized per-slot interaction forces; padded slots zero."""
    forces: np.ndarray         # (N_a,) in [0, 1]
    valid_mask: np.ndarray     # (N_a,) bool; ego and padded slots False


def static_energy(source_pos, source_speed: float, query_point, params: FieldParams,
                  mass_scale: float = 1.0):
    """Inverse-square static term; the radius clamps below at r_min."""
    q = np.asarray(query_point, dtype=np.float64)
    d = q - np.asarray(source_pos, dtype=np.float64)
    r = np.maximum(np.linalg.norm(d, axis=-1), params.r_min)
    equivalent_mass = params.vehicle_mass * mass_scale * (
        params.a_coef * float(source_speed) ** params.c_coef + params.b_coef)
    return params.g * equivalent_mass / (r * r)


def dynamic_energy(source_pos, source_vel, query_point, query_vel, params: FieldParams):
    """Relative-motion kinetic term: k1 |dv|^2 exp(k2 dv.dr) / r.

    dv = query velocity - source velocity, dr = query point - source point.
    """
    q = np.asarray(query_point, dtype=np.float64)
    dr = q - np.asarray(source_pos, dtype=np.float64)
    dv = np.asarray(query_vel, dtype=np.float64) - np.asarray(source_vel, dtype=np.float64)
    r = np.maximum(np.linalg.norm(dr, axis=-1), params.r_min)
    exponent = params.k2 * (dr @ dv if dr.ndim > 1 else float(np.dot(dv, dr)))
    if params.negate_exponent:
        exponent = -exponent
    return params.k1 * float(np.dot(dv, dv)) * np.exp(exponent) / r


def total_energy(source_pos, source_vel, query_point, query_vel, params: FieldParams,
                 mass_scale: float = 1.0):
    """Sum of the static and kinetic terms."""
    speed = float(np.linalg.norm(source_vel))
    return (static_energy(source_pos, speed, query_point, params, mass_scale)
            + dynamic_energy(source_pos, source_vel, query_point, query_vel, params))


def bbox_grid(pose: BboxPose, grid_res: float) -> np.ndarray:
    """Midpoint-rule cell centers tiling the oriented box at spacing <= grid_res."""
    if grid_res > min(pose.length, pose.width) / 2.0:
        raise DataError(
            f"grid_res {grid_res} too coarse for a {pose.length} x {pose.width} box")
    n_l = int(math.ceil(pose.length / grid_res))
    n_w = int(math.ceil(pose.width / grid_res))
    u = (np.arange(n_l) + 0.5) * (pose.length / n_l) - pose.length / 2.0
    v = (np.arange(n_w) + 0.5) * (pose.width / n_w) - pose.width / 2.0
    uu, vv = np.meshgrid(u, v, indexing="ij")
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    x = pose.center[0] + uu * c - vv * s
    y = pose.center[1] + uu * s + vv * c
    return np.stack([x.ravel(), y.ravel()], axis=-1)


def average_over_bbox(energy_fn, pose: BboxPose, grid_res: float) -> float:
    """Mean of a pointwise energy over the box (midpoint quadrature)."""
    centers = bbox_grid(pose, grid_res)
    return float(np.mean(energy_fn(centers)))


def virtual_force(source: AgentSnapshot, ego_pose: BboxPose, params: FieldParams) -> float:
    """Raw interaction force: mean total energy of `source` over the ego box."""
    scale = params.mass_scale(source.attribute)

    def energy(points):
        return total_energy(source.position, source.velocity, points,
                            ego_pose.velocity, params, scale)

    return average_over_bbox(energy, ego_pose, params.grid_res)


def normalize_forces(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1].

    Degenerate spread (max == min): all ones if the common force is
    positive, all zeros otherwise.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw.copy()
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0.0:
        return np.ones_like(raw) if hi > DEGENERATE_FORCE_EPS else np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def ego_pose_from_snapshot(ego: AgentSnapshot) -> BboxPose:
    return BboxPose(center=ego.position, heading=ego.heading,
                    length=ego.bbox[0], width=ego.bbox[1], velocity=ego.velocity)


def vif_vector(agents, ego_index: int, params: FieldParams) -> VifTarget:
    """Normalized interaction forces for an ordered agent slot list.

    `agents` holds AgentSnapshot entries aligned with the feature tensor
    slots; None marks padded slots. The ego slot and padded slots come out
    zero with valid_mask False.
    """
    n = len(agents)
    if not 0 <= ego_index < n or agents[ego_index] is None:
        raise DataError("ego slot must hold a valid agent")
    ego_pose = ego_pose_from_snapshot(agents[ego_index])
    forces = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    raw = []
    raw_slots = []
    for i, snap in enumerate(agents):
        if i == ego_index or snap is None:
            continue
        raw.append(virtual_force(snap, ego_pose, params))
        raw_slots.append(i)
        valid[i] = True
    if raw:
        forces[raw_slots] = normalize_forces(np.asarray(raw))
    return VifTarget(forces=forces, valid_mask=valid)


def scene_snapshots(scene: Scene) -> list[AgentSnapshot]:
    return [AgentSnapshot.from_track(t) for t in scene.agents]


def render_field(scene: Scene, region, resolution: float,
                 params: FieldParams | None = None) -> np.ndarray:
    """Total energy from all non-target agents on a regular grid.

    `region` is ((min_x, min_y), (max_x, max_y)); the grid is row-major with
    origin at the min corner, one sample per cell center, and the target
    agent's current velocity as the probe velocity.
    """
    if resolution <= 0:
        raise DataError(f"resolution must be positive, got {resolution}")
    if params is None:
        params = FieldParams()
    (min_x, min_y), (max_x, max_y) = region
    if max_x <= min_x or max_y <= min_y:
        raise DataError("region must have positive area")
    width = int(math.ceil((max_x - min_x) / resolution))
    height = int(math.ceil((max_y - min_y) / resolution))
    xs = min_x + (np.arange(width) + 0.5) * resolution
    ys = min_y + (np.arange(height) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)                      # row i -> y, col j -> x
    points = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    probe_vel = scene.target.velocities[-1]
    grid = np.zeros(points.shape[0])
    for i, track in enumerate(scene.agents):
        if i == scene.target_agent_id:
            continue
        snap = AgentSnapshot.from_track(track)
        grid = grid + total_energy(snap.position, snap.velocity, points, probe_vel,
                                   params, params.mass_scale(snap.attribute))
    return grid.reshape(height, width)


def write_grid_text(path, grid: np.ndarray, resolution: float, origin) -> None:
    """Header `width height resolution origin_x origin_y`, then row-major values."""
    height, width = grid.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{width} {height} {resolution!r} {float(origin[0])!r} {float(origin[1])!r}\n")
        for row in grid:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def write_grid_image(path, grid: np.ndarray) -> None:
    """8-bit grayscale PGM with linear normalization."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        scaled = np.round((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros(grid.shape, dtype=np.uint8)
    height, width = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())
