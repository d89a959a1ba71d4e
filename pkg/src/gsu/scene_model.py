"""Scene types and feature engineering.

Raw scenes (agent tracks + lane polylines in world coordinates) become
fixed-shape, zero-padded, masked feature tensors expressed in the target
agent's frame: origin at its current position, x-axis along its heading.

Agent rows per timestep: [start_x, start_y, end_x, end_y, v_x, v_y, one-hot
attribute]. Lane rows per segment: [start_x, start_y, end_x, end_y, has_turn,
traffic_controlled].
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

ATTRIBUTES = ("vehicle", "pedestrian", "cyclist")

# Displacements shorter than this carry no usable heading information.
MIN_HEADING_STEP = 0.05


@dataclass
class AgentTrack:
    """One agent's observed history: T+1 positions/velocities plus statics."""
    positions: np.ndarray          # (T+1, 2) world meters
    velocities: np.ndarray         # (T+1, 2) m/s
    attribute: str                 # one of ATTRIBUTES
    bbox: tuple[float, float]      # length x width, meters

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        if self.positions.shape != self.velocities.shape or self.positions.ndim != 2:
            raise DataError("agent positions/velocities must both be (T+1, 2)")
        if not np.all(np.isfinite(self.positions)):
            raise DataError("agent positions must be finite")
        if self.attribute not in ATTRIBUTES:
            raise DataError(f"unknown agent attribute {self.attribute!r}")
        if self.bbox[0] <= 0 or self.bbox[1] <= 0:
            raise DataError("bbox dimensions must be positive")


@dataclass
class LanePolyline:
    """Ordered lane centerline points plus binary attributes."""
    points: np.ndarray                         # (n, 2) world meters, n >= 2
    attributes: tuple[int, int] = (0, 0)       # (has_turn, traffic_controlled)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 2:
            raise DataError("lane polyline needs at least 2 points")
        steps = np.diff(self.points, axis=0)
        if np.any(np.all(steps == 0.0, axis=1)):
            raise DataError("lane polyline has repeated consecutive points")


@dataclass
class Scene:
    """A raw traffic scene in world coordinates."""
    agents: list[AgentTrack]
    lanes: list[LanePolyline]
    target_agent_id: int
    timestep_hz: float = 10.0

    def __post_init__(self):
        if self.timestep_hz <= 0:
            raise DataError("timestep_hz must be positive")
        if not self.agents:
            raise DataError("scene has no agents")
        if not 0 <= self.target_agent_id < len(self.agents):
            raise DataError(f"target_agent_id {self.target_agent_id} out of range")
        hist = {a.positions.shape[0] for a in self.agents}
        if len(hist) != 1:
            raise DataError(f"agent tracks disagree on history length: {sorted(hist)}")

    @property
    def target(self) -> AgentTrack:
        return self.agents[self.target_agent_id]


@dataclass
class FrameTransform:
    """Agent-centric frame: origin plus heading in (-pi, pi]."""
    origin: np.ndarray
    heading: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.heading = wrap_angle(float(self.heading))


@dataclass
class AgentFeatureTensor:
    data: np.ndarray               # (N_a, T, d_a)
    valid_mask: np.ndarray         # (N_a,) bool
    slot_indices: np.ndarray = field(default=None)   # scene agent index per slot, -1 padded


@dataclass
class MapFeatureTensor:
    data: np.ndarray               # (N_m, L, d_m)
    valid_mask: np.ndarray         # (N_m,) bool
    slot_indices: np.ndarray = field(default=None)   # scene lane index per slot, -1 padded


@dataclass
class FeatureConfig:
    """Fixed tensor geometry. All desk-scale defaults, all overridable."""
    n_agents: int = 20         # agent slots, target always in slot 0
    n_lanes: int = 32          # lane slots
    lane_segments: int = 10    # segments per lane row (L)
    t_hist: int = 20           # motion vectors of history (2 s at 10 Hz)

    @property
    def d_agent(self) -> int:
        return 6 + len(ATTRIBUTES)

    @property
    def d_map(self) -> int:
        return 6


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def track_heading(track: AgentTrack) -> tuple[float, bool]:
    """Heading of the last displacement longer than MIN_HEADING_STEP.

    Returns (heading, found). found=False means the track never moved enough
    to define a direction.
    """
    steps = np.diff(track.positions, axis=0)
    for dx, dy in steps[::-1]:
        if math.hypot(dx, dy) > MIN_HEADING_STEP:
            return math.atan2(dy, dx), True
    return 0.0, False


def make_frame(scene: Scene) -> FrameTransform:
    """Target-centric frame at the current timestep.

    A target with no usable heading falls back to heading 0 with a warning.
    """
    target = scene.target
    heading, found = track_heading(target)
    if not found:
        warnings.warn("target agent is stationary with no usable heading; using heading 0")
    return FrameTransform(origin=target.positions[-1].copy(), heading=heading)


def to_local(transform: FrameTransform, point) -> np.ndarray:
    """World -> local. A point ahead of the target maps onto the +x axis."""
    p = np.asarray(point, dtype=np.float64) - transform.origin
    c, s = math.cos(transform.heading), math.sin(transform.heading)
    return np.stack([p[..., 0] * c + p[..., 1] * s,
                     -p[..., 0] * s + p[..., 1] * c], axis=-1)


def to_world(transform: FrameTransform, point) -> np.ndarray:
    """Inverse of to_local."""
    p = np.asarray(point, dtype=np.float64)
    c, s = math.cos(transform.heading), math.sin(transform.heading)
    x = p[..., 0] * c - p[..., 1] * s
    y = p[..., 0] * s + p[..., 1] * c
    return np.stack([x, y], axis=-1) + transform.origin


def rotate_to_local(transform: FrameTransform, vec) -> np.ndarray:
    """Rotate a direction/velocity into the local frame (no translation)."""
    v = np.asarray(vec, dtype=np.float64)
    c, s = math.cos(transform.heading), math.sin(transform.heading)
    return np.stack([v[..., 0] * c + v[..., 1] * s,
                     -v[..., 0] * s + v[..., 1] * c], axis=-1)


def filter_nearest(items, origin, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Pick up to `cap` items nearest to `origin`.

    Each item is a point or an array of points (distance = nearest point).
    Returns (selected indices sorted by distance, valid mask of length cap).
    Ties break toward the lower original index.
    """
    if cap < 1:
        raise ShapeError(f"cap must be >= 1, got {cap}")
    origin = np.asarray(origin, dtype=np.float64)
    dists = np.empty(len(items))
    for i, item in enumerate(items):
        pts = np.atleast_2d(np.asarray(item, dtype=np.float64))
        dists[i] = np.min(np.linalg.norm(pts - origin, axis=-1))
    order = np.argsort(dists, kind="stable")[:cap]
    mask = np.zeros(cap, dtype=bool)
    mask[:len(order)] = True
    return order.astype(int), mask


def resample_lane(polyline: LanePolyline, n_segments: int) -> np.ndarray:
    """Arc-length-uniform resampling into `n_segments` consecutive segments.

    Returns (n_segments, 2, 2): [i] = [start point, end point], endpoints
    shared between neighbors so the chain traces the polyline.
    """
    if n_segments < 1:
        raise ShapeError(f"n_segments must be >= 1, got {n_segments}")
    pts = polyline.points
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = float(seg_len.sum())
    if total <= 0.0:
        raise DataError("cannot resample a zero-length polyline")
    s = np.concatenate([[0.0], np.cumsum(seg_len)])
    targets = np.linspace(0.0, total, n_segments + 1)
    x = np.interp(targets, s, pts[:, 0])
    y = np.interp(targets, s, pts[:, 1])
    samples = np.stack([x, y], axis=-1)
    return np.stack([samples[:-1], samples[1:]], axis=1)


def _attr_onehot(attribute: str) -> np.ndarray:
    onehot = np.zeros(len(ATTRIBUTES))
    onehot[ATTRIBUTES.index(attribute)] = 1.0
    return onehot


def build_agent_features(scene: Scene, transform: FrameTransform,
                         config: FeatureConfig) -> AgentFeatureTensor:
    """Local-frame agent tensor. Slot 0 is the target; remaining slots hold
    the nearest other agents, distance-sorted, then zero padding."""
    t_hist = config.t_hist
    if scene.target.positions.shape[0] != t_hist + 1:
        raise ShapeError(
            f"tracks have {scene.target.positions.shape[0] - 1} motion vectors, config expects {t_hist}")
    others = [i for i in range(len(scene.agents)) if i != scene.target_agent_id]
    order, _ = filter_nearest(
        [scene.agents[i].positions[-1] for i in others], transform.origin, max(config.n_agents - 1, 1))
    slots = [scene.target_agent_id] + [others[j] for j in order][:config.n_agents - 1]

    data = np.zeros((config.n_agents, t_hist, config.d_agent))
    valid = np.zeros(config.n_agents, dtype=bool)
    slot_indices = np.full(config.n_agents, -1, dtype=int)
    for s, agent_idx in enumerate(slots):
        track = scene.agents[agent_idx]
        starts = to_local(transform, track.positions[:-1])
        ends = to_local(transform, track.positions[1:])
        # velocity sampled at the motion vector's endpoint
        vels = rotate_to_local(transform, track.velocities[1:])
        onehot = np.tile(_attr_onehot(track.attribute), (t_hist, 1))
        data[s] = np.concatenate([starts, ends, vels, onehot], axis=1)
        valid[s] = True
        slot_indices[s] = agent_idx
    return AgentFeatureTensor(data=data, valid_mask=valid, slot_indices=slot_indices)


def build_map_features(scene: Scene, transform: FrameTransform,
                       config: FeatureConfig) -> MapFeatureTensor:
    """Local-frame lane tensor; lanes ranked by their nearest polyline point."""
    data = np.zeros((config.n_lanes, config.lane_segments, config.d_map))
    valid = np.zeros(config.n_lanes, dtype=bool)
    slot_indices = np.full(config.n_lanes, -1, dtype=int)
    if scene.lanes:
        order, _ = filter_nearest([lane.points for lane in scene.lanes],
                                  transform.origin, config.n_lanes)
        for s, lane_idx in enumerate(order):
            lane = scene.lanes[lane_idx]
            segs = resample_lane(lane, config.lane_segments)
            starts = to_local(transform, segs[:, 0])
            ends = to_local(transform, segs[:, 1])
            attrs = np.tile(np.asarray(lane.attributes, dtype=np.float64),
                            (config.lane_segments, 1))
            data[s] = np.concatenate([starts, ends, attrs], axis=1)
            valid[s] = True
            slot_indices[s] = lane_idx
    return MapFeatureTensor(data=data, valid_mask=valid, slot_indices=slot_indices)
