"""Deterministic synthetic scene generator.

Two families: `highway` (parallel lanes, lane-keep / smooth cosine-profile
lane changes, slower lead vehicles inducing the changes) and `urban` (a
four-way intersection with left/straight/right maneuvers and crossing
traffic). Scenes carry a ground-truth future for the target plus an
intention label; Gaussian position noise corrupts observations only, never
labels or futures. Generation is pure per (config, seed, index).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .scene_model import AgentTrack, LanePolyline, Scene, wrap_angle
from .seeding import sub_rng

INTENTIONS = ("left", "straight", "right")

VEHICLE_BBOX = (4.8, 1.8)
PEDESTRIAN_BBOX = (0.6, 0.6)
CYCLIST_BBOX = (1.8, 0.6)

_PLACEMENT_TRIES = 30


class _Infeasible(Exception):
    """Internal: scene placement failed after bounded retries."""


@dataclass
class GenConfig:
    family: str = "highway"
    scene_count: int = 100
    agent_count: tuple[int, int] = (3, 8)       # surrounding agents, inclusive
    speed: tuple[float, float] = (8.0, 14.0)    # m/s
    lane_width: float = 3.5
    lane_count: int = 4
    seed: int = 0
    noise_std: float = 0.1                      # observation position noise, m
    t_hist: int = 20
    t_fut: int = 30
    hz: float = 10.0
    intent_weights: tuple[float, float, float] = (0.25, 0.5, 0.25)  # left/straight/right

    def __post_init__(self):
        if self.family not in ("highway", "urban"):
            raise DataError(f"unknown scenario family {self.family!r}")
        if self.agent_count[0] > self.agent_count[1] or self.agent_count[0] < 0:
            raise DataError("agent_count range is empty")
        if self.speed[0] > self.speed[1] or self.speed[0] <= 0:
            raise DataError("speed range is empty")
        if self.lane_width <= VEHICLE_BBOX[1]:
            raise DataError("lane width must exceed vehicle width")
        if self.lane_count < 2:
            raise DataError("need at least 2 lanes")


@dataclass
class LabeledScene:
    scene: Scene
    future: np.ndarray          # (t_fut, 2) world coordinates, noiseless
    intention: str

    def __post_init__(self):
        self.future = np.asarray(self.future, dtype=np.float64)
        if self.intention not in INTENTIONS:
            raise DataError(f"unknown intention {self.intention!r}")


def _pick_intent(cfg: GenConfig, rng: np.random.Generator) -> str:
    weights = np.asarray(cfg.intent_weights, dtype=np.float64)
    weights = weights / weights.sum()
    return INTENTIONS[int(rng.choice(3, p=weights))]


def _track(positions: np.ndarray, velocities: np.ndarray, attribute: str,
           bbox: tuple[float, float]) -> AgentTrack:
    return AgentTrack(positions=positions, velocities=velocities,
                      attribute=attribute, bbox=bbox)


def _const_velocity_track(pos0, vel, times, attribute="vehicle", bbox=VEHICLE_BBOX) -> AgentTrack:
    pos0 = np.asarray(pos0, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    positions = pos0[None, :] + times[:, None] * vel[None, :]
    velocities = np.tile(vel, (len(times), 1))
    return _track(positions, velocities, attribute, bbox)


def _apply_observation_noise(scene: Scene, noise_std: float, rng: np.random.Generator) -> None:
    if noise_std <= 0:
        return
    for track in scene.agents:
        track.positions = track.positions + rng.normal(0.0, noise_std, track.positions.shape)


# ---------------------------------------------------------------------------
# highway
# ---------------------------------------------------------------------------

def build_highway_scene(cfg: GenConfig, rng: np.random.Generator) -> LabeledScene:
    w = cfg.lane_width
    dt = 1.0 / cfg.hz
    hist_times = (np.arange(cfg.t_hist + 1) - cfg.t_hist) * dt       # ends at t=0
    fut_times = (np.arange(cfg.t_fut) + 1) * dt

    intent = _pick_intent(cfg, rng)
    if intent == "left":
        lane0 = int(rng.integers(0, cfg.lane_count - 1))
        dy = +w
    elif intent == "right":
        lane0 = int(rng.integers(1, cfg.lane_count))
        dy = -w
    else:
        lane0 = int(rng.integers(0, cfg.lane_count))
        dy = 0.0
    y0 = lane0 * w
    v = rng.uniform(*cfg.speed)
    x_now = rng.uniform(-15.0, 15.0)

    if intent == "straight":
        def lateral(t):
            return y0, 0.0
    else:
        t_lc = rng.uniform(3.0, 5.0)
        # start early enough to finish inside the future window, late enough
        # that the change is < ~35% done now (keeps the current lane unambiguous)
        lo, hi = -0.403 * t_lc, 3.0 - t_lc
        t_start = rng.uniform(lo, hi)

        def lateral(t):
            u = (t - t_start) / t_lc
            if u <= 0.0:
                return y0, 0.0
            if u >= 1.0:
                return y0 + dy, 0.0
            return (y0 + dy * 0.5 * (1.0 - math.cos(math.pi * u)),
                    dy * math.pi / (2.0 * t_lc) * math.sin(math.pi * u))

    def target_state(t):
        y, vy = lateral(t)
        return np.array([x_now + v * t, y]), np.array([v, vy])

    hist_pos = np.array([target_state(t)[0] for t in hist_times])
    hist_vel = np.array([target_state(t)[1] for t in hist_times])
    future = np.array([target_state(t)[0] for t in fut_times])
    agents = [_track(hist_pos, hist_vel, "vehicle", VEHICLE_BBOX)]

    # (lane, x at t=0, speed) occupancy for spacing checks
    occupied = [(lane0, x_now, v)]
    n_others = int(rng.integers(cfg.agent_count[0], cfg.agent_count[1] + 1))
    for j in range(n_others):
        if j == 0 and intent != "straight":
            # slower lead vehicle in the current lane motivates the change
            lane, x, speed = lane0, x_now + rng.uniform(12.0, 28.0), v * rng.uniform(0.55, 0.8)
        else:
            for attempt in range(_PLACEMENT_TRIES):
                lane = int(rng.integers(0, cfg.lane_count))
                x = x_now + rng.uniform(-70.0, 70.0)
                speed = rng.uniform(*cfg.speed)
                if all(o_lane != lane or abs(o_x - x) > 10.0 for o_lane, o_x, _ in occupied):
                    break
            else:
                raise _Infeasible(f"could not place agent {j}")
            if intent == "straight" and lane == lane0 and 0.0 < x - x_now < 40.0:
                speed = v * rng.uniform(1.0, 1.25)   # keep-lane scenes get no slow lead
        occupied.append((lane, x, speed))
        agents.append(_const_velocity_track(
            (x - speed * cfg.t_hist * dt, lane * w), (speed, 0.0), hist_times - hist_times[0]))

    lo_x = x_now - 80.0 + rng.uniform(-5.0, 5.0)
    hi_x = x_now + 80.0 + rng.uniform(-5.0, 5.0)
    xs = np.linspace(lo_x, hi_x, 11)
    lanes = [LanePolyline(points=np.stack([xs, np.full_like(xs, k * w)], axis=1),
                          attributes=(0, 0))
             for k in range(cfg.lane_count)]

    scene = Scene(agents=agents, lanes=lanes, target_agent_id=0, timestep_hz=cfg.hz)
    _apply_observation_noise(scene, cfg.noise_std, rng)
    return LabeledScene(scene=scene, future=future, intention=intent)


# ---------------------------------------------------------------------------
# urban: four-way intersection, right-hand traffic
# ---------------------------------------------------------------------------

_LEFT_RADIUS = 8.0
_RIGHT_RADIUS = 4.0
_LAT_ACCEL_BUDGET = 4.2     # m/s^2 for turn speed sizing; hard cap is 5


def _quarter_arc(center, radius, psi0, psi1, n=48) -> np.ndarray:
    psi = np.linspace(psi0, psi1, n)
    return np.stack([center[0] + radius * np.cos(psi),
                     center[1] + radius * np.sin(psi)], axis=1)


def _urban_paths(w: float) -> dict:
    """Dense centerline paths for the target, keyed by intent."""
    half = w / 2.0
    reach = 130.0
    # left turn (east -> north), counterclockwise quarter circle
    xl = half - _LEFT_RADIUS
    arc_l = _quarter_arc((xl, -half + _LEFT_RADIUS), _LEFT_RADIUS, -math.pi / 2.0, 0.0)
    # right turn (east -> south), clockwise quarter circle
    xr = -half - _RIGHT_RADIUS
    arc_r = _quarter_arc((xr, -half - _RIGHT_RADIUS), _RIGHT_RADIUS, math.pi / 2.0, 0.0)

    def with_legs(arc, exit_dir):
        entry_x = arc[0, 0]
        approach = np.stack([np.linspace(entry_x - reach, entry_x, 260, endpoint=False),
                             np.full(260, -half)], axis=1)
        exit_pts = arc[-1] + np.outer(np.linspace(0.0, reach, 260)[1:], exit_dir)
        return np.concatenate([approach, arc, exit_pts], axis=0)

    straight = np.stack([np.linspace(-reach, reach, 1040), np.full(1040, -half)], axis=1)
    return {
        "left": (with_legs(arc_l, np.array([0.0, 1.0])), xl, _LEFT_RADIUS),
        "right": (with_legs(arc_r, np.array([0.0, -1.0])), xr, _RIGHT_RADIUS),
        "straight": (straight, None, None),
    }


def _arclength(path: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


class _SpeedProfile:
    """Piecewise-linear speed over time with exact traveled-distance integrals."""

    def __init__(self, knot_times, knot_speeds):
        self.t = np.asarray(knot_times, dtype=np.float64)
        self.v = np.asarray(knot_speeds, dtype=np.float64)

    def speed(self, t: float) -> float:
        return float(np.interp(t, self.t, self.v))

    def distance(self, t0: float, t1: float) -> float:
        """Exact integral of speed from t0 to t1 (t1 >= t0)."""
        knots = [t0] + [float(t) for t in self.t if t0 < t < t1] + [t1]
        total = 0.0
        for a, b in zip(knots[:-1], knots[1:]):
            total += 0.5 * (self.speed(a) + self.speed(b)) * (b - a)
        return total


def build_urban_scene(cfg: GenConfig, rng: np.random.Generator) -> LabeledScene:
    w = cfg.lane_width
    half = w / 2.0
    dt = 1.0 / cfg.hz
    hist_times = (np.arange(cfg.t_hist + 1) - cfg.t_hist) * dt
    fut_times = (np.arange(cfg.t_fut) + 1) * dt

    intent = _pick_intent(cfg, rng)
    paths = _urban_paths(w)
    path, entry_x, radius = paths[intent]
    s = _arclength(path)

    v0 = rng.uniform(*cfg.speed)
    if intent == "straight":
        profile = _SpeedProfile([0.0], [v0])
        s_now = s[-1] / 2.0 - 20.0 + rng.uniform(-8.0, 8.0)
    else:
        v_turn = float(np.clip(0.9 * math.sqrt(_LAT_ACCEL_BUDGET * radius),
                               0.82 * cfg.speed[0], v0))
        t_arc = rng.uniform(0.4, 1.2)
        a_dec = rng.uniform(1.5, 2.0)
        t_dec = (v0 - v_turn) / a_dec
        if t_arc - t_dec < -1.6:            # start braking within the history window
            t_dec = t_arc + 1.6
            a_dec = (v0 - v_turn) / max(t_dec, 1e-9)
        arc_time = (math.pi / 2.0) * radius / v_turn
        t_exit = t_arc + arc_time
        t_cap = t_exit + (v0 - v_turn) / 1.5
        profile = _SpeedProfile([t_arc - t_dec, t_arc, t_exit, t_cap],
                                [v0, v_turn, v_turn, v0])
        s_arc_entry = float(s[np.argmin(np.abs(path[:, 0] - entry_x)
                                        + np.abs(path[:, 1] + half))])
        s_now = s_arc_entry - profile.distance(0.0, t_arc)

    def s_of(t):
        if t >= 0:
            return s_now + profile.distance(0.0, t)
        return s_now - profile.distance(t, 0.0)

    def pos_at(t):
        st = np.clip(s_of(t), 0.0, s[-1])
        return np.array([np.interp(st, s, path[:, 0]), np.interp(st, s, path[:, 1])])

    def vel_at(t, h=1e-3):
        return (pos_at(t + h) - pos_at(t - h)) / (2.0 * h)

    hist_pos = np.array([pos_at(t) for t in hist_times])
    hist_vel = np.array([vel_at(t) for t in hist_times])
    future = np.array([pos_at(t) for t in fut_times])
    agents = [_track(hist_pos, hist_vel, "vehicle", VEHICLE_BBOX)]

    # crossing and oncoming traffic on the through lines
    lines = {
        "north": (np.array([half, 0.0]), np.array([0.0, 1.0])),
        "south": (np.array([-half, 0.0]), np.array([0.0, -1.0])),
        "west": (np.array([0.0, half]), np.array([-1.0, 0.0])),
    }
    n_others = int(rng.integers(cfg.agent_count[0], cfg.agent_count[1] + 1))
    used_offsets: dict[str, list[float]] = {k: [] for k in lines}
    for j in range(n_others):
        roll = rng.random()
        if roll < 0.12:
            corner = rng.choice([-1.0, 1.0], size=2) * (w + 1.2)
            walk_dir = np.array([1.0, 0.0]) if rng.random() < 0.5 else np.array([0.0, 1.0])
            walk_dir = walk_dir * rng.choice([-1.0, 1.0])
            agents.append(_const_velocity_track(
                corner - walk_dir * 1.2 * cfg.t_hist * dt, walk_dir * 1.2,
                hist_times - hist_times[0], "pedestrian", PEDESTRIAN_BBOX))
            continue
        if roll < 0.2:
            start = np.array([30.0, half + 1.6])
            agents.append(_const_velocity_track(
                start - np.array([-4.0, 0.0]) * cfg.t_hist * dt, np.array([-4.0, 0.0]),
                hist_times - hist_times[0], "cyclist", CYCLIST_BBOX))
            continue
        for attempt in range(_PLACEMENT_TRIES):
            key = ("north", "south", "west")[int(rng.integers(3))]
            offset = rng.uniform(-60.0, 60.0)
            if all(abs(offset - o) > 12.0 for o in used_offsets[key]):
                used_offsets[key].append(offset)
                break
        else:
            raise _Infeasible(f"could not place crossing agent {j}")
        origin, direction = lines[key]
        speed = rng.uniform(*cfg.speed)
        pos_now = origin + direction * offset
        agents.append(_const_velocity_track(
            pos_now - direction * speed * cfg.t_hist * dt, direction * speed,
            hist_times - hist_times[0]))

    reach = 90.0
    ties = np.linspace(-reach, reach, 13)
    lanes = [
        LanePolyline(np.stack([ties, np.full_like(ties, -half)], axis=1), (0, 1)),   # eastbound
        LanePolyline(np.stack([ties[::-1], np.full_like(ties, half)], axis=1), (0, 1)),  # westbound
        LanePolyline(np.stack([np.full_like(ties, half), ties], axis=1), (0, 1)),    # northbound
        LanePolyline(np.stack([np.full_like(ties, -half), ties[::-1]], axis=1), (0, 1)),  # southbound
        LanePolyline(_quarter_arc((half - _LEFT_RADIUS, -half + _LEFT_RADIUS),
                                  _LEFT_RADIUS, -math.pi / 2.0, 0.0, 24), (1, 1)),
        LanePolyline(_quarter_arc((-half - _RIGHT_RADIUS, -half - _RIGHT_RADIUS),
                                  _RIGHT_RADIUS, math.pi / 2.0, 0.0, 24), (1, 1)),
    ]

    scene = Scene(agents=agents, lanes=lanes, target_agent_id=0, timestep_hz=cfg.hz)
    _apply_observation_noise(scene, cfg.noise_std, rng)
    return LabeledScene(scene=scene, future=future, intention=intent)


# ---------------------------------------------------------------------------
# streams, labels, balancing
# ---------------------------------------------------------------------------

def build_scene(cfg: GenConfig, index: int) -> LabeledScene:
    """Pure per-index scene construction (parallel-safe)."""
    rng = sub_rng(cfg.seed, "scene", index)
    builder = build_highway_scene if cfg.family == "highway" else build_urban_scene
    return builder(cfg, rng)


def generate(cfg: GenConfig) -> tuple[list[LabeledScene], int]:
    """All scenes for a config; returns (scenes, skipped count)."""
    scenes = []
    skipped = 0
    for i in range(cfg.scene_count):
        try:
            scenes.append(build_scene(cfg, i))
        except _Infeasible:
            skipped += 1
    return scenes, skipped


def gen_highway(cfg: GenConfig, rng: np.random.Generator | None = None):
    """Stream of highway scenes (rng defaults to the config seed's stream)."""
    for i in range(cfg.scene_count):
        try:
            yield (build_highway_scene(cfg, rng) if rng is not None
                   else build_scene(cfg, i))
        except _Infeasible:
            continue


def gen_urban(cfg: GenConfig, rng: np.random.Generator | None = None):
    """Stream of urban scenes (rng defaults to the config seed's stream)."""
    for i in range(cfg.scene_count):
        try:
            yield (build_urban_scene(cfg, rng) if rng is not None
                   else build_scene(cfg, i))
        except _Infeasible:
            continue


def intention_from_future(labeled: LabeledScene, family: str, lane_width: float) -> str:
    """Recompute the label from the stored (noiseless) future."""
    future = labeled.future
    if family == "highway":
        y_now = labeled.scene.target.positions[-1, 1]
        lane_now = round(float(y_now) / lane_width)
        lane_end = round(float(future[-1, 1]) / lane_width)
        if lane_end > lane_now:
            return "left"
        if lane_end < lane_now:
            return "right"
        return "straight"
    h_start = math.atan2(*(future[1] - future[0])[::-1])
    h_end = math.atan2(*(future[-1] - future[-2])[::-1])
    delta = wrap_angle(h_end - h_start)
    if delta > math.pi / 4.0:
        return "left"
    if delta < -math.pi / 4.0:
        return "right"
    return "straight"


def balance(scenes: list[LabeledScene], rng: np.random.Generator,
            majority_cap: int) -> list[LabeledScene]:
    """Keep every minority-class scene; subsample the largest class to the cap."""
    counts = {k: 0 for k in INTENTIONS}
    for ls in scenes:
        counts[ls.intention] += 1
    majority = max(INTENTIONS, key=lambda k: counts[k])
    major_idx = [i for i, ls in enumerate(scenes) if ls.intention == majority]
    keep = set(range(len(scenes)))
    if len(major_idx) > majority_cap:
        chosen = rng.choice(len(major_idx), size=majority_cap, replace=False)
        keep -= set(major_idx) - {major_idx[c] for c in chosen}
    result = [scenes[i] for i in sorted(keep)]
    rng.shuffle(result)
    return result


# ---------------------------------------------------------------------------
# dataset files: one JSON object per line; `#` lines are comments
# ---------------------------------------------------------------------------

_HEADER = "# traffic scenes: one JSON object per line (agents, lanes, target, hz[, future, intention])"


def scene_to_obj(item) -> dict:
    ls = item if isinstance(item, LabeledScene) else None
    scene = ls.scene if ls is not None else item
    obj = {
        "hz": scene.timestep_hz,
        "target": scene.target_agent_id,
        "agents": [{
            "positions": t.positions.tolist(),
            "velocities": t.velocities.tolist(),
            "attribute": t.attribute,
            "bbox": list(t.bbox),
        } for t in scene.agents],
        "lanes": [{
            "points": lane.points.tolist(),
            "attributes": list(lane.attributes),
        } for lane in scene.lanes],
    }
    if ls is not None:
        obj["future"] = ls.future.tolist()
        obj["intention"] = ls.intention
    return obj


def scene_from_obj(obj: dict):
    agents = [AgentTrack(positions=np.asarray(a["positions"]),
                         velocities=np.asarray(a["velocities"]),
                         attribute=a["attribute"],
                         bbox=tuple(a["bbox"]))
              for a in obj["agents"]]
    lanes = [LanePolyline(points=np.asarray(l["points"]),
                          attributes=tuple(l["attributes"]))
             for l in obj["lanes"]]
    scene = Scene(agents=agents, lanes=lanes, target_agent_id=int(obj["target"]),
                  timestep_hz=float(obj["hz"]))
    if "future" in obj:
        return LabeledScene(scene=scene, future=np.asarray(obj["future"]),
                            intention=obj["intention"])
    return scene


def write_dataset(path, scenes) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_HEADER + "\n")
        for item in scenes:
            fh.write(json.dumps(scene_to_obj(item), sort_keys=True,
                                separators=(",", ":")) + "\n")


def read_dataset(path) -> list:
    path = Path(path)
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                out.append(scene_from_obj(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, DataError) as exc:
                raise DataError(f"line {lineno}: malformed scene ({exc})") from exc
    return out
