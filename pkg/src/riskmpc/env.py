"""Deterministic 2D micro-driving simulator.

The world is a polyline lane with scripted actors (constant-velocity
vehicles, timed crossing pedestrians, parked cars, static obstacles and
timed stop zones).  The ego vehicle follows a kinematic bicycle model.
Observations are an ego-centred semantic occupancy grid plus the ego
state; ground-truth traffic events are computed geometrically each step.

All scripted actors are pure functions of the step index, so the full
simulator state is (ego state, step counter, bookkeeping counters) and
snapshot/restore is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

# semantic grid classes
OFFROAD, ROAD, EGO, VEHICLE, PEDESTRIAN, STATIC, SIGN_ZONE, TARGET = range(8)
NUM_CLASSES = 8
CLASS_NAMES = ("off-road", "road", "ego", "vehicle", "pedestrian",
               "static-obstacle", "sign-zone", "target")

# event vector layout (alpha = 5)
EVENT_NAMES = ("pedestrian_collision", "vehicle_collision", "static_collision",
               "sign_violation", "off_lane")
NUM_EVENTS = 5

DT = 0.1
WHEELBASE = 2.5
MAX_SPEED = 6.0    # keeps braking distance inside the H-step lookahead
MAX_STEER_ANGLE = 0.5          # radians at |steer| = 1
EGO_RADIUS = 0.8
STUCK_THRESHOLD = 0.05         # metres per step
STUCK_LIMIT = 100              # consecutive steps
OFFROAD_LIMIT = 10             # consecutive off-lane steps before termination
COLLISION_BUDGET = 3
SUCCESS_RADIUS = 3.0

GRID_SIZE = 32
CELL_SIZE = 1.0


def wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


@dataclass
class ActionStep:
    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def __post_init__(self):
        self.steer = float(np.clip(self.steer, -1.0, 1.0))
        self.throttle = float(np.clip(self.throttle, 0.0, 1.0))
        self.brake = float(np.clip(self.brake, 0.0, 1.0))

    def as_array(self):
        return np.array([self.steer, self.throttle, self.brake])

    @staticmethod
    def from_array(a):
        return ActionStep(float(a[0]), float(a[1]), float(a[2]))


@dataclass
class EgoState:
    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        self.heading = float(wrap_angle(self.heading))
        self.speed = float(max(self.speed, 0.0))

    @property
    def position(self):
        return np.array([self.x, self.y])


def random_action(rng):
    steer, u = rng.uniform(-1, 1), rng.uniform(-1, 1)
    return ActionStep(steer, max(u, 0.0), max(-u, 0.0))


@dataclass
class Scenario:
    name: str
    lane_points: list          # [[x, y], ...] centreline polyline
    lane_width: float
    ego_start: list            # [x, y, heading, speed]
    target: list               # [x, y]
    vehicles: list = field(default_factory=list)
    pedestrians: list = field(default_factory=list)
    statics: list = field(default_factory=list)
    signs: list = field(default_factory=list)
    seed: int = 0
    max_steps: int = 400

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text):
        return Scenario(**json.loads(text))

    @staticmethod
    def load(path):
        with open(path) as f:
            return Scenario.from_json(f.read())

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")


def _segment_distances(points, queries):
    """Distance from each query point to a polyline.

    points: (M, 2) polyline vertices; queries: (..., 2).
    Returns distances with the query's leading shape.
    """
    p = np.asarray(points, dtype=float)
    q = np.asarray(queries, dtype=float)
    flat = q.reshape(-1, 2)
    a, b = p[:-1], p[1:]                      # (S, 2)
    ab = b - a
    denom = (ab ** 2).sum(-1)
    denom = np.where(denom == 0, 1.0, denom)
    ap = flat[:, None, :] - a[None, :, :]     # (Q, S, 2)
    t = np.clip((ap * ab[None]).sum(-1) / denom, 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(flat[:, None, :] - proj, axis=-1).min(axis=1)
    return d.reshape(q.shape[:-1])


class EpisodeOver(RuntimeError):
    pass


class SnapshotMismatch(ValueError):
    pass


class MicroDriveEnv:
    """One scenario instance.  Single-threaded; fully deterministic."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.reset()

    def reset(self):
        x, y, h, v = self.scenario.ego_start
        self.ego = EgoState(x, y, h, v)
        self.t = 0
        self.collisions = 0
        self.collision_counts = np.zeros(3, dtype=int)  # ped, veh, static
        self.sign_violations = 0
        self.offlane_steps = 0
        self.stuck_streak = 0
        self.offlane_streak = 0
        self.done = False
        self.done_reason = None
        self.start_target_dist = float(
            np.linalg.norm(np.array(self.scenario.target) - self.ego.position))
        return self.observe()

    # -- scripted actor positions (pure functions of step index) -------

    def _time(self, t=None):
        return (self.t if t is None else t) * DT

    def vehicle_states(self, t=None):
        tt = self._time(t)
        out = []
        for v in self.scenario.vehicles:
            p = np.array(v["position"]) + np.array(v.get("velocity", [0, 0])) * tt
            out.append((p, v.get("radius", 1.5)))
        return out

    def pedestrian_states(self, t=None):
        tt = self._time(t)
        out = []
        for ped in self.scenario.pedestrians:
            start = ped.get("start", 0.0)
            stop = ped.get("stop", 1e9)
            active = min(max(tt - start, 0.0), max(stop - start, 0.0))
            p = np.array(ped["position"]) + np.array(ped["velocity"]) * active
            out.append((p, ped.get("radius", 0.5)))
        return out

    def static_states(self):
        return [(np.array(s["position"]), s.get("radius", 1.0))
                for s in self.scenario.statics]

    # -- geometry ------------------------------------------------------

    def lane_distance(self, points):
        return _segment_distances(self.scenario.lane_points, points)

    def is_off_lane(self, position):
        margin = self.scenario.lane_width / 2 + 0.5
        return bool(self.lane_distance(np.asarray(position)[None])[0] > margin)

    def in_sign_zone(self, position, t=None):
        tt = self._time(t)
        pos = np.asarray(position)
        for s in self.scenario.signs:
            t0, t1 = s.get("window", [0.0, 1e9])
            if t0 <= tt <= t1:
                if np.linalg.norm(pos - np.array(s["position"])) <= s.get("radius", 2.0):
                    return True
        return False

    # -- dynamics ------------------------------------------------------

    @staticmethod
    def kinematics(ego: EgoState, action: ActionStep):
        """Kinematic bicycle step (pure; shared with test oracles)."""
        accel = 4.0 * action.throttle - 8.0 * action.brake - 0.5
        speed = float(np.clip(ego.speed + accel * DT, 0.0, MAX_SPEED))
        heading = wrap_angle(
            ego.heading + speed / WHEELBASE * np.tan(action.steer * MAX_STEER_ANGLE) * DT)
        x = ego.x + speed * np.cos(heading) * DT
        y = ego.y + speed * np.sin(heading) * DT
        return EgoState(x, y, heading, speed)

    def step(self, action: ActionStep):
        events, done, reason = self.advance(action)
        grid, ego = self.observe()
        return grid, ego, events, done, reason

    def advance(self, action: ActionStep):
        """step() without rendering the grid (planner-internal fast path)."""
        if self.done:
            raise EpisodeOver(f"episode already done ({self.done_reason})")
        prev = self.ego
        tentative = self.kinematics(prev, action)
        self.t += 1

        events = np.zeros(NUM_EVENTS)
        pos = tentative.position
        hit = False
        for (p, r) in self.pedestrian_states():
            if np.linalg.norm(pos - p) < EGO_RADIUS + r:
                events[0] = 1.0
                hit = True
        for (p, r) in self.vehicle_states():
            if np.linalg.norm(pos - p) < EGO_RADIUS + r:
                events[1] = 1.0
                hit = True
        for (p, r) in self.static_states():
            if np.linalg.norm(pos - p) < EGO_RADIUS + r:
                events[2] = 1.0
                hit = True

        if hit:
            # rigid contact: motion is cancelled and the ego is stopped
            self.ego = EgoState(prev.x, prev.y, tentative.heading, 0.0)
            self.collisions += 1
            self.collision_counts += events[:3].astype(int)
        else:
            self.ego = tentative

        if self.in_sign_zone(self.ego.position) and self.ego.speed > 0.5:
            events[3] = 1.0
            self.sign_violations += 1
        if self.is_off_lane(self.ego.position):
            events[4] = 1.0
            self.offlane_steps += 1
            self.offlane_streak += 1
        else:
            self.offlane_streak = 0

        displacement = np.linalg.norm(self.ego.position - prev.position)
        self.stuck_streak = self.stuck_streak + 1 if displacement < STUCK_THRESHOLD else 0

        target = np.array(self.scenario.target)
        if np.linalg.norm(self.ego.position - target) <= SUCCESS_RADIUS:
            self.done, self.done_reason = True, "success"
        elif self.collisions >= COLLISION_BUDGET:
            self.done, self.done_reason = True, "collisions_exhausted"
        elif self.stuck_streak >= STUCK_LIMIT or self.offlane_streak >= OFFROAD_LIMIT:
            self.done, self.done_reason = True, "stuck_or_offroad"
        elif self.t >= self.scenario.max_steps:
            self.done, self.done_reason = True, "stuck_or_offroad"

        return events, self.done, self.done_reason

    # -- observation ---------------------------------------------------

    def observe(self):
        return self.render_grid(), EgoState(self.ego.x, self.ego.y,
                                            self.ego.heading, self.ego.speed)

    def _cell_centres(self):
        half = GRID_SIZE // 2
        idx = (np.arange(GRID_SIZE) - half + 0.5) * CELL_SIZE
        fwd, lat = np.meshgrid(idx, idx, indexing="ij")      # rows: forward axis
        c, s = np.cos(self.ego.heading), np.sin(self.ego.heading)
        wx = self.ego.x + fwd * c - lat * s
        wy = self.ego.y + fwd * s + lat * c
        return np.stack([wx, wy], axis=-1)                   # (G, G, 2)

    def render_grid(self):
        """Ego-centred, ego-aligned semantic grid (rows = forward axis)."""
        centres = self._cell_centres()
        grid = np.full((GRID_SIZE, GRID_SIZE), OFFROAD, dtype=np.int64)
        on_road = self.lane_distance(centres) <= self.scenario.lane_width / 2
        grid[on_road] = ROAD

        tt = self._time()
        for s in self.scenario.signs:
            t0, t1 = s.get("window", [0.0, 1e9])
            if t0 <= tt <= t1:
                d = np.linalg.norm(centres - np.array(s["position"]), axis=-1)
                grid[d <= s.get("radius", 2.0)] = SIGN_ZONE

        d = np.linalg.norm(centres - np.array(self.scenario.target), axis=-1)
        grid[d <= SUCCESS_RADIUS] = TARGET

        for (p, r) in self.static_states():
            grid[np.linalg.norm(centres - p, axis=-1) <= r] = STATIC
        for (p, r) in self.vehicle_states():
            grid[np.linalg.norm(centres - p, axis=-1) <= r] = VEHICLE
        for (p, r) in self.pedestrian_states():
            grid[np.linalg.norm(centres - p, axis=-1) <= max(r, 0.75)] = PEDESTRIAN

        half = GRID_SIZE // 2
        grid[half, half] = EGO
        return grid

    def target_in_ego_frame(self):
        """Target position rotated/translated into the current ego frame."""
        rel = np.array(self.scenario.target) - self.ego.position
        c, s = np.cos(-self.ego.heading), np.sin(-self.ego.heading)
        return np.array([rel[0] * c - rel[1] * s, rel[0] * s + rel[1] * c])

    # -- snapshot / restore --------------------------------------------

    def clone_state(self):
        return {
            "scenario": self.scenario.name,
            "ego": (self.ego.x, self.ego.y, self.ego.heading, self.ego.speed),
            "t": self.t,
            "collisions": self.collisions,
            "collision_counts": self.collision_counts.copy(),
            "sign_violations": self.sign_violations,
            "offlane_steps": self.offlane_steps,
            "stuck_streak": self.stuck_streak,
            "offlane_streak": self.offlane_streak,
            "done": self.done,
            "done_reason": self.done_reason,
        }

    def restore_state(self, snapshot):
        if snapshot["scenario"] != self.scenario.name:
            raise SnapshotMismatch(
                f"snapshot from scenario {snapshot['scenario']!r}, "
                f"env runs {self.scenario.name!r}")
        self.ego = EgoState(*snapshot["ego"])
        self.t = snapshot["t"]
        self.collisions = snapshot["collisions"]
        self.collision_counts = snapshot["collision_counts"].copy()
        self.sign_violations = snapshot["sign_violations"]
        self.offlane_steps = snapshot["offlane_steps"]
        self.stuck_streak = snapshot["stuck_streak"]
        self.offlane_streak = snapshot["offlane_streak"]
        self.done = snapshot["done"]
        self.done_reason = snapshot["done_reason"]


def progress_delta(prev: EgoState, cur: EgoState, target):
    """Reduction in distance to target between two ego states (metres)."""
    target = np.asarray(target, dtype=float)
    return float(np.linalg.norm(target - prev.position)
                 - np.linalg.norm(target - cur.position))


def write_episode_log(path, records):
    """Line-delimited JSON: one record per step."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_episode_log(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
