"""Scenario families and the fixed evaluation suite.

All scenarios live on a mostly-straight road segment with the target a
few tens of metres ahead.  Hazards are placed mid-route so that only
goal-directed driving encounters them.  Families:

  straight    clear road
  curve       two-segment bent road
  pedestrian  timed crossing pedestrian intersecting the ego path
  parked      parked car blocking the lane centre (detour required)
  sign        stop zone with a timed forbidden window
  lead        slow constant-velocity lead vehicle
"""

from __future__ import annotations

import numpy as np

from .env import Scenario

LANE_WIDTH = 8.0
ROUTE_LEN = 42.0


def _base(name, seed, lane_points=None, target_x=ROUTE_LEN):
    points = lane_points or [[-10.0, 0.0], [80.0, 0.0]]
    return dict(name=name, seed=seed, lane_points=points, lane_width=LANE_WIDTH,
                ego_start=[0.0, 0.0, 0.0, 0.0], target=[target_x, 0.0])


def make_straight(seed, rng=None):
    return Scenario(**_base(f"straight-{seed}", seed))


def make_curve(seed, rng=None):
    rng = rng or np.random.default_rng(seed)
    bend = float(rng.uniform(8.0, 12.0)) * (1 if seed % 2 == 0 else -1)
    points = [[-10.0, 0.0], [22.0, 0.0], [60.0, bend]]
    tx = 40.0
    ty = bend * (tx - 22.0) / (60.0 - 22.0)
    base = _base(f"curve-{seed}", seed, lane_points=points)
    base["target"] = [tx, float(ty)]
    return Scenario(**base)


def make_pedestrian(seed, rng=None):
    rng = rng or np.random.default_rng(seed)
    x = float(rng.uniform(22.0, 28.0))
    side = 1 if seed % 2 == 0 else -1
    speed = float(rng.uniform(1.6, 2.2))
    start = float(rng.uniform(0.0, 1.0))
    base = _base(f"pedestrian-{seed}", seed)
    base["pedestrians"] = [dict(position=[x, 8.0 * side],
                                velocity=[0.0, -speed * side],
                                start=start, stop=start + 16.0 / speed,
                                radius=0.5)]
    return Scenario(**base)


def make_parked(seed, rng=None):
    rng = rng or np.random.default_rng(seed)
    x = float(rng.uniform(20.0, 26.0))
    side = 1 if seed % 2 == 0 else -1
    y = side * float(rng.uniform(0.5, 1.2))
    base = _base(f"parked-{seed}", seed)
    base["vehicles"] = [dict(position=[x, y], velocity=[0.0, 0.0],
                             radius=1.0, parked=True)]
    return Scenario(**base)


def make_sign(seed, rng=None):
    rng = rng or np.random.default_rng(seed)
    x = float(rng.uniform(20.0, 26.0))
    close = float(rng.uniform(5.0, 7.0))
    base = _base(f"sign-{seed}", seed)
    base["signs"] = [dict(position=[x, 0.0], radius=2.5, window=[0.0, close])]
    return Scenario(**base)


def make_lead(seed, rng=None):
    rng = rng or np.random.default_rng(seed)
    speed = float(rng.uniform(1.6, 2.4))
    base = _base(f"lead-{seed}", seed)
    base["vehicles"] = [dict(position=[14.0, 0.0], velocity=[speed, 0.0],
                             radius=1.0)]
    return Scenario(**base)


FAMILIES = {
    "straight": make_straight,
    "curve": make_curve,
    "pedestrian": make_pedestrian,
    "parked": make_parked,
    "sign": make_sign,
    "lead": make_lead,
}

# 20 fixed evaluation scenarios
SUITE_SPEC = (
    [("straight", s) for s in (1, 2, 3)]
    + [("curve", s) for s in (10, 11, 12)]
    + [("pedestrian", s) for s in (20, 21, 22, 23)]
    + [("parked", s) for s in (30, 31, 32, 33, 34, 35)]
    + [("sign", s) for s in (40, 41)]
    + [("lead", s) for s in (50, 51)]
)

HAZARD_FREE_FAMILIES = ("straight", "curve")


def make_suite():
    """The fixed 20-scenario evaluation suite."""
    return [FAMILIES[fam](seed) for fam, seed in SUITE_SPEC]


def make_calibration_suite():
    """Hazard-free scenarios only (oracle policies must ace these)."""
    return [FAMILIES[fam](seed) for fam, seed in SUITE_SPEC
            if fam in HAZARD_FREE_FAMILIES]


def sample_training_scenario(rng):
    """Random scenario from the family mix with jittered parameters."""
    fams = list(FAMILIES)
    weights = np.array([1.0, 1.0, 2.0, 2.0, 1.0, 1.5])
    fam = fams[rng.choice(len(fams), p=weights / weights.sum())]
    seed = int(rng.integers(1000, 10_000_000))
    return FAMILIES[fam](seed, rng=rng)
