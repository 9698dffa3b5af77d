"""Simulator checks against independent geometry/dynamics oracles."""

import numpy as np
import pytest

from riskmpc import env as E
from riskmpc.scenarios import make_parked, make_sign, make_straight, make_suite


def oracle_bicycle_step(x, y, heading, speed, steer, throttle, brake):
    """Independent kinematic bicycle reference, written from the equations."""
    accel = 4.0 * throttle - 8.0 * brake - 0.5
    v = min(max(speed + accel * 0.1, 0.0), 6.0)
    h = heading + v / 2.5 * np.tan(steer * 0.5) * 0.1
    h = (h + np.pi) % (2 * np.pi) - np.pi
    return x + v * np.cos(h) * 0.1, y + v * np.sin(h) * 0.1, h, v


def empty_scenario(**kw):
    base = dict(name="t", lane_points=[[-10, 0], [80, 0]], lane_width=8.0,
                ego_start=[0.0, 0.0, 0.0, 0.0], target=[42.0, 0.0])
    base.update(kw)
    return E.Scenario(**base)


@pytest.mark.parametrize("seed", range(10))
def test_kinematics_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    state = E.EgoState(*rng.uniform(-5, 5, 2), rng.uniform(-3, 3),
                       rng.uniform(0, 6))
    ref = (state.x, state.y, state.heading, state.speed)
    for _ in range(30):
        a = E.random_action(rng)
        state = E.MicroDriveEnv.kinematics(state, a)
        ref = oracle_bicycle_step(*ref, a.steer, a.throttle, a.brake)
    assert np.allclose([state.x, state.y, state.heading, state.speed], ref)


def test_speed_clamped_to_limits():
    s = E.EgoState(0, 0, 0, 5.9)
    for _ in range(20):
        s = E.MicroDriveEnv.kinematics(s, E.ActionStep(0, 1.0, 0))
    assert s.speed == E.MAX_SPEED
    for _ in range(20):
        s = E.MicroDriveEnv.kinematics(s, E.ActionStep(0, 0, 1.0))
    assert s.speed == 0.0


def test_action_clamping():
    a = E.ActionStep(5.0, -2.0, 3.0)
    assert (a.steer, a.throttle, a.brake) == (1.0, 0.0, 1.0)


def test_deterministic_replay_bit_exact():
    rng = np.random.default_rng(3)
    actions = [E.random_action(rng) for _ in range(60)]
    trajs = []
    for _ in range(2):
        env = E.MicroDriveEnv(make_parked(30))
        t = []
        for a in actions:
            if env.done:
                break
            _, ego, events, _, _ = env.step(a)
            t.append((ego.x, ego.y, ego.heading, ego.speed, tuple(events)))
        trajs.append(t)
    assert trajs[0] == trajs[1]


def test_snapshot_restore_exact():
    env = E.MicroDriveEnv(make_parked(31))
    rng = np.random.default_rng(5)
    for _ in range(10):
        env.step(E.random_action(rng))
    snap = env.clone_state()
    actions = [E.random_action(rng) for _ in range(25)]
    run1 = [env.step(a)[1:3] for a in actions]
    env.restore_state(snap)
    run2 = [env.step(a)[1:3] for a in actions]
    for (e1, v1), (e2, v2) in zip(run1, run2):
        assert (e1.x, e1.y, e1.heading, e1.speed) == (e2.x, e2.y, e2.heading, e2.speed)
        assert np.array_equal(v1, v2)


def test_snapshot_scenario_mismatch():
    snap = E.MicroDriveEnv(make_straight(1)).clone_state()
    with pytest.raises(E.SnapshotMismatch):
        E.MicroDriveEnv(make_straight(2)).restore_state(snap)


def test_collision_reverts_position_and_stops():
    sc = empty_scenario(statics=[dict(position=[3.0, 0.0], radius=1.0)],
                        ego_start=[0.0, 0.0, 0.0, 6.0])
    env = E.MicroDriveEnv(sc)
    events = np.zeros(E.NUM_EVENTS)
    while not events[2]:
        prev = env.ego
        events, done, _ = env.advance(E.ActionStep(0, 1.0, 0))
        assert not done
    assert env.ego.x == prev.x and env.ego.y == prev.y
    assert env.ego.speed == 0.0
    assert env.collision_counts[2] == 1


def test_collision_budget_terminates():
    sc = empty_scenario(statics=[dict(position=[2.0, 0.0], radius=1.5)])
    env = E.MicroDriveEnv(sc)
    while not env.done:
        env.advance(E.ActionStep(0, 1.0, 0))
        if env.t > 50:
            break
    assert env.done and env.done_reason == "collisions_exhausted"
    assert env.collisions == E.COLLISION_BUDGET


def test_sign_violation_requires_window_and_speed():
    sc = empty_scenario(signs=[dict(position=[0.0, 0.0], radius=5.0,
                                    window=[0.0, 0.5])],
                        ego_start=[0.0, 0.0, 0.0, 3.0])
    env = E.MicroDriveEnv(sc)
    ev, _, _ = env.advance(E.ActionStep(0, 0.5, 0))      # inside, fast, in window
    assert ev[3] == 1.0
    for _ in range(10):                                  # window expires
        ev, _, _ = env.advance(E.ActionStep(0, 0.5, 0))
    assert ev[3] == 0.0
    # slow crawl inside an open window is not a violation
    sc2 = empty_scenario(signs=[dict(position=[0.0, 0.0], radius=5.0,
                                     window=[0.0, 100.0])])
    env2 = E.MicroDriveEnv(sc2)
    ev, _, _ = env2.advance(E.ActionStep(0, 0.3, 0))
    assert env2.ego.speed <= 0.5 and ev[3] == 0.0


def test_offlane_event_and_termination():
    sc = empty_scenario(ego_start=[0.0, 0.0, np.pi / 2, 4.0])  # drive off sideways
    env = E.MicroDriveEnv(sc)
    flags = []
    while not env.done:
        ev, _, _ = env.advance(E.ActionStep(0, 1.0, 0))
        flags.append(ev[4])
    assert env.done_reason == "stuck_or_offroad"
    assert sum(flags) == E.OFFROAD_LIMIT      # terminated by the streak


def test_stuck_termination():
    env = E.MicroDriveEnv(empty_scenario())
    while not env.done:
        env.advance(E.ActionStep(0, 0, 1.0))
    assert env.done_reason == "stuck_or_offroad"
    assert env.t == E.STUCK_LIMIT


def test_success_radius():
    sc = empty_scenario(ego_start=[38.0, 0.0, 0.0, 5.0])
    env = E.MicroDriveEnv(sc)
    while not env.done:
        env.advance(E.ActionStep(0, 1.0, 0))
    assert env.done_reason == "success"
    assert np.linalg.norm(env.ego.position - [42, 0]) <= E.SUCCESS_RADIUS


def test_step_after_done_raises():
    sc = empty_scenario(ego_start=[41.0, 0.0, 0.0, 1.0])
    env = E.MicroDriveEnv(sc)
    env.advance(E.ActionStep(0, 1, 0))
    assert env.done
    with pytest.raises(E.EpisodeOver):
        env.advance(E.ActionStep())


def test_grid_ego_centred_and_aligned():
    sc = empty_scenario(vehicles=[dict(position=[6.0, 0.0], radius=1.0)])
    env = E.MicroDriveEnv(sc)
    grid, _ = env.observe()
    half = E.GRID_SIZE // 2
    assert grid[half, half] == E.EGO
    # obstacle 6 m dead ahead lands on the forward (row) axis
    fwd = grid[half + 5:half + 8, half - 1:half + 2]
    assert (fwd == E.VEHICLE).any()
    assert (grid == E.ROAD).any() and (grid == E.OFFROAD).any()
    # rotate the ego: the same obstacle stays on the forward axis
    env.ego = E.EgoState(6.0, -6.0, np.pi / 2, 0.0)
    grid2 = env.render_grid()
    fwd2 = grid2[half + 5:half + 8, half - 1:half + 2]
    assert (fwd2 == E.VEHICLE).any()


def test_grid_overpaint_priority():
    # a pedestrian on top of a vehicle cell wins the cell
    sc = empty_scenario(vehicles=[dict(position=[6.0, 0.0], radius=1.0)],
                        pedestrians=[dict(position=[6.0, 0.0],
                                          velocity=[0.0, 0.0], radius=0.5)])
    grid = E.MicroDriveEnv(sc).render_grid()
    half = E.GRID_SIZE // 2
    assert grid[half + 5, half] == E.PEDESTRIAN


def test_target_in_ego_frame_hand_case():
    env = E.MicroDriveEnv(empty_scenario(target=[1.0, 5.0]))
    env.ego = E.EgoState(1.0, 1.0, np.pi / 2, 0.0)
    assert np.allclose(env.target_in_ego_frame(), [4.0, 0.0])


def test_pedestrian_timed_window():
    ped = dict(position=[10.0, 8.0], velocity=[0.0, -2.0], start=1.0, stop=3.0)
    env = E.MicroDriveEnv(empty_scenario(pedestrians=[ped]))
    (p0, _), = env.pedestrian_states(t=0)
    (p1, _), = env.pedestrian_states(t=20)    # t = 2 s -> 1 s of walking
    (p2, _), = env.pedestrian_states(t=100)   # frozen after stop
    assert np.allclose(p0, [10, 8])
    assert np.allclose(p1, [10, 6])
    assert np.allclose(p2, [10, 4])


def test_progress_delta():
    a = E.EgoState(0, 0, 0, 0)
    b = E.EgoState(3, 4, 0, 0)
    assert np.isclose(E.progress_delta(a, b, [3, 0]), 3 - 4)


def test_scenario_json_roundtrip(tmp_path):
    for sc in [make_parked(30), make_sign(40)]:
        p = tmp_path / "s.json"
        sc.save(p)
        back = E.Scenario.load(p)
        assert back == sc


def test_episode_log_roundtrip(tmp_path):
    records = [{"step": i, "x": float(i) * 0.5} for i in range(5)]
    p = tmp_path / "ep.jsonl"
    E.write_episode_log(p, records)
    assert E.read_episode_log(p) == records


def test_suite_composition():
    suite = make_suite()
    assert len(suite) == 20
    assert len({s.name for s in suite}) == 20
    fams = [s.name.rsplit("-", 1)[0] for s in suite]
    assert fams.count("parked") == 6 and fams.count("pedestrian") == 4
