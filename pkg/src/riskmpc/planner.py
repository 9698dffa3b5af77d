"""Candidate generation and rollout scoring.

Two scoring backends share the same cost: the learned world model
(ModelPlanner) and the ground-truth simulator via snapshot/restore
(OraclePlanner).  Both return CandidateScore lists that feed select().
"""

from __future__ import annotations

from collections import deque

import numpy as np

from . import env as E
from .control import CostConfig, score_candidate, select
from .tensor import no_grad
from .worldmodel import WorldModel, ego_features


def random_candidates(rng, n, horizon):
    """Random two-phase plans: one (steer, longitudinal) intent per half.

    Piecewise-constant controls read as coherent manoeuvres — per-step
    independent draws produce twitchy steering no planner can commit to
    and pedal noise that averages out to no motion at all.  The steering
    jump between phases is capped at 1.0 so no candidate trips the
    degenerate-plan filter, and the longitudinal scalar u in [-1, 1] maps
    exclusively to throttle (u > 0) or brake (u < 0).
    """
    acts = np.zeros((n, horizon, 3))
    half = max(horizon // 2, 1)
    # centre-heavy steering: most plans roughly track the lane, the tails
    # still cover hard swerves
    s1 = np.clip(rng.normal(0.0, 0.35, size=(n, 1)), -1, 1)
    jump = np.clip(rng.normal(0.0, 0.35, size=(n, 1)), -1, 1)
    s2 = np.clip(s1 + jump, -1, 1)
    u = rng.uniform(-1, 1, size=(n, 2))
    steer = np.concatenate([np.repeat(s1, half, axis=1),
                            np.repeat(s2, horizon - half, axis=1)], axis=1)
    lon = np.concatenate([np.repeat(u[:, :1], half, axis=1),
                          np.repeat(u[:, 1:], horizon - half, axis=1)], axis=1)
    acts[:, :, 0] = steer
    acts[:, :, 1] = np.maximum(lon, 0.0)
    acts[:, :, 2] = np.maximum(-lon, 0.0)
    return acts


def enumerated_candidates(horizon, steers=(-1.0, -0.5, 0.0, 0.5, 1.0),
                          longitudinal=((1.0, 0.0), (0.5, 0.0), (0.2, 0.0),
                                        (0.0, 0.0), (0.0, 1.0)),
                          two_phase=True):
    """Deterministic grid of <=125 candidate sequences."""
    out = []
    half = horizon // 2 if two_phase and horizon > 1 else horizon
    steer_pairs = ([(a, b) for a in steers for b in steers]
                   if two_phase and horizon > 1 else [(a, a) for a in steers])
    for s1, s2 in steer_pairs:
        for thr, brk in longitudinal:
            seq = np.zeros((horizon, 3))
            seq[:half, 0] = s1
            seq[half:, 0] = s2
            seq[:, 1] = thr
            seq[:, 2] = brk
            out.append(seq)
    return np.array(out)


def is_degenerate(actions, steer_jump=1.0):
    """Unrealistic control: big steering jumps or throttle+brake together."""
    a = np.asarray(actions)
    if a.shape[0] > 1 and np.any(np.abs(np.diff(a[:, 0])) > steer_jump):
        return True
    return bool(np.any((a[:, 1] > 0.5) & (a[:, 2] > 0.5)))


class ModelPlanner:
    """Scores candidates with the learned world model.

    Keeps a rolling context of encoded observations; call observe() after
    every executed environment step.
    """

    def __init__(self, model: WorldModel, cost_cfg: CostConfig):
        self.model = model
        self.cost_cfg = cost_cfg
        self.context = deque(maxlen=model.cfg.context)
        self.last_ego = None

    def reset(self):
        self.context.clear()
        self.last_ego = None

    def observe(self, grid, ego_speed, target_rel):
        feats = ego_features(ego_speed, target_rel)[None]
        self.last_ego = np.array([target_rel[0], target_rel[1], ego_speed])
        with no_grad():
            self.context.append(self.model.encode(np.asarray(grid)[None], feats))

    def score_candidates(self, candidates, current_target_dist):
        """candidates: (N, H, 3).  Returns a list of CandidateScore."""
        if not self.context:
            raise RuntimeError("planner has no observed context yet")
        cands = np.asarray(candidates)
        n, horizon, _ = cands.shape
        dists = np.empty((n, horizon))
        events = np.empty((n, horizon, self.model.cfg.num_events))
        with no_grad():
            ctx = [t.broadcast_to((n,) + t.shape[1:]) for t in self.context]
            states = self.model.rollout(ctx, cands)
            ego_est = np.repeat(self.last_ego[None], n, axis=0)
            for k, s in enumerate(states):
                ego_est = self.model.decode_ego(ego_est, cands[:, k, :]).data
                dists[:, k] = np.linalg.norm(ego_est[:, :2], axis=1)
                _, z_c = self.model.decode_seg(s)
                events[:, k, :] = self.model.decode_events(s, z_c).data
        cfg = self.cost_cfg
        return [score_candidate(i, dists[i], events[i], current_target_dist, cfg)
                for i in range(n)]

    def plan(self, candidates, current_target_dist):
        scores = self.score_candidates(candidates, current_target_dist)
        idx = select(scores)
        return idx, scores


class OraclePlanner:
    """Scores candidates by exhaustively simulating them (ground truth)."""

    def __init__(self, env: E.MicroDriveEnv, cost_cfg: CostConfig):
        self.env = env
        self.cost_cfg = cost_cfg

    def score_candidates(self, candidates):
        env = self.env
        cfg = self.cost_cfg
        target = np.array(env.scenario.target)
        current = float(np.linalg.norm(target - env.ego.position))
        snap = env.clone_state()
        scores = []
        for i, seq in enumerate(np.asarray(candidates)):
            env.restore_state(snap)
            dists = np.empty(cfg.horizon)
            events = np.zeros((cfg.horizon, E.NUM_EVENTS))
            last_dist = current
            for k in range(cfg.horizon):
                if env.done:
                    dists[k] = last_dist
                    continue
                ev, _, _ = env.advance(E.ActionStep.from_array(seq[k]))
                last_dist = float(np.linalg.norm(target - env.ego.position))
                dists[k] = last_dist
                events[k] = ev
            scores.append(score_candidate(i, dists, events, current, cfg))
        env.restore_state(snap)
        return scores

    def plan(self, candidates):
        scores = self.score_candidates(candidates)
        return select(scores), scores
