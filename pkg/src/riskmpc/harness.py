"""Experiment orchestration: training pipeline, policies, and metrics.

Policies
  rawmpc              proposer candidates + world-model cost selection
  rawmpc-sampled      random candidates + world-model cost selection
  rawmpc-no-selection execute one proposer sample directly
  greedy-progress     rawmpc-sampled with all event weights zeroed
  random              uniform random controls
  oracle-mpc          ground-truth simulator search over an enumerated grid

The aggregate driving score DS* is a desk-scale analog: route-completion
fraction times per-violation penalty factors, scaled to [0, 100].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import env as E
from . import scenarios
from .control import CostConfig
from .cvae import (ActionProposer, DistillationLoop, condition_from_planner)
from .interaction import (InteractionLoop, ModeSchedule, ReplayBuffer,
                          frame_from_env, refine, refine_ego, warmup)
from .planner import (ModelPlanner, OraclePlanner, enumerated_candidates,
                      random_candidates)
from .tensor import Adam, lr_schedule
from .worldmodel import WorldModel, WorldModelConfig

PENALTIES = {"pedestrian": 0.5, "vehicle": 0.6, "static": 0.65,
             "sign": 0.7, "offlane": 0.8}

POLICIES = ("rawmpc", "rawmpc-sampled", "rawmpc-no-selection",
            "greedy-progress", "random", "oracle-mpc")


@dataclass
class EpisodeResult:
    scenario: str
    seed: int
    success: bool
    done_reason: str
    steps: int
    collisions: dict            # per-type onset counts
    sign_events: int            # distinct violation runs
    offlane_events: int         # distinct off-lane runs
    completion: float           # fraction of initial target distance covered

    @property
    def driving_score(self):
        p = (PENALTIES["pedestrian"] ** self.collisions["pedestrian"]
             * PENALTIES["vehicle"] ** self.collisions["vehicle"]
             * PENALTIES["static"] ** self.collisions["static"]
             * PENALTIES["sign"] ** self.sign_events
             * PENALTIES["offlane"] ** self.offlane_events)
        return 100.0 * self.completion * p


@dataclass
class SuiteResult:
    policy: str
    episodes: list              # list of EpisodeResult

    @property
    def success_rate(self):
        if not self.episodes:
            return 0.0
        return 100.0 * sum(e.success for e in self.episodes) / len(self.episodes)

    @property
    def driving_score(self):
        if not self.episodes:
            return 0.0
        return float(np.mean([e.driving_score for e in self.episodes]))

    def to_json(self):
        rows = [dict(asdict(e), driving_score=repr(e.driving_score))
                for e in sorted(self.episodes, key=lambda e: (e.scenario, e.seed))]
        return json.dumps({"policy": self.policy,
                           "success_rate": repr(self.success_rate),
                           "driving_score": repr(self.driving_score),
                           "episodes": rows}, sort_keys=True, indent=1)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")


def _count_runs(flags):
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0
    return int(flags[0]) + int((flags[1:] & ~flags[:-1]).sum())


def run_episode(policy, scenario, seed, model=None, proposer=None,
                cost_cfg=None, n_proposals=10, n_sampled=50,
                replan_interval=None):
    """Roll one policy on one scenario; returns an EpisodeResult."""
    rng = np.random.default_rng(seed)
    env = E.MicroDriveEnv(scenario)
    cfg = cost_cfg or CostConfig()
    if policy == "greedy-progress":
        cfg = CostConfig(horizon=cfg.horizon, lambda_collision=0.0,
                         lambda_sign=0.0, lambda_offlane=0.0)
    horizon = cfg.horizon
    # receding-horizon execution: commit only half the plan by default so
    # hazards entering the lookahead leave braking distance to react
    interval = replan_interval or max(1, horizon // 2)
    target = np.array(scenario.target)
    initial_dist = float(np.linalg.norm(target - env.ego.position))

    planner = None
    if policy in ("rawmpc", "rawmpc-sampled", "rawmpc-no-selection",
                  "greedy-progress"):
        planner = ModelPlanner(model, cfg)
        grid, ego = env.observe()
        planner.observe(grid, ego.speed, env.target_in_ego_frame())
    oracle = OraclePlanner(env, cfg) if policy == "oracle-mpc" else None

    sign_flags, offlane_flags = [], []
    queue = []          # actions pending execution

    def next_actions():
        cur = float(np.linalg.norm(target - env.ego.position))
        if policy == "random":
            return [E.random_action(rng).as_array()]
        if policy == "oracle-mpc":
            cands = enumerated_candidates(horizon)
            idx, _ = oracle.plan(cands)
            return list(cands[idx][:interval])
        if policy == "rawmpc-no-selection":
            cond = condition_from_planner(planner)
            return list(proposer.propose(cond, 1, rng)[0][:interval])
        if policy == "rawmpc":
            cond = condition_from_planner(planner)
            cands = proposer.propose(cond, n_proposals, rng)
        else:  # rawmpc-sampled / greedy-progress
            cands = random_candidates(rng, n_sampled, horizon)
        idx, _ = planner.plan(cands, cur)
        return list(cands[idx][:interval])

    while not env.done:
        if not queue:
            queue = next_actions()
        action = queue.pop(0)
        _, _, events, done, _ = env.step(E.ActionStep.from_array(action))
        sign_flags.append(events[3])
        offlane_flags.append(events[4])
        if planner is not None and not done:
            grid, ego = env.observe()
            planner.observe(grid, ego.speed, env.target_in_ego_frame())

    final_dist = float(np.linalg.norm(target - env.ego.position))
    completion = 1.0 if env.done_reason == "success" else \
        float(np.clip(1.0 - final_dist / initial_dist, 0.0, 1.0))
    return EpisodeResult(
        scenario=scenario.name, seed=seed,
        success=env.done_reason == "success",
        done_reason=env.done_reason, steps=env.t,
        collisions={"pedestrian": int(env.collision_counts[0]),
                    "vehicle": int(env.collision_counts[1]),
                    "static": int(env.collision_counts[2])},
        sign_events=_count_runs(sign_flags),
        offlane_events=_count_runs(offlane_flags),
        completion=completion)


def evaluate(policy, suite, seeds, model=None, proposer=None, cost_cfg=None,
             **kwargs):
    episodes = [run_episode(policy, sc, seed, model=model, proposer=proposer,
                            cost_cfg=cost_cfg, **kwargs)
                for sc in suite for seed in seeds]
    return SuiteResult(policy=policy, episodes=episodes)


# -- training pipeline ---------------------------------------------------


@dataclass
class RunManifest:
    master_seed: int = 0
    strategy: str = "risk"              # risk | eps-greedy | random
    warmup_fraction: float = 0.1        # share of the frame budget
    total_segments: int = 400           # frame budget = total_segments * H
    warmup_steps: int = 150             # warm-up gradient steps
    refine_steps_per_segment: int = 2
    final_refine_steps: int = 300       # consolidation pass on the full buffer
    ego_refine_steps: int = 3000        # ego-decoder-only polish, frozen latents
    batch_size: int = 16
    buffer_capacity: int = 10_000
    distill_steps: int = 300
    model: WorldModelConfig = field(default_factory=WorldModelConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    schedule: ModeSchedule = field(default_factory=ModeSchedule)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @staticmethod
    def from_json(text):
        raw = json.loads(text)
        raw["model"] = WorldModelConfig(**raw.get("model", {}))
        raw["cost"] = CostConfig(**raw.get("cost", {}))
        raw["schedule"] = ModeSchedule(**raw.get("schedule", {}))
        return RunManifest(**raw)

    @staticmethod
    def load(path):
        with open(path) as f:
            return RunManifest.from_json(f.read())

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")


def collect_warmup_episodes(manifest: RunManifest, rng, frame_budget):
    """Violation-free logged episodes driven by the ground-truth planner."""
    episodes = []
    frames_collected = 0
    cfg = manifest.cost
    while frames_collected < frame_budget:
        scenario = scenarios.sample_training_scenario(rng)
        env = E.MicroDriveEnv(scenario)
        oracle = OraclePlanner(env, cfg)
        frames = []
        pending = np.zeros(E.NUM_EVENTS)
        episode_id = len(episodes)
        violated = False
        while not env.done:
            cands = enumerated_candidates(cfg.horizon)
            idx, _ = oracle.plan(cands)
            for action in cands[idx]:
                grid, ego = env.observe()
                frames.append(frame_from_env(env, grid, ego, pending,
                                             episode_id, env.t, action=action))
                _, _, events, done, _ = env.step(E.ActionStep.from_array(action))
                pending = events
                if events.any():
                    violated = True
                if done:
                    grid, ego = env.observe()
                    frames.append(frame_from_env(env, grid, ego, events,
                                                 episode_id, env.t,
                                                 terminal=True))
                    break
            if violated:
                break
        if violated or env.done_reason != "success":
            continue
        episodes.append(frames)
        frames_collected += len(frames)
    return episodes


@dataclass
class TrainingArtifacts:
    model: WorldModel
    buffer: ReplayBuffer
    warmup_history: list
    segment_records: list
    refine_history: list


def train_world_model(manifest: RunManifest, rng=None, progress=None):
    """Full two-stage training per the manifest.  Deterministic in the
    master seed."""
    rng = rng or np.random.default_rng(manifest.master_seed)
    model = WorldModel(manifest.model, rng)
    optimizer = Adam(model.param_list())
    horizon = manifest.cost.horizon
    frame_budget = manifest.total_segments * horizon
    warm_frames = int(manifest.warmup_fraction * frame_budget)

    warm_hist = []
    if warm_frames > 0:
        episodes = collect_warmup_episodes(manifest, rng, warm_frames)
        warm_hist = warmup(model, episodes, optimizer, rng,
                           steps=manifest.warmup_steps,
                           batch_size=manifest.batch_size,
                           lr=lr_schedule(0.0))

    interact_segments = manifest.total_segments - warm_frames // horizon
    buffer = ReplayBuffer(capacity=manifest.buffer_capacity)
    loop = InteractionLoop(model, manifest.cost, manifest.schedule, buffer,
                           rng, scenarios.sample_training_scenario,
                           strategy=manifest.strategy)
    records, refine_hist = [], []
    for seg in range(interact_segments):
        rec = loop.run_segment(seg, interact_segments)
        records.append(rec)
        frac = seg / max(interact_segments - 1, 1)
        hist = refine(model, buffer, optimizer, rng,
                      steps=manifest.refine_steps_per_segment,
                      batch_size=manifest.batch_size,
                      lr=lr_schedule(frac))
        refine_hist.extend(hist)
        if progress is not None:
            progress(seg, rec, hist)
    # consolidation: the per-segment refinements mostly see small early
    # buffers; a final pass over the complete replay data is where the
    # multi-step action conditioning is actually learned
    if manifest.final_refine_steps > 0 and len(buffer):
        refine_hist.extend(refine(model, buffer, optimizer, rng,
                                  steps=manifest.final_refine_steps,
                                  batch_size=manifest.batch_size,
                                  lr=lr_schedule(0.5)))
    # ego polish: latents frozen, only the residual ego decoder trains.
    # Planning leans hardest on progress fidelity, and this phase is an
    # order of magnitude cheaper than full refinement steps.
    if manifest.ego_refine_steps > 0 and len(buffer):
        ego_opt = Adam(model.ego_dec.param_list())
        head = (2 * manifest.ego_refine_steps) // 3
        refine_ego(model, buffer, ego_opt, rng, steps=head, lr=1e-3)
        refine_ego(model, buffer, ego_opt, rng,
                   steps=manifest.ego_refine_steps - head, lr=3e-4)
    return TrainingArtifacts(model=model, buffer=buffer,
                             warmup_history=warm_hist,
                             segment_records=records,
                             refine_history=refine_hist)


def distill_proposer(manifest: RunManifest, model: WorldModel, rng=None,
                     use_negatives=True):
    rng = rng or np.random.default_rng(manifest.master_seed + 1)
    cond_dim = 2 * manifest.model.d
    proposer = ActionProposer(rng, manifest.cost.horizon, cond_dim)
    loop = DistillationLoop(model, proposer, manifest.cost, rng,
                            scenarios.sample_training_scenario,
                            n_samples=manifest.schedule.n_samples,
                            top_k=manifest.schedule.top_k,
                            use_negatives=use_negatives)
    for step in range(manifest.distill_steps):
        loop.run_step(step / max(manifest.distill_steps - 1, 1))
    return proposer, loop.loss_history


def write_progress_csv(path, records):
    import csv
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["segment", "mode", "chosen_cost", "steps_executed",
                     "episode_done", "done_reason"])
        for r in records:
            wr.writerow([r.segment, r.mode, repr(r.chosen_cost),
                         r.steps_executed, r.episode_done, r.done_reason or ""])
