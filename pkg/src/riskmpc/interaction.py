"""Two-stage risk-aware training: offline warm-up, then online interaction.

Online interaction samples horizon-length candidate action sequences,
scores them with the current world model, and executes one chosen by a
three-mode (rand / bad / good) soft sampling rule.  Executed frames with
simulator ground truth land in a FIFO replay buffer that feeds world-model
refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env as E
from .control import CostConfig
from .planner import ModelPlanner, is_degenerate, random_candidates
from .tensor import Adam, Tensor, lr_schedule
from .worldmodel import (POS_SCALE, SPEED_SCALE, WorldModel, compute_losses,
                         ego_features, normalize_ego)


@dataclass
class ModeSchedule:
    eps1_start: float = 1.0
    eps1_end: float = 0.0
    eps2_start: float = 0.0
    eps2_end: float = 0.3
    tau_good: float = 0.5
    tau_bad: float = 1.0
    n_samples: int = 50
    top_k: int = 5

    def __post_init__(self):
        if self.top_k > self.n_samples // 2:
            raise ValueError("need top_k <= n_samples / 2")
        if min(self.tau_good, self.tau_bad) <= 0:
            raise ValueError("temperatures must be positive")

    def eps(self, fraction):
        """(eps1, eps2) at a training-progress fraction in [0, 1]."""
        f = min(max(fraction, 0.0), 1.0)
        return (self.eps1_start + (self.eps1_end - self.eps1_start) * f,
                self.eps2_start + (self.eps2_end - self.eps2_start) * f)


def sample_mode(eps1, eps2, rng):
    """rand w.p. eps1; bad w.p. (1-eps1)*eps2; good otherwise."""
    u = rng.random()
    if u < eps1:
        return "rand"
    if u < eps1 + (1 - eps1) * eps2:
        return "bad"
    return "good"


@dataclass
class CandidateSets:
    good: list          # bottom-K indices by cost
    bad: list           # top-K indices by cost
    bad_filtered: list  # bad minus degenerate sequences


def build_candidate_sets(costs, candidates, top_k):
    """Rank by cost (ties by index); filter degenerate rollouts from bad."""
    costs = np.asarray(costs, dtype=float)
    n = len(costs)
    if n < 2 * top_k:
        raise ValueError(f"need at least {2 * top_k} candidates, got {n}")
    order = sorted(range(n), key=lambda i: (costs[i], i))
    good = order[:top_k]
    bad = order[-top_k:]
    bad_filtered = [i for i in bad if not is_degenerate(candidates[i])]
    return CandidateSets(good=good, bad=bad, bad_filtered=bad_filtered)


def soft_select(sets: CandidateSets, costs, mode, schedule: ModeSchedule, rng):
    """Boltzmann pick within the mode's candidate set.

    Falls back to rand when the filtered bad set is empty.
    """
    costs = np.asarray(costs, dtype=float)
    if mode == "bad" and not sets.bad_filtered:
        mode = "rand"
    if mode == "rand":
        return int(rng.integers(len(costs))), mode
    if mode == "good":
        idx, logits = sets.good, -costs[sets.good] / schedule.tau_good
    else:
        idx, logits = sets.bad_filtered, costs[sets.bad_filtered] / schedule.tau_bad
    logits = logits - logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return int(np.asarray(idx)[rng.choice(len(idx), p=p)]), mode


# -- replay buffer ------------------------------------------------------


@dataclass
class Frame:
    grid: np.ndarray        # (G, G) int8
    ego_feats: np.ndarray   # (3,) encoder input
    ego_target: np.ndarray  # (3,) metric (tx, ty, speed) supervision
    action: np.ndarray      # (3,) action taken from this frame
    events: np.ndarray      # (num_events,) events on arrival at this frame
    episode: int
    step: int
    terminal: bool = False


class ReplayBuffer:
    """FIFO frame store with contiguous-window sampling."""

    def __init__(self, capacity=10_000):
        self.capacity = capacity
        self.frames = []

    def __len__(self):
        return len(self.frames)

    def append(self, frame: Frame):
        self.frames.append(frame)
        if len(self.frames) > self.capacity:
            del self.frames[: len(self.frames) - self.capacity]

    def sample_window(self, length, rng, max_tries=200):
        """A run of `length` frames: same episode, consecutive steps,
        terminal allowed only in last position.  None if unavailable."""
        n = len(self.frames)
        if n < length:
            return None
        for _ in range(max_tries):
            start = int(rng.integers(n - length + 1))
            win = self.frames[start:start + length]
            ok = all(w.episode == win[0].episode
                     and w.step == win[0].step + i for i, w in enumerate(win))
            if ok and not any(w.terminal for w in win[:-1]):
                return win
        return None

    def sample_event_window(self, length, supervised_from, rng, max_tries=50):
        """A valid window whose supervised span (positions >= supervised_from)
        contains at least one event frame.  Event frames are rare, so uniform
        window sampling lets the event decoder collapse to all-zeros; this
        targets a window around a randomly chosen event frame instead."""
        n = len(self.frames)
        hits = [i for i, f in enumerate(self.frames) if f.events.any()]
        if not hits or n < length:
            return None
        for _ in range(max_tries):
            j = hits[int(rng.integers(len(hits)))]
            lo = max(j - length + 1, 0)
            hi = min(j - supervised_from, n - length)
            if hi < lo:
                continue
            start = int(rng.integers(lo, hi + 1))
            win = self.frames[start:start + length]
            ok = all(w.episode == win[0].episode
                     and w.step == win[0].step + i for i, w in enumerate(win))
            if ok and not any(w.terminal for w in win[:-1]):
                return win
        return None


# -- supervised loss over a batch of windows ----------------------------


def window_batch_loss(model: WorldModel, windows):
    """Teacher-forced (or free-running) loss bundle over window batch."""
    cfg = model.cfg
    ctx_len = cfg.context
    horizon = len(windows[0]) - ctx_len
    B = len(windows)

    grids = np.stack([[f.grid for f in w] for w in windows])        # (B, L, G, G)
    feats = np.stack([[f.ego_feats for f in w] for w in windows])
    egos = np.stack([[f.ego_target for f in w] for w in windows])
    acts = np.stack([[f.action for f in w] for w in windows])
    evts = np.stack([[f.events for f in w] for w in windows])

    # encode every frame of every window in one batch
    L = ctx_len + horizon
    enc = model.encode(grids.reshape(B * L, *grids.shape[2:]),
                       feats.reshape(B * L, -1))
    enc = [enc[:, :, :].reshape(B, L, *enc.shape[1:])[:, i] for i in range(L)]

    context = [enc[i] for i in range(ctx_len)]
    hist = model.summarize_history(context)

    preds, targets = [], []
    state = context[-1]
    for k in range(horizon):
        src = state if (k == 0 or not cfg.teacher_forcing) \
            else enc[ctx_len + k - 1]
        act = model.embed_actions(acts[:, ctx_len + k - 1])
        state = model.transition(src, act, hist)
        preds.append(state)
        targets.append(enc[ctx_len + k])

    step_grids = [grids[:, ctx_len + k] for k in range(horizon)]
    step_egos = [egos[:, ctx_len + k] for k in range(horizon)]
    step_evts = [evts[:, ctx_len + k] for k in range(horizon)]
    step_acts = [acts[:, ctx_len + k - 1] for k in range(horizon)]
    ego_prev = egos[:, ctx_len - 1]
    return compute_losses(model, preds, targets, step_grids, step_egos,
                          step_evts, ego_prev, step_acts)


def refine(model: WorldModel, buffer: ReplayBuffer, optimizer: Adam, rng,
           steps=1, batch_size=16, lr=1e-4, event_override=None):
    """Gradient steps on windows sampled from the buffer.

    event_override: optional constant event target (used by warm-up with
    all-zero targets).  Returns the mean LossBundle totals per step.
    """
    if len(buffer) == 0:
        raise ValueError("refine needs a non-empty replay buffer")
    cfg = model.cfg
    length = cfg.context + cfg.horizon
    history = []
    # aim for ~1/4 event-containing windows per batch so the (rare) event
    # positives keep a foothold in the BCE gradient
    event_quota = max(batch_size // 4, 1) if event_override is None else 0
    for _ in range(steps):
        windows = []
        while len(windows) < batch_size:
            w = None
            if len(windows) < event_quota:
                w = buffer.sample_event_window(length, cfg.context, rng)
            if w is None:
                w = buffer.sample_window(length, rng)
            if w is None:
                if not windows:
                    return history
                break
            if event_override is not None:
                w = [Frame(f.grid, f.ego_feats, f.ego_target, f.action,
                           np.full_like(f.events, event_override),
                           f.episode, f.step, f.terminal) for f in w]
            windows.append(w)
        total, bundle = window_batch_loss(model, windows)
        total.backward()
        optimizer.step(lr)
        history.append(bundle)
    return history


def refine_ego(model: WorldModel, buffer: ReplayBuffer, optimizer: Adam, rng,
               steps=1, batch_size=64, lr=1e-3):
    """One-step ego-dynamics fitting.

    Builds every consecutive (frame, next frame) pair in the buffer and
    trains the residual kinematic ego decoder (pass an optimizer over its
    parameters) on cheap batches of them.  One-step pairs give a far
    cleaner dynamics signal than chained multi-step windows, and the tiny
    decoder makes each step sub-millisecond.  Returns per-step losses.
    """
    frames = buffer.frames
    pairs = [i for i in range(len(frames) - 1)
             if frames[i].episode == frames[i + 1].episode
             and frames[i + 1].step == frames[i].step + 1
             and not frames[i].terminal]
    if not pairs or steps <= 0:
        return []
    prev_egos = np.stack([frames[i].ego_target for i in pairs])
    acts = np.stack([frames[i].action for i in pairs])
    next_egos = normalize_ego(np.stack([frames[i + 1].ego_target
                                        for i in pairs]))
    scale = Tensor(np.array([1 / POS_SCALE, 1 / POS_SCALE, 1 / SPEED_SCALE]))
    history = []
    for _ in range(steps):
        b = rng.integers(len(pairs), size=min(batch_size, len(pairs)))
        pred = model.decode_ego(prev_egos[b], acts[b])
        diff = pred * scale - Tensor(next_egos[b])
        loss = (diff * diff).sum() * (1.0 / len(b))
        loss.backward()
        optimizer.step(lr)
        history.append(float(loss.data))
    return history


# -- episode logging into the buffer ------------------------------------


def frame_from_env(env: E.MicroDriveEnv, grid, ego, events, episode, step,
                   terminal=False, action=None):
    rel = env.target_in_ego_frame()
    return Frame(grid=np.asarray(grid, dtype=np.int8),
                 ego_feats=ego_features(ego.speed, rel),
                 ego_target=np.array([rel[0], rel[1], ego.speed]),
                 action=np.zeros(3) if action is None else np.asarray(action),
                 events=np.asarray(events, dtype=float),
                 episode=episode, step=step, terminal=terminal)


class ViolationInWarmupLog(ValueError):
    pass


def warmup(model: WorldModel, episodes, optimizer, rng, steps=200,
           batch_size=16, lr=1e-4):
    """Supervised pretraining on violation-free logged episodes.

    episodes: list of frame lists.  Episodes containing any violation are
    rejected; the event decoder is trained against all-zero targets.
    Returns the refine loss history.  With no episodes, warm-up is skipped.
    """
    if not episodes:
        return []
    buf = ReplayBuffer(capacity=10_000_000)
    for frames in episodes:
        if any(f.events.any() for f in frames):
            raise ViolationInWarmupLog(
                "logged warm-up episode contains a traffic violation")
        for f in frames:
            buf.append(f)
    return refine(model, buf, optimizer, rng, steps=steps,
                  batch_size=batch_size, lr=lr, event_override=0.0)


# -- online interaction --------------------------------------------------


@dataclass
class SegmentRecord:
    segment: int
    mode: str
    chosen_cost: float
    steps_executed: int
    episode_done: bool
    done_reason: str | None


class InteractionLoop:
    """Segment-wise risk-aware data collection feeding one replay buffer."""

    def __init__(self, model: WorldModel, cost_cfg: CostConfig,
                 schedule: ModeSchedule, buffer: ReplayBuffer, rng,
                 scenario_sampler, strategy="risk"):
        if strategy not in ("risk", "eps-greedy", "random"):
            raise ValueError(f"unknown strategy {strategy!r}")
        self.model = model
        self.cost_cfg = cost_cfg
        self.schedule = schedule
        self.buffer = buffer
        self.rng = rng
        self.scenario_sampler = scenario_sampler
        self.strategy = strategy
        self.planner = ModelPlanner(model, cost_cfg)
        self.env = None
        self.episode_id = -1
        self._pending_events = np.zeros(E.NUM_EVENTS)

    def _new_episode(self):
        self.episode_id += 1
        scenario = self.scenario_sampler(self.rng)
        self.env = E.MicroDriveEnv(scenario)
        self.planner.reset()
        self._pending_events = np.zeros(E.NUM_EVENTS)
        grid, ego = self.env.observe()
        rel = self.env.target_in_ego_frame()
        self.planner.observe(grid, ego.speed, rel)

    def _pick_mode(self, fraction):
        eps1, eps2 = self.schedule.eps(fraction)
        if self.strategy == "random":
            return "rand"
        if self.strategy == "eps-greedy":
            return "rand" if self.rng.random() < eps1 else "good"
        return sample_mode(eps1, eps2, self.rng)

    def run_segment(self, segment_index, total_segments):
        """Collect one horizon-length segment; returns a SegmentRecord."""
        if self.env is None or self.env.done:
            self._new_episode()
        env, sched = self.env, self.schedule
        horizon = self.cost_cfg.horizon
        cands = random_candidates(self.rng, sched.n_samples, horizon)
        target = np.array(env.scenario.target)
        cur_dist = float(np.linalg.norm(target - env.ego.position))
        scores = self.planner.score_candidates(cands, cur_dist)
        costs = [s.total for s in scores]
        sets = build_candidate_sets(costs, cands, sched.top_k)
        mode = self._pick_mode(segment_index / max(total_segments - 1, 1))
        chosen, mode = soft_select(sets, costs, mode, sched, self.rng)

        executed = 0
        for k in range(horizon):
            grid, ego = env.observe()
            action = cands[chosen, k]
            self.buffer.append(frame_from_env(
                env, grid, ego, self._pending_events, self.episode_id,
                env.t, action=action))
            ngrid, nego, events, done, reason = env.step(
                E.ActionStep.from_array(action))
            self._pending_events = events
            executed += 1
            rel = env.target_in_ego_frame()
            self.planner.observe(ngrid, nego.speed, rel)
            if done:
                self.buffer.append(frame_from_env(
                    env, ngrid, nego, events, self.episode_id, env.t,
                    terminal=True))
                break
        return SegmentRecord(segment=segment_index, mode=mode,
                             chosen_cost=float(costs[chosen]),
                             steps_executed=executed,
                             episode_done=env.done,
                             done_reason=env.done_reason if env.done else None)
