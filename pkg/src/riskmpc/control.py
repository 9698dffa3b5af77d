"""Risk-aware cost over decoded rollouts and candidate selection.

The cost per candidate is a discounted sum over the horizon of negative
progress toward the target plus severity-weighted event probabilities.
Progress at step k is the reduction in predicted target distance, with
step 0 anchored at the true current target distance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

ETA_FLOOR = 1.0 / 8.0


@dataclass
class CostConfig:
    horizon: int = 10
    # severity weights per event channel:
    # (pedestrian, vehicle, static) collisions, sign violation, off-lane
    lambda_collision: float = 30.0
    lambda_sign: float = 15.0
    lambda_offlane: float = 10.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        # zero weights are allowed only for the risk-blind ablation policy
        if min(self.lambda_collision, self.lambda_sign, self.lambda_offlane) < 0:
            raise ValueError("severity weights must be non-negative")

    @property
    def event_weights(self):
        lc = self.lambda_collision
        return np.array([lc, lc, lc, self.lambda_sign, self.lambda_offlane])


def eta(k):
    """Discount for prediction step k >= 1: max(2^(1-k), 1/8)."""
    if k < 1:
        raise ValueError(f"step index must be >= 1, got {k}")
    return max(2.0 ** (1 - k), ETA_FLOOR)


@dataclass
class CandidateScore:
    index: int
    progress: np.ndarray        # (H,) predicted progress per step
    event_risk: np.ndarray      # (H,) weighted event risk per step
    total: float

    def recompute(self):
        etas = np.array([eta(k) for k in range(1, len(self.progress) + 1)])
        return float((etas * (-self.progress + self.event_risk)).sum())


def score_candidate(index, target_dists, event_probs, current_target_dist,
                    cfg: CostConfig):
    """Cost of one rollout.

    target_dists: (H,) predicted distance-to-target at steps t+1..t+H.
    event_probs: (H, num_events) probabilities (or {0,1} flags).
    current_target_dist: true distance at time t (the k=1 anchor).
    """
    target_dists = np.asarray(target_dists, dtype=float)
    event_probs = np.asarray(event_probs, dtype=float)
    H = cfg.horizon
    if len(target_dists) != H or len(event_probs) != H:
        raise ValueError(
            f"rollout length {len(target_dists)} != horizon {H}")
    prev = np.concatenate([[current_target_dist], target_dists[:-1]])
    progress = prev - target_dists
    risk = event_probs @ cfg.event_weights
    etas = np.array([eta(k) for k in range(1, H + 1)])
    total = float((etas * (-progress + risk)).sum())
    return CandidateScore(index, progress, risk, total)


def select(scores):
    """Argmin by total cost; ties broken by lowest candidate index."""
    if not scores:
        raise ValueError("no candidates to select from")
    best = min(scores, key=lambda s: (s.total, s.index))
    return best.index


def export_scores_csv(path, scores):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["index", "total_cost"]
                    + [f"progress_{k}" for k in range(1, len(scores[0].progress) + 1)]
                    + [f"risk_{k}" for k in range(1, len(scores[0].event_risk) + 1)])
        for s in sorted(scores, key=lambda s: s.index):
            wr.writerow([s.index, repr(float(s.total))]
                        + [repr(float(x)) for x in s.progress]
                        + [repr(float(x)) for x in s.event_risk])
