"""Generative action proposer distilled from the world-model evaluator.

A conditional VAE is trained on pseudo-labels: from each visited state we
sample candidate action sequences, score them with the frozen world model,
reconstruct only the lowest-cost sequence, and contrast its posterior
against the highest-cost posteriors with an InfoNCE over the closed-form
Wasserstein-2 distance between diagonal Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import CostConfig
from .nn import MLP, Module
from .planner import ModelPlanner, random_candidates
from .tensor import Adam, Tensor, concat, no_grad
from .worldmodel import WorldModel

LATENT_DIM = 32
HIDDEN = 64
INFONCE_TAU = 0.3
CONTRASTIVE_WEIGHT = 0.1
BETA_END = 0.1
LOGSTD_MIN, LOGSTD_MAX = -6.0, 3.0


@dataclass
class DiagGaussian:
    """Mean/std pair; std kept strictly positive via exp(log-std)."""
    mean: Tensor
    log_std: Tensor

    @property
    def std(self):
        return self.log_std.exp()

    @property
    def dim(self):
        return self.mean.shape[-1]

    def sample(self, rng):
        noise = rng.standard_normal(self.mean.shape)
        return self.mean + self.std * Tensor(noise)

    def detached(self):
        return DiagGaussian(self.mean.detach(), self.log_std.detach())


def w2(a: DiagGaussian, b: DiagGaussian, squared=False):
    """Gelbrich closed form for diagonal Gaussians.

    sqrt(||mu_a - mu_b||^2 + ||sigma_a - sigma_b||^2), or its square.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    dm = a.mean - b.mean
    ds = a.std - b.std
    sq = (dm * dm).sum() + (ds * ds).sum()
    return sq if squared else (sq + 1e-12).sqrt()


def kl_divergence(q: DiagGaussian, p: DiagGaussian):
    """KL(q || p) for diagonal Gaussians."""
    var_q = (q.log_std * 2.0).exp()
    var_p = (p.log_std * 2.0).exp()
    dm = q.mean - p.mean
    term = (var_q + dm * dm) / var_p
    return (p.log_std - q.log_std + term * 0.5 - 0.5).sum()


def infonce(q_pos: DiagGaussian, prior: DiagGaussian, negatives,
            tau=INFONCE_TAU, squared=False):
    """Anchor is the positive posterior: pull the prior in, push negatives.

    -log exp(l+) / (exp(l+) + sum_j exp(l-_j)) with
    l+ = -D(q+, p)/tau and l-_j = -D(q+, q-_j)/tau.
    """
    l_pos = -w2(q_pos, prior, squared=squared) * (1.0 / tau)
    if not negatives:
        return l_pos * 0.0
    logits = [l_pos] + [-w2(q_pos, nq, squared=squared) * (1.0 / tau)
                        for nq in negatives]
    stackv = concat([l.reshape(1) for l in logits], axis=0)
    m = float(stackv.data.max())
    lse = (stackv - m).exp().sum().log() + m
    return (lse - l_pos).reshape(())


@dataclass
class PseudoLabelBatch:
    condition: np.ndarray      # (cond_dim,)
    positive: np.ndarray       # (H, 3)
    negatives: np.ndarray      # (K, H, 3)
    positive_cost: float
    negative_costs: np.ndarray


class ActionProposer(Module):
    """cVAE over horizon-length action sequences."""

    def __init__(self, rng, horizon, cond_dim, latent=LATENT_DIM, hidden=HIDDEN):
        self.horizon = horizon
        self.cond_dim = cond_dim
        self.latent = latent
        a_dim = horizon * 3
        self.posterior_net = MLP(rng, [a_dim + cond_dim, hidden, 2 * latent])
        self.prior_net = MLP(rng, [cond_dim, hidden, 2 * latent])
        self.decoder_net = MLP(rng, [latent + cond_dim, hidden, a_dim])

    def _gauss(self, raw):
        mean = raw[:self.latent]
        log_std = raw[self.latent:].clip(LOGSTD_MIN, LOGSTD_MAX)
        return DiagGaussian(mean, log_std)

    def posterior(self, actions, condition):
        x = np.concatenate([np.asarray(actions).reshape(-1),
                            np.asarray(condition)])
        return self._gauss(self.posterior_net(Tensor(x[None]))[0])

    def prior(self, condition):
        return self._gauss(self.prior_net(Tensor(np.asarray(condition)[None]))[0])

    def decode(self, z, condition):
        """Latent + condition -> squashed (H, 3) action sequence."""
        cond = Tensor(np.asarray(condition)[None])
        zz = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
        x = concat([zz.reshape(1, self.latent), cond], axis=1)
        raw = self.decoder_net(x).reshape(self.horizon, 3)
        steer = raw[:, 0:1].tanh()
        pedals = raw[:, 1:3].sigmoid()
        return concat([steer, pedals], axis=1)

    def propose(self, condition, n, rng):
        """Sample n action sequences from the conditional prior + decoder."""
        out = np.empty((n, self.horizon, 3))
        with no_grad():
            prior = self.prior(condition)
            for i in range(n):
                z = prior.sample(rng)
                out[i] = self.decode(z.detach(), condition).data
        return out


def condition_from_planner(planner: ModelPlanner):
    """Frozen state summary: mean visual token + ego token of last state."""
    last = planner.context[-1].data[0]            # (T, d)
    n_vis = planner.model.cfg.num_visual
    return np.concatenate([last[:n_vis].mean(axis=0), last[n_vis]])


def pseudo_label(planner: ModelPlanner, current_target_dist, rng,
                 n_samples=50, top_k=5):
    """Score random candidates; min-cost is positive, top-K are negatives."""
    horizon = planner.cost_cfg.horizon
    cands = random_candidates(rng, n_samples, horizon)
    scores = planner.score_candidates(cands, current_target_dist)
    costs = np.array([s.total for s in scores])
    order = sorted(range(n_samples), key=lambda i: (costs[i], i))
    pos = order[0]
    negs = order[-top_k:]
    return PseudoLabelBatch(condition=condition_from_planner(planner),
                            positive=cands[pos],
                            negatives=cands[negs],
                            positive_cost=float(costs[pos]),
                            negative_costs=costs[negs])


@dataclass
class DistillLossParts:
    recon: float
    kl: float
    contrastive: float
    total: float


def train_step(proposer: ActionProposer, optimizer: Adam,
               batch: PseudoLabelBatch, rng, beta, lam=CONTRASTIVE_WEIGHT,
               tau=INFONCE_TAU, lr=1e-3, use_negatives=True,
               w2_squared=False):
    """One optimization step; negatives enter the contrastive term only."""
    cond = batch.condition
    q_pos = proposer.posterior(batch.positive, cond)
    prior = proposer.prior(cond)
    z = q_pos.sample(rng)
    recon_seq = proposer.decode(z, cond)
    diff = recon_seq - Tensor(batch.positive)
    recon = (diff * diff).sum() * 0.5          # unit-variance Gaussian NLL
    kl = kl_divergence(q_pos, prior)
    if use_negatives and len(batch.negatives):
        neg_qs = [proposer.posterior(a, cond) for a in batch.negatives]
        contrast = infonce(q_pos, prior, neg_qs, tau=tau, squared=w2_squared)
    else:
        contrast = Tensor(0.0)
    total = recon + kl * beta + contrast * lam
    if not np.isfinite(total.data):
        raise FloatingPointError("non-finite distillation loss")
    total.backward()
    optimizer.step(lr)
    return DistillLossParts(recon=float(recon.data), kl=float(kl.data),
                            contrastive=float(contrast.data),
                            total=float(total.data))


def beta_schedule(fraction, beta_end=BETA_END):
    """KL weight annealed linearly from 0 to beta_end."""
    return beta_end * min(max(fraction, 0.0), 1.0)


class DistillationLoop:
    """Drives scenarios with the world model, pseudo-labels states, and
    trains the proposer online."""

    def __init__(self, model: WorldModel, proposer: ActionProposer,
                 cost_cfg: CostConfig, rng, scenario_sampler,
                 n_samples=50, top_k=5, use_negatives=True, lr=1e-3):
        self.planner = ModelPlanner(model, cost_cfg)
        self.proposer = proposer
        self.cost_cfg = cost_cfg
        self.rng = rng
        self.scenario_sampler = scenario_sampler
        self.n_samples = n_samples
        self.top_k = top_k
        self.use_negatives = use_negatives
        self.lr = lr
        self.optimizer = Adam(proposer.param_list())
        self.env = None
        self.loss_history = []

    def _ensure_episode(self):
        import numpy as _np
        from . import env as E
        if self.env is None or self.env.done:
            self.env = E.MicroDriveEnv(self.scenario_sampler(self.rng))
            self.planner.reset()
            grid, ego = self.env.observe()
            self.planner.observe(grid, ego.speed, self.env.target_in_ego_frame())

    def run_step(self, fraction):
        """One segment: pseudo-label, one train step, execute the positive."""
        from . import env as E
        self._ensure_episode()
        env = self.env
        cur = float(np.linalg.norm(np.array(env.scenario.target)
                                   - env.ego.position))
        batch = pseudo_label(self.planner, cur, self.rng,
                             n_samples=self.n_samples, top_k=self.top_k)
        parts = train_step(self.proposer, self.optimizer, batch, self.rng,
                           beta=beta_schedule(fraction), lr=self.lr,
                           use_negatives=self.use_negatives)
        self.loss_history.append(parts)
        for action in batch.positive:
            _, _, _, done, _ = env.step(E.ActionStep.from_array(action))
            if done:
                break
            grid, ego = env.observe()
            self.planner.observe(grid, ego.speed, env.target_in_ego_frame())
        return parts
