"""Action-conditioned latent world model with three decoders.

The latent state is a token set: 16 visual tokens (one per 8x8 grid patch)
plus one ego token.  A gated recurrent update rolls the token set forward
under an action embedding; decoders map predicted states to a semantic
grid, traffic-event probabilities, and the future ego state.

Ego-state convention: the decoded "position" is the target offset in the
state's own ego frame, so the distance-to-target needed by the planning
cost is just its norm.  The ego decoder is residual and kinematic: it
predicts the per-step polar change of (offset, speed) from the previous
estimate and the applied action, anchored at the last true observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env as E
from .nn import MLP, Linear, Module, one_hot, uniform_init
from .tensor import Parameter, Tensor, concat, stack

POS_SCALE = 45.0   # metres; covers a whole route so offsets stay in [-1, 1]
SPEED_SCALE = E.MAX_SPEED
BCE_EPS = 1e-7
FOCAL_GAMMA = 2.0
DICE_SMOOTH = 1.0


@dataclass
class WorldModelConfig:
    grid_size: int = E.GRID_SIZE
    patch: int = 8
    num_classes: int = E.NUM_CLASSES
    num_events: int = E.NUM_EVENTS
    d: int = 64
    horizon: int = 10
    context: int = 5
    layers: int = 2
    semantic_guidance: bool = True
    teacher_forcing: bool = False
    # the ego head drives planning; upweighted so its gradient is not
    # drowned by the segmentation terms
    ego_weight: float = 100.0

    @property
    def patches_per_side(self):
        return self.grid_size // self.patch

    @property
    def num_visual(self):
        return self.patches_per_side ** 2

    @property
    def num_tokens(self):
        return self.num_visual + 1

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.num_classes

    @property
    def cells(self):
        return self.grid_size * self.grid_size


def ego_features(ego_speed, target_rel):
    """Ego-token input: normalized speed and target offset in ego frame."""
    return np.array([ego_speed / SPEED_SCALE,
                     target_rel[0] / POS_SCALE,
                     target_rel[1] / POS_SCALE])


def grid_patches(grid, cfg: WorldModelConfig):
    """(..., G, G) int grid -> (..., num_visual, patch_dim) one-hot patches."""
    g = np.asarray(grid)
    lead = g.shape[:-2]
    n, p = cfg.patches_per_side, cfg.patch
    oh = one_hot(g, cfg.num_classes)                      # (..., G, G, C)
    oh = oh.reshape(lead + (n, p, n, p, cfg.num_classes))
    oh = np.moveaxis(oh, -4, -3)                          # (..., n, n, p, p, C)
    return oh.reshape(lead + (cfg.num_visual, cfg.patch_dim))


class TransitionLayer(Module):
    def __init__(self, rng, d):
        self.mix = Linear(rng, 4 * d, d)
        self.gate = Linear(rng, d, d)
        self.update = Linear(rng, d, d)

    def __call__(self, tokens, act, hist):
        B, T, d = tokens.shape
        pooled = tokens.mean(axis=1, keepdims=True).broadcast_to((B, T, d))
        act_b = act.reshape(B, 1, d).broadcast_to((B, T, d))
        hist_b = hist.reshape(B, 1, d).broadcast_to((B, T, d))
        h = self.mix(concat([tokens, pooled, act_b, hist_b], axis=-1)).tanh()
        g = self.gate(h).sigmoid()
        u = self.update(h).tanh()
        return tokens * (1.0 - g) + u * g


class WorldModel(Module):
    def __init__(self, cfg: WorldModelConfig, rng):
        self.cfg = cfg
        d = cfg.d
        self.patch_proj = Linear(rng, cfg.patch_dim, d)
        self.pos_embed = Parameter(uniform_init(rng, cfg.num_visual, d))
        self.ego_enc = MLP(rng, [3, d, d])
        self.act_enc = Linear(rng, 1, d)
        self.act_pos = Parameter(uniform_init(rng, 3, d))
        self.trans = [TransitionLayer(rng, d) for _ in range(cfg.layers)]
        # segmentation decoder
        self.class_queries = Parameter(uniform_init(rng, cfg.num_classes, d))
        self.seg_key = Linear(rng, d, d)
        self.seg_val = Linear(rng, d, d)
        self.class_embed = Linear(rng, d, 16)
        self.pixel_embed = Linear(rng, d, cfg.patch * cfg.patch * 16)
        # event decoder
        self.event_queries = Parameter(uniform_init(rng, cfg.num_events, d))
        self.event_key = Linear(rng, d, d)
        self.event_val = Linear(rng, d, d)
        self.fuse_e = Parameter(np.array([1.0]))   # 1x1 mixing: event channel
        self.fuse_c = Parameter(np.array([0.5]))   # 1x1 mixing: semantic channel
        self.fuse_b = Parameter(np.array([0.0]))
        self.event_out = Linear(rng, d, 1)
        # ego decoder (residual kinematics: previous ego estimate + action)
        self.ego_dec = MLP(rng, [6, d, 3])

    # -- encoding ------------------------------------------------------

    def encode(self, grids, ego_feats):
        """grids: (B, G, G) ints; ego_feats: (B, 3) -> tokens (B, T, d)."""
        cfg = self.cfg
        patches = Tensor(grid_patches(grids, cfg))            # (B, V, P)
        vis = (self.patch_proj(patches) + self.pos_embed).tanh()
        ego = self.ego_enc(Tensor(np.asarray(ego_feats)))     # (B, d)
        B = vis.shape[0]
        return concat([vis, ego.reshape(B, 1, cfg.d)], axis=1)

    def action_tokens(self, actions):
        """(B, 3) action triples -> (B, 3, d): one token per control scalar.

        Each scalar's embedding is gated by a per-channel vector so the
        pooled summary stays injective in the action triple.
        """
        a = np.asarray(actions, dtype=float)
        toks = [self.act_enc(Tensor(a[:, i:i + 1])) * self.act_pos[i]
                for i in range(3)]
        return stack(toks, axis=1)

    def embed_actions(self, actions):
        """Mean-pooled action-token summary used by the transition."""
        return self.action_tokens(actions).mean(axis=1)

    def summarize_history(self, context_tokens):
        """Mean token embedding over the (<= context) most recent states."""
        ctx = context_tokens[-self.cfg.context:]
        means = [t.mean(axis=1) for t in ctx]                 # (B, d) each
        out = means[0]
        for m in means[1:]:
            out = out + m
        return out * (1.0 / len(means))

    # -- transition / rollout ------------------------------------------

    def transition(self, tokens, act_embed, hist):
        for layer in self.trans:
            tokens = layer(tokens, act_embed, hist)
        return tokens

    def rollout(self, context_tokens, action_seq):
        """Autoregressive rollout.

        context_tokens: list of (B, T, d) Tensors for observed steps (>= 1).
        action_seq: (B, H, 3) array.  Returns a list of H predicted states.
        """
        if not context_tokens:
            raise ValueError("rollout needs at least one observed state")
        actions = np.asarray(action_seq, dtype=float)
        hist = self.summarize_history(context_tokens)
        state = context_tokens[-1]
        preds = []
        for k in range(actions.shape[1]):
            act = self.embed_actions(actions[:, k, :])
            state = self.transition(state, act, hist)
            preds.append(state)
        return preds

    # -- decoders ------------------------------------------------------

    def decode_seg(self, tokens):
        """-> (mask logits (B, C, cells), attention logits Z_c (B, C, V))."""
        cfg = self.cfg
        vis = tokens[:, :cfg.num_visual, :]
        B = tokens.shape[0]
        keys = self.seg_key(vis)                              # (B, V, d)
        vals = self.seg_val(vis)
        q = self.class_queries.broadcast_to((B,) + self.class_queries.shape)
        z_c = (q @ keys.swapaxes(1, 2)) * (1.0 / np.sqrt(cfg.d))   # (B, C, V)
        att = z_c.softmax(axis=-1) @ vals                     # (B, C, d)
        cls_feat = self.class_embed(att)                      # (B, C, 16)
        pix = self.pixel_embed(vis)                           # (B, V, p*p*16)
        pix = pix.reshape(B, cfg.num_visual * cfg.patch * cfg.patch, 16)
        logits = cls_feat @ pix.swapaxes(1, 2)                # (B, C, V*p*p)
        return logits, z_c

    def seg_cell_logits(self, logits):
        """Reorder (B, C, V*p*p) mask logits into (B, C, G, G) cell layout."""
        cfg = self.cfg
        B = logits.shape[0]
        n, p = cfg.patches_per_side, cfg.patch
        x = logits.data.reshape(B, cfg.num_classes, n, n, p, p)
        x = np.moveaxis(x, 3, 4)                              # (B, C, n, p, n, p)
        return x.reshape(B, cfg.num_classes, cfg.grid_size, cfg.grid_size)

    def decode_events(self, tokens, z_c):
        """-> (B, num_events) probabilities in [0, 1]."""
        cfg = self.cfg
        B = tokens.shape[0]
        keys = self.event_key(tokens)                         # (B, T, d)
        vals = self.event_val(tokens)
        q = self.event_queries.broadcast_to((B,) + self.event_queries.shape)
        z_e = (q @ keys.swapaxes(1, 2)) * (1.0 / np.sqrt(cfg.d))   # (B, A, T)
        rows = max(cfg.num_events, cfg.num_classes)
        z_e_pad = _pad_rows_cols(z_e, rows, cfg.num_tokens)
        fused = z_e_pad * self.fuse_e + self.fuse_b
        if cfg.semantic_guidance:
            z_c_pad = _pad_rows_cols(z_c, rows, cfg.num_tokens)
            fused = fused + z_c_pad * self.fuse_c
        fused = fused[:, :cfg.num_events, :]
        att = fused.softmax(axis=-1) @ vals                   # (B, A, d)
        return self.event_out(att).reshape(B, cfg.num_events).sigmoid()

    def decode_ego(self, prev_ego, actions):
        """-> (B, 3): next target offset (metres, ego frame) and speed (m/s).

        Residual kinematic update: the previous ego estimate plus a learned
        per-step change conditioned on the applied action.  The per-step
        change of the offset is first-order in the action, so predicting
        changes keeps action effects from being drowned by the magnitude
        of the absolute offset.  Chained along a rollout, the estimate
        stays anchored at the last true observation.  Hazard effects on
        the ego (collisions, lane departures) are the event decoder's job;
        folding the latent state into this head let it lean on latent
        autocorrelation instead of the action and wrecked steering
        fidelity.
        """
        prev = prev_ego if isinstance(prev_ego, Tensor) \
            else Tensor(np.asarray(prev_ego, dtype=float))
        prev_n = prev * Tensor(np.array([1 / POS_SCALE, 1 / POS_SCALE,
                                         1 / SPEED_SCALE]))
        act = Tensor(np.asarray(actions, dtype=float))
        raw = self.ego_dec(concat([prev_n, act], axis=-1))
        # polar update: heading change, forward advance, speed change.
        # Rotating the offset exactly preserves its norm, so steering
        # cannot manufacture phantom progress the way a free-form additive
        # delta can.
        dtheta = raw[:, 0:1]
        adv = raw[:, 1:2]
        sin, cos = dtheta.sin(), dtheta.cos()
        tx = prev_n[:, 0:1] - adv
        ty = prev_n[:, 1:2]
        nx = cos * tx + sin * ty
        ny = cos * ty - sin * tx
        nv = prev_n[:, 2:3] + raw[:, 2:3]
        return concat([nx, ny, nv], axis=-1) * Tensor(np.array(
            [POS_SCALE, POS_SCALE, SPEED_SCALE]))


def _pad_rows_cols(t, rows, cols):
    """Zero-pad a (B, R, C) tensor up to (B, rows, cols)."""
    B, r, c = t.shape
    if r == rows and c == cols:
        return t
    right = Tensor(np.zeros((B, r, cols - c))) if cols > c else None
    row = concat([t, right], axis=2) if right is not None else t
    bottom = Tensor(np.zeros((B, rows - r, cols))) if rows > r else None
    return concat([row, bottom], axis=1) if bottom is not None else row


# -- losses ------------------------------------------------------------


@dataclass
class LossBundle:
    world: float
    cls: float
    focal: float
    dice: float
    ego: float
    event: float

    @property
    def seg(self):
        return self.cls + self.focal + self.dice

    @property
    def total(self):
        return self.world + self.seg + self.ego + self.event


def bce(probs, targets):
    """Mean binary cross-entropy with clamped probabilities."""
    p = probs.clip(BCE_EPS, 1.0 - BCE_EPS)
    t = Tensor(np.asarray(targets, dtype=float))
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).mean()


def cls_loss(mask_logits, target_classes):
    """Per-cell cross-entropy over classes.

    mask_logits: (B, C, cells); target_classes: (B, cells) ints in patch order.
    """
    logp = mask_logits.log_softmax(axis=1)
    tgt = one_hot(np.asarray(target_classes), mask_logits.shape[1])  # (B,cells,C)
    tgt = np.moveaxis(tgt, -1, 1)
    return -(logp * tgt).sum(axis=1).mean()


def focal_loss(mask_logits, target_classes, gamma=FOCAL_GAMMA):
    """Binary focal loss on per-class masks (sigmoid activations)."""
    p = mask_logits.sigmoid().clip(BCE_EPS, 1.0 - BCE_EPS)
    y = np.moveaxis(one_hot(np.asarray(target_classes), mask_logits.shape[1]), -1, 1)
    yt = Tensor(y)
    one_m_p = 1.0 - p
    w_pos = one_m_p * one_m_p          # (1-p)^gamma, gamma = 2
    w_neg = p * p
    loss = -(yt * w_pos * p.log() + (1.0 - yt) * w_neg * one_m_p.log())
    return loss.mean()


def dice_loss(mask_logits, target_classes, smooth=DICE_SMOOTH):
    p = mask_logits.sigmoid()
    y = Tensor(np.moveaxis(one_hot(np.asarray(target_classes),
                                   mask_logits.shape[1]), -1, 1))
    inter = (p * y).sum(axis=-1)
    denom = p.sum(axis=-1) + y.sum(axis=-1)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return (1.0 - dice).mean()


def grid_to_patch_cells(grid, cfg: WorldModelConfig):
    """(..., G, G) int grid -> (..., V*p*p) cells in patch-major order."""
    g = np.asarray(grid)
    lead = g.shape[:-2]
    n, p = cfg.patches_per_side, cfg.patch
    x = g.reshape(lead + (n, p, n, p))
    x = np.moveaxis(x, -3, -2)
    return x.reshape(lead + (n * n * p * p,))


def normalize_ego(ego_targets):
    """(B, 3) metric (tx, ty, speed) -> normalized units used by L_ego."""
    t = np.asarray(ego_targets, dtype=float).copy()
    t[..., 0:2] /= POS_SCALE
    t[..., 2] /= SPEED_SCALE
    return t


def compute_losses(model: WorldModel, pred_states, target_states, grids,
                   ego_targets, event_targets, ego_prev, actions):
    """Loss bundle over an H-step window.

    pred_states / target_states: lists of (B, T, d) Tensors (targets detached).
    grids: (H, B, G, G) int grids; ego_targets: (H, B, 3) metric;
    event_targets: (H, B, num_events) in {0, 1}.
    ego_prev: (B, 3) metric ego state at the last context step (the anchor
    of the residual ego chain); actions: (H, B, 3) actions applied per step.
    Returns (total Tensor, LossBundle of floats).
    """
    H = len(pred_states)
    if not (len(target_states) == H == len(grids) == len(ego_targets)
            == len(event_targets) == len(actions)):
        raise ValueError("loss inputs must all have length H")
    cfg = model.cfg
    w = c = f = d = eg = ev = None
    ego_est = Tensor(np.asarray(ego_prev, dtype=float))

    def acc(tot, term):
        return term if tot is None else tot + term

    for k in range(H):
        s_hat, s_tgt = pred_states[k], target_states[k]
        diff = s_hat - s_tgt.detach()
        # per-element mean so this term does not swamp the decoder losses
        w = acc(w, (diff * diff).sum() * (1.0 / diff.data.size))
        logits, z_c = model.decode_seg(s_hat)
        cells = grid_to_patch_cells(grids[k], cfg)
        c = acc(c, cls_loss(logits, cells))
        f = acc(f, focal_loss(logits, cells))
        d = acc(d, dice_loss(logits, cells))
        ego_pred = model.decode_ego(ego_est, actions[k])
        ego_est = ego_pred
        ego_diff = ego_pred * Tensor(np.array([1 / POS_SCALE, 1 / POS_SCALE,
                                               1 / SPEED_SCALE])) \
            - Tensor(normalize_ego(ego_targets[k]))
        eg = acc(eg, (ego_diff * ego_diff).sum()
                 * (cfg.ego_weight / ego_pred.shape[0]))
        probs = model.decode_events(s_hat, z_c)
        ev = acc(ev, bce(probs, event_targets[k]))

    scale = 1.0 / H
    w, c, f, d, eg, ev = (x * scale for x in (w, c, f, d, eg, ev))
    total = w + c + f + d + eg + ev
    bundle = LossBundle(world=float(w.data), cls=float(c.data),
                        focal=float(f.data), dice=float(d.data),
                        ego=float(eg.data), event=float(ev.data))
    return total, bundle
