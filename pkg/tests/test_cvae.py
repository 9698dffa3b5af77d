"""Action proposer: analytic divergence cases and training behaviour."""

import numpy as np
import pytest

from riskmpc.cvae import (ActionProposer, DiagGaussian, beta_schedule,
                          infonce, kl_divergence, pseudo_label, train_step,
                          w2)
from riskmpc.tensor import Adam, Parameter, Tensor


def gauss(mean, log_std):
    return DiagGaussian(Tensor(np.asarray(mean, dtype=float)),
                        Tensor(np.asarray(log_std, dtype=float)))


def test_w2_analytic_case():
    # means (0,0) and (3,4), equal unit stds: distance is plain Euclidean 5
    a = gauss([0.0, 0.0], [0.0, 0.0])
    b = gauss([3.0, 4.0], [0.0, 0.0])
    assert np.isclose(float(w2(a, b).data), 5.0)
    assert np.isclose(float(w2(a, b, squared=True).data), 25.0)


def test_w2_std_term():
    # equal means, stds 1 vs 3 in one dim: distance = |1 - 3| = 2
    a = gauss([0.0], [0.0])
    b = gauss([0.0], [np.log(3.0)])
    assert np.isclose(float(w2(a, b).data), 2.0)


def test_w2_symmetry_and_identity():
    rng = np.random.default_rng(0)
    a = gauss(rng.standard_normal(4), rng.standard_normal(4) * 0.1)
    b = gauss(rng.standard_normal(4), rng.standard_normal(4) * 0.1)
    assert np.isclose(float(w2(a, b).data), float(w2(b, a).data))
    assert float(w2(a, a).data) < 1e-5


def test_w2_dim_mismatch():
    with pytest.raises(ValueError):
        w2(gauss([0.0], [0.0]), gauss([0.0, 0.0], [0.0, 0.0]))


def test_kl_analytic_cases():
    # KL(N(1,1) || N(0,1)) = 0.5
    q = gauss([1.0], [0.0])
    p = gauss([0.0], [0.0])
    assert np.isclose(float(kl_divergence(q, p).data), 0.5)
    # KL(N(0, sigma^2) || N(0,1)) = log(1/sigma) + (sigma^2 - 1)/2
    sigma = 0.5
    q2 = gauss([0.0], [np.log(sigma)])
    expect = -np.log(sigma) + (sigma ** 2 - 1) / 2
    assert np.isclose(float(kl_divergence(q2, p).data), expect)
    assert float(kl_divergence(p, p).data) < 1e-12


def test_infonce_no_negatives_is_zero():
    q = gauss([1.0, 0.0], [0.0, 0.0])
    p = gauss([0.0, 0.0], [0.0, 0.0])
    assert float(infonce(q, p, []).data) == 0.0


def test_infonce_equidistant_cases():
    # prior and the single negative at the same distance from the anchor:
    # loss = -log(1/2) = ln 2
    q = gauss([0.0, 0.0], [0.0, 0.0])
    p = gauss([2.0, 0.0], [0.0, 0.0])
    n = gauss([0.0, 2.0], [0.0, 0.0])
    assert np.isclose(float(infonce(q, p, [n]).data), np.log(2.0))
    # K equidistant negatives: loss = ln(1 + K)
    for k in (2, 5):
        negs = [gauss([0.0, 2.0], [0.0, 0.0]) for _ in range(k)]
        assert np.isclose(float(infonce(q, p, negs).data), np.log(1.0 + k))


def test_infonce_prefers_close_prior():
    q = gauss([0.0, 0.0], [0.0, 0.0])
    near = gauss([0.5, 0.0], [0.0, 0.0])
    far = gauss([5.0, 0.0], [0.0, 0.0])
    neg = gauss([1.0, 1.0], [0.0, 0.0])
    close_loss = float(infonce(q, near, [neg]).data)
    far_loss = float(infonce(q, far, [neg]).data)
    assert close_loss < far_loss


def test_infonce_anchor_gradients():
    """The positive posterior anchors the loss: the prior is pulled toward
    it and negatives are pushed away (gradient signs on the means)."""
    q_mean = Parameter(np.array([0.0, 0.0]))
    p_mean = Parameter(np.array([2.0, 0.0]))
    n_mean = Parameter(np.array([0.0, 1.0]))
    zero = Tensor(np.zeros(2))
    q = DiagGaussian(q_mean, zero)
    p = DiagGaussian(p_mean, zero)
    n = DiagGaussian(n_mean, zero)
    infonce(q, p, [n]).backward()
    # descent on the prior mean moves it toward the anchor
    assert np.dot(-p_mean.grad, q_mean.data - p_mean.data) > 0
    # descent on the negative mean moves it away from the anchor
    assert np.dot(-n_mean.grad, q_mean.data - n_mean.data) < 0
    # and the anchor feels both terms (gradient exists and is finite)
    assert q_mean.grad is not None and np.all(np.isfinite(q_mean.grad))


def test_beta_schedule():
    assert beta_schedule(0.0) == 0.0
    assert np.isclose(beta_schedule(1.0), 0.1)
    assert np.isclose(beta_schedule(0.5), 0.05)
    assert beta_schedule(7.0) == beta_schedule(1.0)


HORIZON, COND = 4, 6


def _proposer(seed=0):
    return ActionProposer(np.random.default_rng(seed), HORIZON, COND,
                          latent=8, hidden=16)


def test_decode_respects_control_bounds():
    prop = _proposer()
    rng = np.random.default_rng(1)
    for _ in range(5):
        z = rng.standard_normal(prop.latent) * 3
        seq = prop.decode(z, rng.standard_normal(COND)).data
        assert seq.shape == (HORIZON, 3)
        assert np.all(np.abs(seq[:, 0]) <= 1.0)
        assert np.all(seq[:, 1:] >= 0.0) and np.all(seq[:, 1:] <= 1.0)


def test_propose_shape_and_determinism():
    prop = _proposer()
    cond = np.random.default_rng(2).standard_normal(COND)
    a = prop.propose(cond, 5, np.random.default_rng(42))
    b = prop.propose(cond, 5, np.random.default_rng(42))
    assert a.shape == (5, HORIZON, 3)
    assert np.array_equal(a, b)
    c = prop.propose(cond, 5, np.random.default_rng(43))
    assert not np.array_equal(a, c)


def _batch(seed=0):
    from riskmpc.cvae import PseudoLabelBatch
    rng = np.random.default_rng(seed)
    pos = np.clip(rng.uniform(-1, 1, (HORIZON, 3)), 0, 1)
    pos[:, 0] = rng.uniform(-1, 1, HORIZON)
    negs = rng.uniform(0, 1, (3, HORIZON, 3))
    return PseudoLabelBatch(condition=rng.standard_normal(COND),
                            positive=pos, negatives=negs,
                            positive_cost=-1.0,
                            negative_costs=np.array([1.0, 2.0, 3.0]))


def test_train_step_reduces_reconstruction():
    prop = _proposer(3)
    opt = Adam(prop.param_list())
    batch = _batch(4)
    rng = np.random.default_rng(5)
    parts = [train_step(prop, opt, batch, rng, beta=0.01, lr=5e-3)
             for _ in range(150)]
    assert np.mean([p.recon for p in parts[-10:]]) < \
        np.mean([p.recon for p in parts[:10]])
    for p in parts:
        assert np.isfinite(p.total)


def test_train_step_positive_only_drops_contrastive():
    prop = _proposer(6)
    opt = Adam(prop.param_list())
    parts = train_step(prop, opt, _batch(7), np.random.default_rng(0),
                       beta=0.0, use_negatives=False, lr=0.0)
    assert parts.contrastive == 0.0
    parts2 = train_step(prop, opt, _batch(7), np.random.default_rng(0),
                        beta=0.0, use_negatives=True, lr=0.0)
    assert parts2.contrastive != 0.0


def test_proposer_checkpoint_roundtrip(tmp_path):
    prop = _proposer(8)
    cond = np.random.default_rng(9).standard_normal(COND)
    before = prop.propose(cond, 3, np.random.default_rng(1))
    path = tmp_path / "prop.npz"
    prop.save(path)
    clone = _proposer(99)
    clone.load(path)
    after = clone.propose(cond, 3, np.random.default_rng(1))
    assert np.array_equal(before, after)


def test_pseudo_label_orders_by_cost():
    from riskmpc.control import CostConfig
    from riskmpc.planner import ModelPlanner
    from riskmpc.worldmodel import WorldModel, WorldModelConfig
    cfg = WorldModelConfig(grid_size=8, patch=4, d=16, horizon=3, context=2,
                           layers=1)
    rng = np.random.default_rng(10)
    model = WorldModel(cfg, rng)
    planner = ModelPlanner(model, CostConfig(horizon=cfg.horizon))
    grid = rng.integers(0, cfg.num_classes, size=(cfg.grid_size, cfg.grid_size))
    planner.observe(grid, 1.0, [5.0, 0.0])
    batch = pseudo_label(planner, 5.0, np.random.default_rng(11),
                         n_samples=12, top_k=3)
    assert batch.negatives.shape == (3, cfg.horizon, 3)
    assert batch.positive_cost <= batch.negative_costs.min()
    assert batch.condition.shape == (2 * cfg.d,)
