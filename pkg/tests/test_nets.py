"""Network-layer checks: attention masking and equivariance, actor/critic
forward oracles, Gaussian density closed forms, Polyak updates, Adam."""

import math

import numpy as np
import pytest

from conftest import fd_check
from crosscoord.nets import (
    Adam,
    MhsaParams,
    NonFiniteGradient,
    actor_from_file,
    actor_to_file,
    critic_from_file,
    critic_to_file,
    grad_clip,
    log_prob_and_entropy,
    make_offline_actor,
    make_online_actor,
    make_twin_critic,
    make_value_net,
    mhsa_forward,
    soft_update,
    value_net_from_file,
    value_net_to_file,
)
from crosscoord.spaces import ObsLayout, ROLES
from crosscoord.tensor import Tape, Tensor

LAYOUT = ObsLayout(n_vehicle_slots=2, n_ped_slots=1)


def mhsa_oracle(tokens, valid, params):
    """Explicit per-head, per-query loop re-implementation of attention."""
    t = np.asarray(tokens, dtype=np.float64)
    v = np.asarray(valid, dtype=np.float64)
    if t.ndim == 2:
        t, v = t[None], v[None]
    b, n, _ = t.shape
    scale = 1.0 / math.sqrt(params.d_k)
    out = np.zeros((b, n, params.d_model))
    for bi in range(b):
        e = t[bi] @ params.w_embed.data
        heads = []
        for h in range(params.n_heads):
            q = e @ params.w_q[h].data
            k = e @ params.w_k[h].data
            vv = e @ params.w_v[h].data
            head = np.zeros((n, params.d_k))
            for i in range(n):
                scores = np.array([q[i] @ k[j] * scale + (v[bi, j] - 1.0) * 1e30
                                   for j in range(n)])
                w = np.exp(scores - scores.max())
                w = w / w.sum()
                for j in range(n):
                    head[i] += w[j] * vv[j]
            heads.append(head)
        out[bi] = np.concatenate(heads, axis=-1) @ params.w_out.data
    return out if np.asarray(tokens).ndim == 3 else out[0]


def sample_obs(layout, rng, role="left", veh_valid=(1, 1), ped_valid=(1,)):
    """Flat observation with controlled slot validity flags."""
    obs = np.zeros(layout.dim)
    obs[:6] = rng.normal(size=6) * 0.5
    for i, flag in enumerate(veh_valid):
        sl = layout.veh_slot(i)
        obs[sl.start] = float(flag)
        if flag:
            obs[sl.start + 1:sl.stop] = rng.normal(size=sl.stop - sl.start - 1) * 0.5
    for i, flag in enumerate(ped_valid):
        sl = layout.ped_slot(i)
        obs[sl.start] = float(flag)
        if flag:
            obs[sl.start + 1:sl.stop] = rng.normal(size=sl.stop - sl.start - 1) * 0.5
    obs[layout.role_start:layout.role_start + len(ROLES)] = layout.role_onehot(role)
    obs[layout.ctx_start:] = layout.ctx_onehot(1)
    return obs


# -- multi-head self-attention -------------------------------------------------


def test_single_valid_token_gets_weight_one():
    rng = np.random.default_rng(0)
    params = MhsaParams.create(rng, feature_dim=7, d_model=6, n_heads=2, d_k=3)
    token = rng.normal(size=(1, 7))
    out, weights = mhsa_forward(token, [1.0], params, return_weights=True)
    assert np.array_equal(weights, np.ones((2, 1, 1)))
    e = token @ params.w_embed.data
    want = np.concatenate([e @ params.w_v[0].data, e @ params.w_v[1].data],
                          axis=-1) @ params.w_out.data
    assert np.max(np.abs(out.data - want)) <= 1e-12


def test_mhsa_matches_explicit_loop_oracle():
    rng = np.random.default_rng(1)
    params = MhsaParams.create(rng, feature_dim=7, d_model=6, n_heads=2, d_k=3)
    tokens = rng.normal(size=(3, 7))
    for valid in ([1.0, 1.0, 1.0], [1.0, 0.0, 1.0]):
        got = mhsa_forward(tokens, valid, params).data
        want = mhsa_oracle(tokens, valid, params)
        assert np.max(np.abs(got - want)) <= 1e-10


def test_mhsa_permutation_equivariance():
    rng = np.random.default_rng(2)
    params = MhsaParams.create(rng, feature_dim=5, d_model=8, n_heads=2, d_k=4)
    tokens = rng.normal(size=(5, 5))
    valid = np.array([1.0, 1.0, 0.0, 1.0, 0.0])
    perm = np.array([3, 0, 4, 1, 2])
    base = mhsa_forward(tokens, valid, params).data
    permuted = mhsa_forward(tokens[perm], valid[perm], params).data
    assert np.max(np.abs(permuted - base[perm])) <= 1e-10


def test_mhsa_masked_content_cannot_leak_into_valid_rows():
    rng = np.random.default_rng(3)
    params = MhsaParams.create(rng, feature_dim=5, d_model=8, n_heads=2, d_k=4)
    tokens = rng.normal(size=(4, 5))
    valid = np.array([1.0, 0.0, 1.0, 0.0])
    base = mhsa_forward(tokens, valid, params).data
    garbled = tokens.copy()
    garbled[1] = 1e6
    garbled[3] = -42.0
    out = mhsa_forward(garbled, valid, params).data
    rows = valid > 0.5
    assert np.array_equal(out[rows], base[rows])


def test_mhsa_weight_rows_normalized_and_masked_columns_zero():
    rng = np.random.default_rng(4)
    params = MhsaParams.create(rng, feature_dim=5, d_model=8, n_heads=3, d_k=4)
    tokens = rng.normal(size=(2, 4, 5)) * 10.0
    valid = np.array([[1.0, 0.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0]])
    _, weights = mhsa_forward(tokens, valid, params, return_weights=True)
    assert np.max(np.abs(weights.sum(axis=-1) - 1.0)) <= 1e-9
    assert np.array_equal(weights[:, 0, :, 1], np.zeros((3, 4)))  # masked keys
    assert np.array_equal(weights[:, 1, :, 2:], np.zeros((3, 4, 2)))


def test_mhsa_all_masked_errors():
    rng = np.random.default_rng(5)
    params = MhsaParams.create(rng, feature_dim=5, d_model=8, n_heads=2, d_k=4)
    tokens = rng.normal(size=(3, 5))
    with pytest.raises(ValueError, match="zero valid"):
        mhsa_forward(tokens, [0.0, 0.0, 0.0], params)
    batch = rng.normal(size=(2, 3, 5))
    with pytest.raises(ValueError, match="zero valid"):
        mhsa_forward(batch, np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0]]), params)


def test_mhsa_dimension_mismatch_errors():
    rng = np.random.default_rng(6)
    params = MhsaParams.create(rng, feature_dim=5, d_model=8, n_heads=2, d_k=4)
    with pytest.raises(ValueError):
        mhsa_forward(rng.normal(size=(3, 4)), [1.0, 1.0, 1.0], params)
    with pytest.raises(ValueError, match="does not match"):
        mhsa_forward(rng.normal(size=(3, 5)), [1.0, 1.0], params)


def test_mhsa_gradients_pass_finite_differences():
    rng = np.random.default_rng(7)
    params = MhsaParams.create(rng, feature_dim=4, d_model=5, n_heads=2, d_k=3)
    tokens = rng.normal(size=(2, 3, 4))
    valid = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    probe = rng.normal(size=(2, 3, 5))
    fd_check(lambda: mhsa_forward(tokens, valid, params).mul(Tensor(probe)).sum(),
             params.parameters())


# -- actors ---------------------------------------------------------------------


def test_fresh_actor_mean_is_exactly_zero():
    rng = np.random.default_rng(10)
    for make in (make_offline_actor, make_online_actor):
        actor = make(LAYOUT, (16, 16), rng, "left")
        obs = sample_obs(LAYOUT, rng)
        assert np.array_equal(actor.mean_action(obs), np.zeros(2))
        mean, _ = actor.forward(np.stack([obs, obs * 2.0]))
        assert np.array_equal(mean.data, np.zeros((2, 2)))


def _randomize(actor, rng):
    for _, p in actor.parameters():
        p.data = rng.normal(size=p.data.shape) * 0.3


def test_actor_ignores_padded_slot_content():
    rng = np.random.default_rng(11)
    for make in (make_offline_actor, make_online_actor):
        actor = make(LAYOUT, (16,), rng, "straight")
        _randomize(actor, rng)
        obs = sample_obs(LAYOUT, rng, veh_valid=(1, 0), ped_valid=(0,))
        garbled = obs.copy()
        sl = LAYOUT.veh_slot(1)
        garbled[sl.start + 1:sl.stop] = 1e5   # payload only, flag stays 0
        sp = LAYOUT.ped_slot(0)
        garbled[sp.start + 1:sp.stop] = -77.0
        a0, s0 = actor.forward(obs)
        a1, s1 = actor.forward(garbled)
        assert np.array_equal(a0.data, a1.data)
        assert np.array_equal(s0.data, s1.data)


def test_offline_actor_matches_manual_forward_oracle():
    rng = np.random.default_rng(12)
    actor = make_offline_actor(LAYOUT, (8,), rng, "right",
                               norm_mean=rng.normal(size=LAYOUT.dim) * 0.1,
                               norm_std=np.abs(rng.normal(size=LAYOUT.dim)) + 0.5)
    _randomize(actor, rng)
    obs = np.stack([sample_obs(LAYOUT, rng, role="right") for _ in range(3)])
    mean, log_std = actor.forward(obs)

    x = (LAYOUT.sanitize(obs) - actor.norm_mean) / actor.norm_std
    (w0, b0), (w1, b1) = actor.trunk.layers
    want = np.tanh(x @ w0.data + b0.data) @ w1.data + b1.data
    assert np.max(np.abs(mean.data - want)) <= 1e-10
    assert np.array_equal(log_std.data, np.clip(actor.log_std.data, -5.0, 2.0))


def test_online_actor_matches_manual_forward_oracle():
    rng = np.random.default_rng(13)
    actor = make_online_actor(LAYOUT, (8,), rng, "left", d_model=6, n_heads=2, d_k=3)
    _randomize(actor, rng)
    obs = np.stack([sample_obs(LAYOUT, rng, veh_valid=(1, 0)) for _ in range(2)])
    mean, _ = actor.forward(obs)

    clean = LAYOUT.sanitize(obs)
    x = (clean - actor.norm_mean) / actor.norm_std
    tokens, valid = LAYOUT.to_tokens(clean)
    ego = mhsa_oracle(tokens, valid, actor.mhsa)[:, 0, :]
    x = x + ego @ actor.attn_proj.data
    (w0, b0), (w1, b1) = actor.trunk.layers
    want = np.tanh(x @ w0.data + b0.data) @ w1.data + b1.data
    assert np.max(np.abs(mean.data - want)) <= 1e-10


def test_log_std_clamped_to_documented_range():
    rng = np.random.default_rng(14)
    actor = make_offline_actor(LAYOUT, (8,), rng, "left")
    actor.log_std.data = np.array([-10.0, 10.0])
    _, log_std = actor.forward(sample_obs(LAYOUT, rng))
    assert log_std.data.tolist() == [-5.0, 2.0]


def test_online_actor_inherits_offline_behavior_exactly():
    rng = np.random.default_rng(15)
    source = make_offline_actor(LAYOUT, (16, 16), rng, "straight")
    _randomize(source, rng)
    source.norm_mean = rng.normal(size=LAYOUT.dim)
    source.norm_std = np.abs(rng.normal(size=LAYOUT.dim)) + 0.3
    tuned = make_online_actor(LAYOUT, (16, 16), rng, "straight", init_from=source)
    obs = np.stack([sample_obs(LAYOUT, rng) for _ in range(4)])
    m_src, s_src = source.forward(obs)
    m_new, s_new = tuned.forward(obs)
    assert np.array_equal(m_src.data, m_new.data)
    assert np.array_equal(s_src.data, s_new.data)


def test_online_actor_init_rejects_mismatched_trunk():
    rng = np.random.default_rng(16)
    source = make_offline_actor(LAYOUT, (16,), rng, "straight")
    with pytest.raises(ValueError, match="trunk sizes"):
        make_online_actor(LAYOUT, (32,), rng, "straight", init_from=source)


def test_role_set_has_exactly_three_roles():
    rng = np.random.default_rng(17)
    actors = {role: make_offline_actor(LAYOUT, (8,), rng, role) for role in ROLES}
    assert set(actors) == {"left", "straight", "right"}
    with pytest.raises(KeyError):
        actors["reverse"]


# -- Gaussian density --------------------------------------------------------------


def test_logp_closed_form_at_mean():
    mean = Tensor(np.zeros((1, 2)))
    log_std = Tensor(np.zeros(2))
    logp, _ = log_prob_and_entropy(mean, log_std, np.zeros((1, 2)))
    assert float(logp.data[0]) == pytest.approx(-math.log(2.0 * math.pi), abs=1e-12)


def test_entropy_closed_form_unit_std():
    _, entropy = log_prob_and_entropy(Tensor(np.zeros((1, 2))), Tensor(np.zeros(2)),
                                      np.zeros((1, 2)))
    assert float(entropy.data) == pytest.approx(math.log(2.0 * math.pi * math.e), abs=1e-12)


def test_density_matches_quadrature():
    mean = np.array([0.3, -0.2])
    std = np.array([0.7, 1.3])
    n = 161
    axes = [np.linspace(m - 8.0 * s, m + 8.0 * s, n) for m, s in zip(mean, std)]
    g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
    actions = np.stack([g0.ravel(), g1.ravel()], axis=1)
    logp, entropy = log_prob_and_entropy(
        Tensor(np.broadcast_to(mean, actions.shape).copy()),
        Tensor(np.log(std)), actions)
    p = np.exp(logp.data).reshape(n, n)
    total = np.trapezoid(np.trapezoid(p, axes[1], axis=1), axes[0])
    assert abs(total - 1.0) <= 1e-6
    plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
    h_quad = -np.trapezoid(np.trapezoid(plogp, axes[1], axis=1), axes[0])
    assert abs(h_quad - float(entropy.data)) <= 1e-6


def test_zero_std_rejected():
    with pytest.raises(ValueError, match="positive"):
        log_prob_and_entropy(Tensor(np.zeros((1, 2))),
                             Tensor(np.array([-np.inf, 0.0])), np.zeros((1, 2)))


def test_logp_gradient_passes_finite_differences():
    rng = np.random.default_rng(18)
    mean = Tensor.param(rng.normal(size=(3, 2)))
    log_std = Tensor.param(rng.normal(size=2) * 0.2)
    actions = rng.normal(size=(3, 2))
    fd_check(lambda: log_prob_and_entropy(mean, log_std, actions)[0].sum(),
             [("mean", mean), ("log_std", log_std)])


# -- twin critic --------------------------------------------------------------------


def test_identical_heads_agree_exactly():
    rng = np.random.default_rng(20)
    critic = make_twin_critic(LAYOUT, (8, 8), rng)
    for (w1, b1), (w2, b2) in zip(critic.q1.layers, critic.q2.layers):
        w2.data = w1.data.copy()
        b2.data = b1.data.copy()
    obs = np.stack([sample_obs(LAYOUT, rng) for _ in range(3)])
    q1, q2 = critic.forward(obs, rng.normal(size=(3, 2)))
    assert np.array_equal(q1.data, q2.data)


def test_critic_matches_manual_forward_oracle():
    rng = np.random.default_rng(21)
    critic = make_twin_critic(LAYOUT, (5,), rng)
    obs = np.stack([sample_obs(LAYOUT, rng) for _ in range(3)])
    action = rng.normal(size=(3, 2))
    q1, q2 = critic.forward(obs, action)
    x = np.concatenate([LAYOUT.sanitize(obs), action], axis=-1)
    for q, net in ((q1, critic.q1), (q2, critic.q2)):
        (w0, b0), (w1, b1) = net.layers
        want = (np.tanh(x @ w0.data + b0.data) @ w1.data + b1.data)[:, 0]
        assert np.max(np.abs(q.data - want)) <= 1e-10


def test_critic_rejects_mismatched_action_width():
    rng = np.random.default_rng(22)
    critic = make_twin_critic(LAYOUT, (5,), rng)
    obs = np.stack([sample_obs(LAYOUT, rng) for _ in range(3)])
    with pytest.raises(ValueError):
        critic.forward(obs, rng.normal(size=(3, 3)))


def test_critic_gradient_reaches_action_tensor():
    rng = np.random.default_rng(23)
    critic = make_twin_critic(LAYOUT, (5,), rng)
    obs = np.stack([sample_obs(LAYOUT, rng) for _ in range(2)])
    action = Tensor.param(rng.normal(size=(2, 2)))
    with Tape() as tape:
        q1, _ = critic.forward(obs, action)
        loss = q1.sum()
    tape.backward(loss)
    assert action.grad is not None and np.all(np.isfinite(action.grad))


# -- soft update ----------------------------------------------------------------------


def _critic_pair(seed):
    rng = np.random.default_rng(seed)
    return (make_twin_critic(LAYOUT, (6,), rng), make_twin_critic(LAYOUT, (6,), rng))


def test_soft_update_full_copy_at_tau_one():
    target, online = _critic_pair(30)
    soft_update(target.parameters(), online.parameters(), tau=1.0)
    for (_, tp), (_, op) in zip(target.parameters(), online.parameters()):
        assert np.array_equal(tp.data, op.data)


def test_soft_update_fixed_point():
    target, online = _critic_pair(31)
    # dyadic values and tau keep the blend exact in floating point
    for (_, tp), (_, op) in zip(target.parameters(), online.parameters()):
        op.data = np.round(op.data * 4.0) / 4.0
        tp.data = op.data.copy()
    before = [tp.data.copy() for _, tp in target.parameters()]
    soft_update(target.parameters(), online.parameters(), tau=0.5)
    for (_, tp), prev in zip(target.parameters(), before):
        assert np.array_equal(tp.data, prev)


def test_soft_update_scalar_example():
    target = Tensor.param(np.array(0.0))
    online = Tensor.param(np.array(1.0))
    soft_update([("p", target)], [("p", online)], tau=0.005)
    assert float(target.data) == 0.005


def test_soft_update_rejects_tau_outside_unit_interval():
    target, online = _critic_pair(32)
    for tau in (0.0, -0.1, 1.0001):
        with pytest.raises(ValueError, match="tau"):
            soft_update(target.parameters(), online.parameters(), tau)


def test_soft_update_is_a_contraction():
    target, online = _critic_pair(33)
    tau = 0.37
    before = math.sqrt(sum(float(np.sum((tp.data - op.data) ** 2))
                           for (_, tp), (_, op)
                           in zip(target.parameters(), online.parameters())))
    soft_update(target.parameters(), online.parameters(), tau)
    after = math.sqrt(sum(float(np.sum((tp.data - op.data) ** 2))
                          for (_, tp), (_, op)
                          in zip(target.parameters(), online.parameters())))
    assert after <= (1.0 - tau) * before * (1.0 + 1e-12)


def test_soft_update_rejects_mismatched_parameters():
    target, online = _critic_pair(34)
    renamed = [(f"x_{name}", p) for name, p in online.parameters()]
    with pytest.raises(ValueError, match="mismatch"):
        soft_update(target.parameters(), renamed, tau=0.5)


# -- optimizer -----------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params_unchanged():
    p = Tensor.param(np.array([1.0, -2.0]))
    opt = Adam([("p", p)], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]
    p.grad = None
    opt.step()   # absent grad is skipped
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_matches_hand_recurrence_three_steps():
    p = Tensor.param(np.array(1.0))
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    opt = Adam([("p", p)], lr=lr, betas=(b1, b2), eps=eps)
    grads = [0.3, -0.5, 0.2]
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        p.grad = np.array(g)
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert float(p.data) == pytest.approx(x, abs=1e-12)


def test_adam_refuses_non_finite_gradients_atomically():
    a = Tensor.param(np.array(1.0))
    b = Tensor.param(np.array(2.0))
    opt = Adam([("a", a), ("b", b)], lr=0.1)
    a.grad = np.array(0.5)
    b.grad = np.array(np.nan)
    with pytest.raises(NonFiniteGradient):
        opt.step()
    assert float(a.data) == 1.0 and float(b.data) == 2.0


def test_grad_clip_rescales_to_max_norm():
    p = Tensor.param(np.zeros(2))
    p.grad = np.array([6.0, 8.0])
    norm = grad_clip([("p", p)], max_norm=5.0)
    assert norm == pytest.approx(10.0, abs=1e-12)
    assert math.sqrt(float(np.sum(p.grad ** 2))) == pytest.approx(5.0, abs=1e-12)


def test_grad_clip_leaves_small_gradients_alone():
    p = Tensor.param(np.zeros(2))
    p.grad = np.array([3.0, 0.0])
    q = Tensor.param(np.zeros(1))   # no grad, must be tolerated
    norm = grad_clip([("p", p), ("q", q)], max_norm=5.0)
    assert norm == pytest.approx(3.0, abs=1e-12)
    assert p.grad.tolist() == [3.0, 0.0]


# -- checkpoints ----------------------------------------------------------------------


def test_actor_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(40)
    for make, name in ((make_offline_actor, "off.npz"), (make_online_actor, "on.npz")):
        actor = make(LAYOUT, (8, 8), rng, "right")
        _randomize(actor, rng)
        actor.norm_mean = rng.normal(size=LAYOUT.dim)
        actor.norm_std = np.abs(rng.normal(size=LAYOUT.dim)) + 0.2
        actor_to_file(tmp_path / name, actor, {"seed": 7})
        loaded, manifest = actor_from_file(tmp_path / name)
        assert manifest["role"] == "right" and manifest["seed"] == 7
        for (na, pa), (nb, pb) in zip(actor.parameters(), loaded.parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)
        obs = np.stack([sample_obs(LAYOUT, rng, role="right") for _ in range(3)])
        assert np.array_equal(actor.forward(obs)[0].data, loaded.forward(obs)[0].data)


def test_critic_and_value_net_roundtrip(tmp_path):
    rng = np.random.default_rng(41)
    critic = make_twin_critic(LAYOUT, (8,), rng)
    critic_to_file(tmp_path / "c.npz", critic)
    loaded, _ = critic_from_file(tmp_path / "c.npz")
    for (_, pa), (_, pb) in zip(critic.parameters(), loaded.parameters()):
        assert np.array_equal(pa.data, pb.data)

    net = make_value_net(LAYOUT, (8,), rng, d_model=6, n_heads=2, d_k=3)
    for _, p in net.parameters():
        p.data = rng.normal(size=p.data.shape)
    value_net_to_file(tmp_path / "v.npz", net)
    loaded_v, _ = value_net_from_file(tmp_path / "v.npz")
    obs = np.stack([sample_obs(LAYOUT, rng) for _ in range(2)])
    assert np.array_equal(net.values(obs), loaded_v.values(obs))


def test_checkpoint_kind_is_validated(tmp_path):
    rng = np.random.default_rng(42)
    critic = make_twin_critic(LAYOUT, (8,), rng)
    critic_to_file(tmp_path / "c.npz", critic)
    with pytest.raises(ValueError, match="not an actor"):
        actor_from_file(tmp_path / "c.npz")
