import csv

import numpy as np
import pytest

from bounded_agents.core import Supertype, kl_divergence, regularized_reward, total_variation
from bounded_agents.envs import make_env
from bounded_agents.learner import (
    CURVE_COLUMNS,
    Adam,
    Advantages,
    TrainingConfig,
    ValueModel,
    collect_rollouts,
    compute_advantages,
    gae,
    network_shapes,
    penalty,
    policy_loss_grad,
    ppo_update,
    resolve_config,
    run_episodes,
    suggested_episodes,
    train,
    write_curve,
)
from bounded_agents.policy import encode_observation, forward, init_params, zero_params

BANDIT = make_env("bandit")
DUO = make_env("cournot_duopoly")


def fresh(env, seed=0):
    pshape, vshape = network_shapes(env)
    rng = np.random.default_rng(seed)
    return init_params(pshape, rng), ValueModel(init_params(vshape, rng, out_gain=1.0))


def test_config_validation_and_profiles():
    assert TrainingConfig().iterations == 500
    assert TrainingConfig.desk().iterations == 150
    for bad in ({"iterations": 0}, {"gamma": 1.5}, {"clip_epsilon": 0}, {"kl_mode": "entropy"},
                {"episodes_per_iteration": 0}):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)
    assert resolve_config(TrainingConfig(), DUO).episodes_per_iteration == suggested_episodes(DUO) == 256
    assert suggested_episodes(make_env("cobweb")) == 16


# ------------------------------------------------------------------- rollouts


def test_rollout_shapes_and_bookkeeping():
    params, _ = fresh(DUO)
    cfg = TrainingConfig(episodes_per_iteration=40, seed=1)
    b = collect_rollouts(DUO, params, Supertype(1, 0.5), cfg, np.random.default_rng(0))
    assert len(b) == 80 and b.obs.shape == (80, 27)
    assert np.array_equal(b.reward, regularized_reward(b.utility, b.lam, b.kl_penalty))
    # the identity holds to rounding of the operands (a few ulp of |u|)
    assert np.all(np.abs(b.reward - b.utility + b.lam * b.kl_penalty) <= 4 * np.spacing(np.abs(b.utility) + 1))
    assert np.all(b.lam >= 0)
    probs = forward(params, b.obs).probs
    for k in range(0, 80, 7):
        assert b.kl_penalty[k] == pytest.approx(kl_divergence(probs[k], b.priors[k]), abs=1e-12)
        assert b.logp[k] == pytest.approx(np.log(probs[k, b.actions[k]]))


def test_zero_lambda_reward_is_utility():
    params, _ = fresh(DUO)
    b, _ = run_episodes(DUO, params, Supertype(0, 0), 30, np.random.default_rng(0))
    assert np.array_equal(b.reward, b.utility)


def test_policy_equal_to_prior_has_no_penalty():
    params = zero_params(network_shapes(DUO)[0])
    b, _ = run_episodes(DUO, params, Supertype(2, 0.5), 30, np.random.default_rng(0))
    assert np.all(b.kl_penalty == 0)


def test_penalty_modes():
    probs = np.array([[0.75, 0.25]])
    q = np.array([[0.5, 0.5]])
    assert penalty(probs, q, np.array([1]), "per_action")[0] == pytest.approx(0.25 * np.log(0.5))
    assert penalty(probs, q, np.array([1]), "exact")[0] == pytest.approx(kl_divergence(probs[0], q[0]))
    assert penalty(probs, q, np.array([1]), "none")[0] == 0


def test_rollout_deterministic():
    params, _ = fresh(DUO)
    a, _ = run_episodes(DUO, params, Supertype(1, 0.25), 50, np.random.default_rng(3))
    b, _ = run_episodes(DUO, params, Supertype(1, 0.25), 50, np.random.default_rng(3))
    for f in ("obs", "actions", "reward", "logp", "lam"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_rollout_dimension_mismatch():
    params, _ = fresh(BANDIT)
    with pytest.raises(ValueError, match="does not fit"):
        run_episodes(DUO, params, Supertype(0, 0), 2, np.random.default_rng(0))


def test_cobweb_trajectories_are_contiguous():
    env = make_env("cobweb", {"horizon": 5})
    params, _ = fresh(env)
    b, ro = run_episodes(env, params, Supertype(1, 0.5), 3, np.random.default_rng(0))
    assert len(b) == 3 * 6 * 5
    assert np.array_equal(b.step[:5], np.arange(5))
    assert len(set(b.agent[:5])) == 1 and len(set(b.episode[:5])) == 1
    assert ro.price.shape == (3, 5)
    # the price feature at step t is the realised price of step t-1
    first = b.obs[:5, 0]
    assert first[0] == 0.5
    assert np.allclose(first[1:], ro.price[0, :4] / 10)


# ----------------------------------------------------------------- advantages


def test_gae_degenerate_cases():
    r = np.array([[1.0, 2.0, 3.0]])
    assert np.allclose(gae(r, np.zeros((1, 3)), 0.0, 0.95), r)
    # gamma = lambda = 1, zero critic: reward-to-go
    assert np.allclose(gae(r, np.zeros((1, 3)), 1.0, 1.0), [[6, 5, 3]])
    v = np.array([[0.5, 0.1, -0.2]])
    expected = np.zeros(3)
    last = 0.0
    for t in (2, 1, 0):
        nv = v[0, t + 1] if t < 2 else 0.0
        last = r[0, t] + 0.9 * nv - v[0, t] + 0.9 * 0.8 * last
        expected[t] = last
    assert np.allclose(gae(r, v, 0.9, 0.8)[0], expected)


def test_compute_advantages_single_step():
    params, _ = fresh(DUO)
    b, _ = run_episodes(DUO, params, Supertype(1, 0), 64, np.random.default_rng(0))
    adv = compute_advantages(b, 0.99, 0.95, None)
    assert np.allclose(adv.advantages * adv.scale + (b.reward.mean()), b.reward)
    assert np.array_equal(adv.returns, b.reward)
    assert abs(adv.advantages.mean()) < 1e-12 and adv.advantages.std() == pytest.approx(1)


def test_compute_advantages_gamma_zero_returns_reward():
    env = make_env("cobweb", {"horizon": 4})
    params, value = fresh(env)
    b, _ = run_episodes(env, params, Supertype(1, 0), 2, np.random.default_rng(0))
    adv = compute_advantages(b, 0.0, 0.95, value)
    assert np.allclose(adv.returns, b.reward)


def test_constant_rewards_give_zero_advantages():
    params, _ = fresh(BANDIT)
    env = make_env("bandit", {"payoffs": [[2.0, 2.0]]})
    b, _ = run_episodes(env, params, Supertype(0, 0), 20, np.random.default_rng(0))
    adv = compute_advantages(b, 0.99, 0.95, None)
    assert np.all(adv.advantages == 0) and adv.scale == 1.0


def test_value_stats_merge():
    v = ValueModel(zero_params(network_shapes(BANDIT)[1]))
    x = np.random.default_rng(0).normal(3, 2, size=1000)
    v.update_stats(x[:400])
    v.update_stats(x[400:])
    assert v.ret_mean == pytest.approx(x.mean())
    assert v.ret_var == pytest.approx(x.var())


# --------------------------------------------------------------------- update


def test_policy_loss_grad_finite_difference():
    rng = np.random.default_rng(0)
    params, _ = fresh(DUO)
    params = params.replace(params.flat + 0.05 * rng.normal(size=params.flat.size))
    b, _ = run_episodes(DUO, params, Supertype(1, 1), 16, rng)
    old = b.logp + rng.normal(0, 0.1, size=len(b))     # ratios away from 1, some clipped
    adv = rng.normal(size=len(b))
    lam = b.lam / 0.7
    args = (b.obs, b.actions, old, adv, lam, b.priors, 0.2, True)
    _, g = policy_loss_grad(params, *args)
    for k in rng.choice(params.flat.size, 25, replace=False):
        h = 1e-6
        up, dn = params.flat.copy(), params.flat.copy()
        up[k] += h
        dn[k] -= h
        num = (policy_loss_grad(params.replace(up), *args)[0] - policy_loss_grad(params.replace(dn), *args)[0]) / (2 * h)
        assert abs(num - g[k]) <= 1e-4 * max(abs(num), abs(g[k])) + 1e-7


def test_zero_advantages_leave_policy_unchanged():
    params, value = fresh(DUO)
    b, _ = run_episodes(DUO, params, Supertype(0, 0), 64, np.random.default_rng(0))
    adv = Advantages(np.zeros(len(b)), b.reward, 1.0)
    cfg = TrainingConfig(minibatch_size=32)
    new, new_value, _, _ = ppo_update(params, value, b, adv, cfg)
    assert np.array_equal(new.flat, params.flat)
    assert not np.array_equal(new_value.params.flat, value.params.flat)
    assert value.count == 0     # input untouched


def test_adam_first_step_is_lr_sized():
    x = Adam(0.1).step(np.zeros(3), np.array([5.0, -0.01, 0.0]))
    assert np.allclose(x, [-0.1, 0.1, 0.0], atol=1e-6)


def test_ppo_update_empty_batch():
    import dataclasses
    params, value = fresh(BANDIT)
    with pytest.raises(ValueError):
        run_episodes(BANDIT, params, Supertype(0, 0), 0, np.random.default_rng(0))
    b, _ = run_episodes(BANDIT, params, Supertype(0, 0), 1, np.random.default_rng(0))
    empty = dataclasses.replace(b, actions=b.actions[:0])
    with pytest.raises(ValueError):
        ppo_update(params, value, empty, Advantages(np.zeros(0), np.zeros(0), 1.0), TrainingConfig())


# ---------------------------------------------------------------------- train


def test_train_deterministic_and_curve(tmp_path):
    cfg = TrainingConfig(iterations=5, seed=11)
    a = train(DUO, Supertype(1, 0.25), cfg)
    b = train(DUO, Supertype(1, 0.25), cfg)
    assert np.array_equal(a.params.flat, b.params.flat)
    assert a.curve == b.curve and len(a.curve) == 5
    c = train(DUO, Supertype(1, 0.25), cfg.replace(seed=12))
    assert not np.array_equal(a.params.flat, c.params.flat)
    write_curve(tmp_path / "curve.csv", a.curve)
    rows = list(csv.DictReader(open(tmp_path / "curve.csv")))
    assert tuple(rows[0]) == CURVE_COLUMNS and len(rows) == 5
    assert float(rows[2]["mean_raw_utility"]) == a.curve[2]["mean_raw_utility"]


def test_zero_lambda_matches_unregularised_training():
    cfg = TrainingConfig(iterations=8, seed=2)
    a = train(DUO, Supertype(0, 0), cfg)
    b = train(DUO, Supertype(0, 0), cfg.replace(kl_mode="none"))
    assert a.params.flat.tobytes() == b.params.flat.tobytes()


def test_bandit_learns_argmax_without_cost():
    res = train(BANDIT, Supertype(0, 0), TrainingConfig(iterations=60, seed=0))
    q = np.full(2, 0.5)
    p = forward(res.params, encode_observation([], 0, 1, 0.0, q)).probs
    assert p[0] > 0.95
    assert res.curve[-1]["mean_raw_utility"] > res.curve[0]["mean_raw_utility"]


def test_policy_conditions_on_lambda():
    # heterogeneous population lam ~ N(5, 5): the same network must act differently at lam=0 and 10
    res = train(DUO, Supertype(5, 1), TrainingConfig.desk(seed=4))
    q = np.full(25, 0.04)
    p0 = forward(res.params, encode_observation([], 0, 2, 0.0, q)).probs
    p10 = forward(res.params, encode_observation([], 0, 2, 10.0, q)).probs
    assert total_variation(p0, p10) > 0.1
