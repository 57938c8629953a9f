import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bounded_agents.envs import (
    ENV_NAMES,
    MATCHING_PENNIES,
    RPS,
    CobwebConfig,
    ConfigError,
    CournotConfig,
    SupplyChainConfig,
    bandit,
    cobweb_price,
    cobweb_step,
    cournot_price,
    cournot_step,
    make_env,
    matrix_game_step,
    supply_chain_step,
)

SC = SupplyChainConfig()
DUO = CournotConfig()
TRI = CournotConfig(firms=3)
COB = CobwebConfig()


# ---------------------------------------------------------------- supply chain


def test_supply_chain_examples():
    y, u = supply_chain_step(SC, [100, 100])
    assert np.allclose(y, [45, 45]) and np.allclose(u, [225, 225])
    y, _ = supply_chain_step(SC, [100, 50])
    assert np.allclose(y, [60, 30])
    y, _ = supply_chain_step(SC, [37, 37])
    assert np.allclose(y, [SC.capacity / 2] * 2)


def test_supply_chain_utility_formula():
    y, u = supply_chain_step(SC, [100, 50])
    # retailer 0 gets 60 (10 wasted), retailer 1 gets 30 (20 short)
    assert np.allclose(u, [250 - 2 * 10, 250 - 5 * 20])


@given(st.lists(st.integers(1, 100), min_size=2, max_size=2))
def test_supply_chain_conserves_capacity(reqs):
    y, _ = supply_chain_step(SC, reqs)
    assert abs(y.sum() - SC.capacity) < 1e-9


def test_supply_chain_penalty_monotone_in_gap():
    # opponent fixed; utility falls as the own allocation moves away from D
    x = np.arange(1, 101)
    y, u = supply_chain_step(SC, np.column_stack([x, np.full_like(x, 30)]))
    gap = np.abs(y[:, 0] - SC.demand)
    order = np.argsort(gap, kind="stable")
    below = y[order, 0] <= SC.demand
    for side in (below, ~below):
        assert np.all(np.diff(u[order, 0][side]) <= 1e-12)


def test_supply_chain_config_checks():
    with pytest.raises(ConfigError):
        SupplyChainConfig(capacity=100)
    with pytest.raises(ValueError):
        supply_chain_step(SC, [0, 10])
    with pytest.raises(ValueError):
        supply_chain_step(SC, [101, 10])


# --------------------------------------------------------------------- Cournot


def test_cournot_examples():
    p, u = cournot_step(DUO, [20, 20])
    assert p == pytest.approx(0.8) and np.allclose(u, 16)
    p, u = cournot_step(TRI, [15, 15, 15])
    assert p == pytest.approx(0.6) and np.allclose(u, 9)
    p, u = cournot_step(TRI, [32, 32, 32])
    assert p == 0 and np.all(u == 0)
    assert cournot_price(TRI, [32, 32, 32])[1]
    assert not cournot_price(DUO, [20, 20])[1]


@pytest.mark.parametrize("cfg", [DUO, TRI])
def test_cournot_single_interior_argmax(cfg):
    q = np.arange(cfg.q_lo, cfg.q_hi + 1)
    for other in range(cfg.q_lo * (cfg.firms - 1), cfg.q_hi * (cfg.firms - 1) + 1):
        p, _ = cournot_price(cfg, q + other)
        u = p * q
        if u.max() == 0:
            continue
        k = int(np.argmax(u))
        # concave on the positive-price region: increasing then decreasing
        pos = p > 0
        assert np.all(np.diff(u[: k + 1]) >= -1e-12)
        assert np.all(np.diff(u[k:][pos[k:]]) <= 1e-12)


def test_cournot_bounds():
    with pytest.raises(ValueError):
        cournot_step(DUO, [7, 20])
    with pytest.raises(ConfigError):
        CournotConfig(A=0.5)


# ---------------------------------------------------------------------- cobweb


def test_cobweb_examples():
    cfg = CobwebConfig(shock_std=0)
    p, u = cobweb_step(cfg, np.full(6, 6.0))
    assert p == pytest.approx(5.2)
    assert np.allclose(u, 1300 - 260 * 0.8 ** 2)
    from bounded_agents.envs import cobweb_utility
    assert np.allclose(cobweb_utility(5.0, [5.0, 5.0 + np.sqrt(5)]), [1300, 0])


def test_cobweb_price_decreasing_in_each_prediction():
    grid = np.round(np.arange(0, 10.01, 0.1), 10)
    rng = np.random.default_rng(0)
    for _ in range(20):
        base = rng.choice(grid, 6)
        for k in range(6):
            preds = np.tile(base, (len(grid), 1))
            preds[:, k] = grid
            assert np.all(np.diff(cobweb_price(COB, preds)) < 0)


@given(st.lists(st.floats(0, 10), min_size=6, max_size=6), st.integers(0, 2**31))
@settings(max_examples=50)
def test_cobweb_utility_bounded(preds, seed):
    _, u = cobweb_step(COB, preds, np.random.default_rng(seed))
    assert np.all((u >= 0) & (u <= 1300))


def test_cobweb_requires_rng_with_shocks():
    with pytest.raises(ValueError):
        cobweb_step(COB, np.full(6, 5.0))


def test_cobweb_one_shock_per_market():
    preds = np.full((4, 6), 5.0)
    p, _ = cobweb_step(COB, preds, np.random.default_rng(1))
    assert p.shape == (4,)
    assert len(set(p)) == 4


# ---------------------------------------------------------------- matrix games


def test_matrix_games():
    assert np.array_equal(matrix_game_step(RPS, [0, 2]), [1, -1])
    assert np.array_equal(matrix_game_step(RPS, [0, 0]), [0, 0])
    assert np.array_equal(matrix_game_step(MATCHING_PENNIES, [0, 0]), [1, -1])
    assert np.array_equal(matrix_game_step(bandit((3.0, 1.0)), [0]), [3.0])
    with pytest.raises(ValueError):
        matrix_game_step(RPS, [0, 3])


# ------------------------------------------------------------------- registry


@pytest.mark.parametrize("name", ENV_NAMES)
def test_make_env_roundtrip(name):
    env = make_env(name)
    rng = np.random.default_rng(0)
    state = env.reset(3, rng)
    feats = env.features(state)
    assert feats.shape == (3, env.n_agents, env.n_features)
    res = env.step(state, np.zeros((3, env.n_agents), dtype=int), rng)
    assert res.utilities.shape == (3, env.n_agents)
    assert (res.price is not None) == env.has_price
    again = make_env(name, {k: v for k, v in env.config_dict().items()
                            if name not in ("rps", "matching_pennies", "bandit") or k == "utility_scale"})
    assert again.space == env.space


def test_make_env_overrides_and_errors():
    assert make_env("cobweb", {"producers": 4}).n_agents == 4
    assert make_env("cournot_triopoly").n_agents == 3
    with pytest.raises(ConfigError, match="unknown"):
        make_env("cournot_duopoly", {"C": 1})
    with pytest.raises(ConfigError):
        make_env("poker")


def test_cobweb_env_state_is_last_price():
    env = make_env("cobweb")
    rng = np.random.default_rng(0)
    s = env.reset(2, rng)
    assert np.allclose(s, 5.0)
    res = env.step(s, np.full((2, 6), 59), rng)
    assert np.array_equal(res.state, res.price)
    assert np.allclose(env.features(res.state)[:, 0, 0], res.price / 10)


def test_cobweb_grid_covers_equilibrium():
    from bounded_agents.equilibrium import cobweb_rational_price
    assert COB.price_lo < cobweb_rational_price(COB) < COB.price_hi
    assert make_env("cobweb").space.n == 101
