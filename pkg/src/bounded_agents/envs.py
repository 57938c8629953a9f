"""Economic games: supply-chain allocation, Cournot oligopoly, cobweb market, matrix games.

Each game has a pure ``*_step`` function (vectorised over leading axes) and an
``Environment`` wrapper that runs a batch of episodes in lock-step for the learner.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import ActionSpace


class ConfigError(ValueError):
    pass


def _config_from_dict(cls, data: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


# ---------------------------------------------------------------- supply chain


@dataclass(frozen=True)
class SupplyChainConfig:
    retailers: int = 2
    capacity: float = 90.0
    demand: float = 50.0
    max_request: int = 100
    margin: float = 5.0
    wastage: float = 2.0
    shortage: float = 5.0
    rounds: int = 30
    utility_scale: float = 1.0

    def __post_init__(self):
        if self.retailers < 1 or self.max_request < 1:
            raise ConfigError("need at least one retailer and max_request >= 1")
        if not self.demand > self.capacity / self.retailers:
            raise ConfigError(f"capacity must be limited: demand {self.demand} <= capacity/retailers")

    @property
    def space(self) -> ActionSpace:
        return ActionSpace(1, 1, self.max_request)


def supply_chain_step(cfg: SupplyChainConfig, requests):
    """Proportional allocation and newsvendor-style utility.

    ``requests`` has the retailers on its last axis.  Returns ``(allocations, utilities)``.
    """
    x = np.asarray(requests, dtype=float)
    if np.any(x <= 0) or np.any(x > cfg.max_request):
        raise ValueError(f"requests must lie in (0, {cfg.max_request}]")
    y = cfg.capacity * x / x.sum(axis=-1, keepdims=True)
    u = (cfg.demand * cfg.margin
         - cfg.wastage * np.maximum(y - cfg.demand, 0.0)
         - cfg.shortage * np.maximum(cfg.demand - y, 0.0))
    return y, u


# --------------------------------------------------------------------- cournot


@dataclass(frozen=True)
class CournotConfig:
    firms: int = 2
    A: float = 2.4
    B: float = 0.04
    q_lo: int = 8
    q_hi: int = 32
    utility_scale: float = 1.0

    def __post_init__(self):
        if self.firms < 1 or self.q_hi <= self.q_lo:
            raise ConfigError("need firms >= 1 and q_hi > q_lo")
        if not self.A > self.B * self.firms * self.q_lo:
            raise ConfigError("demand intercept too low: price is zero even at minimum output")

    @property
    def space(self) -> ActionSpace:
        return ActionSpace(self.q_lo, 1, self.q_hi - self.q_lo + 1)


def cournot_price(cfg: CournotConfig, quantities):
    """Inverse demand floored at zero. Returns ``(price, floored)``."""
    raw = cfg.A - cfg.B * np.asarray(quantities, dtype=float).sum(axis=-1)
    return np.maximum(raw, 0.0), raw < 0


def cournot_step(cfg: CournotConfig, quantities):
    q = np.asarray(quantities, dtype=float)
    if np.any(q < cfg.q_lo) or np.any(q > cfg.q_hi):
        raise ValueError(f"quantities must lie in [{cfg.q_lo}, {cfg.q_hi}]")
    p, _ = cournot_price(cfg, q)
    return p, np.asarray(p)[..., None] * q


# ---------------------------------------------------------------------- cobweb


@dataclass(frozen=True)
class CobwebConfig:
    producers: int = 6
    a: float = 13.8
    b: float = 1.5
    psi: float = 2.0
    shock_std: float = 0.5
    price_lo: float = 0.0
    price_hi: float = 10.0
    price_step: float = 0.1
    horizon: int = 50
    # payoffs are points out of 1300; learning works in fractions of the maximum
    utility_scale: float = 1300.0

    def __post_init__(self):
        if not self.b > 0:
            raise ConfigError("b must be positive")
        if self.shock_std < 0:
            raise ConfigError("shock_std must be >= 0")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")

    @property
    def space(self) -> ActionSpace:
        return ActionSpace.from_bounds(self.price_lo, self.price_hi, self.price_step)


def cobweb_supply(cfg: CobwebConfig, predictions):
    # the producer count doubles as the supply-curve midpoint
    return np.tanh(cfg.psi * (np.asarray(predictions, dtype=float) - cfg.producers)) + 1.0


def cobweb_price(cfg: CobwebConfig, predictions, shock=0.0):
    return (cfg.a - cobweb_supply(cfg, predictions).sum(axis=-1)) / cfg.b + shock


def cobweb_utility(price, predictions):
    err = np.asarray(price, dtype=float)[..., None] - np.asarray(predictions, dtype=float)
    return np.maximum(0.0, 1300.0 - 260.0 * err ** 2)


def cobweb_step(cfg: CobwebConfig, predictions, rng: np.random.Generator | None = None):
    """Realised price and prediction-accuracy payoffs for one market round.

    One ``N(0, shock_std)`` draw per market; ``rng`` may be omitted when
    ``shock_std == 0``.
    """
    p_hat = np.asarray(predictions, dtype=float)
    lead = p_hat.shape[:-1]
    if cfg.shock_std > 0:
        if rng is None:
            raise ValueError("a random stream is required when shock_std > 0")
        shock = rng.normal(0.0, cfg.shock_std, size=lead)
    else:
        shock = np.zeros(lead)
    price = cobweb_price(cfg, p_hat, shock)
    return price, cobweb_utility(price, p_hat)


# ----------------------------------------------------------------- matrix game


@dataclass(frozen=True)
class MatrixGameConfig:
    """``payoffs[i][a_0, ..., a_{N-1}]`` is player ``i``'s utility."""

    payoffs: np.ndarray
    action_names: tuple[str, ...] = ()
    utility_scale: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.payoffs, dtype=float)
        n_players = p.shape[0]
        if p.ndim != n_players + 1:
            raise ConfigError(f"payoff tensor of shape {p.shape} does not match {n_players} players")
        if not np.all(np.isfinite(p)):
            raise ConfigError("payoffs must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "payoffs", p)

    @property
    def n_players(self) -> int:
        return self.payoffs.shape[0]

    @property
    def n_actions(self) -> tuple[int, ...]:
        return self.payoffs.shape[1:]


def matrix_game_step(cfg: MatrixGameConfig, profile):
    """Payoff lookup; ``profile`` has players on its last axis."""
    prof = np.asarray(profile, dtype=int)
    if prof.shape[-1] != cfg.n_players:
        raise ValueError(f"profile needs {cfg.n_players} actions")
    if np.any(prof < 0) or np.any(prof >= np.array(cfg.n_actions)):
        raise ValueError("action out of range")
    idx = tuple(prof[..., j] for j in range(cfg.n_players))
    return np.stack([cfg.payoffs[i][idx] for i in range(cfg.n_players)], axis=-1)


RPS = MatrixGameConfig(
    np.array([
        [[0, -1, 1], [1, 0, -1], [-1, 1, 0]],
        [[0, 1, -1], [-1, 0, 1], [1, -1, 0]],
    ]),
    ("rock", "paper", "scissors"),
)
MATCHING_PENNIES = MatrixGameConfig(
    np.array([
        [[1, -1], [-1, 1]],
        [[-1, 1], [1, -1]],
    ]),
    ("heads", "tails"),
)


def bandit(utilities=(1.0, 0.0)) -> MatrixGameConfig:
    """Single-player, single-state game: a bandit against nature."""
    return MatrixGameConfig(np.asarray(utilities, dtype=float)[None, :])


# ----------------------------------------------------------------- environments


@dataclass
class StepResult:
    utilities: np.ndarray          # (E, N) raw payoffs
    state: Any
    price: np.ndarray | None = None   # (E,) market price where the game has one
    floored: np.ndarray | None = None


@dataclass
class Environment:
    """Batch-of-episodes wrapper around a game.

    Actions are passed as grid indices of shape ``(E, N)``; the wrapper maps
    them to values.  ``state`` is an opaque per-episode array.
    """

    name: str
    config: Any
    n_agents: int
    space: ActionSpace
    horizon: int = 1
    n_features: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def utility_scale(self) -> float:
        return float(self.config.utility_scale)

    @property
    def has_price(self) -> bool:
        return self.kind in ("cournot", "cobweb")

    @property
    def kind(self) -> str:
        return {
            SupplyChainConfig: "supply_chain",
            CournotConfig: "cournot",
            CobwebConfig: "cobweb",
            MatrixGameConfig: "matrix",
        }[type(self.config)]

    def reset(self, n_episodes: int, rng: np.random.Generator):
        if self.kind == "cobweb":
            mid = 0.5 * (self.config.price_lo + self.config.price_hi)
            return np.full(n_episodes, mid)
        return np.zeros(n_episodes)

    def features(self, state) -> np.ndarray:
        e = len(state)
        if self.kind == "cobweb":
            f = (state / self.config.price_hi)[:, None, None]
            return np.broadcast_to(f, (e, self.n_agents, 1))
        return np.zeros((e, self.n_agents, 0))

    def step(self, state, actions: np.ndarray, rng: np.random.Generator) -> StepResult:
        cfg = self.config
        kind = self.kind
        if kind == "matrix":
            return StepResult(matrix_game_step(cfg, actions), state)
        values = self.space.values[actions]
        if kind == "supply_chain":
            _, u = supply_chain_step(cfg, values)
            return StepResult(u, state)
        if kind == "cournot":
            p, u = cournot_step(cfg, values)
            return StepResult(u, state, price=p, floored=cournot_price(cfg, values)[1])
        p, u = cobweb_step(cfg, values, rng)
        return StepResult(u, p.copy(), price=p)

    def config_dict(self) -> dict:
        if self.kind == "matrix":
            return {"payoffs": self.config.payoffs.tolist(),
                    "action_names": list(self.config.action_names),
                    "utility_scale": self.config.utility_scale}
        return dataclasses.asdict(self.config)


ENV_NAMES = ("supply_chain", "cournot_duopoly", "cournot_triopoly", "cobweb",
             "rps", "matching_pennies", "bandit")


def make_env(name: str, overrides: dict | None = None) -> Environment:
    """Build a named environment, applying config ``overrides`` (key -> value)."""
    ov = dict(overrides or {})
    if name == "supply_chain":
        cfg = _config_from_dict(SupplyChainConfig, ov)
        return Environment(name, cfg, cfg.retailers, cfg.space)
    if name in ("cournot_duopoly", "cournot_triopoly"):
        ov.setdefault("firms", 2 if name == "cournot_duopoly" else 3)
        cfg = _config_from_dict(CournotConfig, ov)
        return Environment(name, cfg, cfg.firms, cfg.space)
    if name == "cobweb":
        cfg = _config_from_dict(CobwebConfig, ov)
        return Environment(name, cfg, cfg.producers, cfg.space, horizon=cfg.horizon, n_features=1)
    if name in ("rps", "matching_pennies", "bandit"):
        base = {"rps": RPS, "matching_pennies": MATCHING_PENNIES, "bandit": bandit()}[name]
        data = {"payoffs": base.payoffs, "action_names": base.action_names, **ov}
        data["payoffs"] = np.asarray(data["payoffs"], dtype=float)
        cfg = _config_from_dict(MatrixGameConfig, data)
        n = cfg.n_actions
        if len(set(n)) != 1:
            raise ConfigError("a shared policy needs every player to have the same action count")
        return Environment(name, cfg, cfg.n_players, ActionSpace(0, 1, n[0]))
    raise ConfigError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")
