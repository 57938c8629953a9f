"""PPO with GAE on KL-regularised rewards, one shared policy per supertype.

Every episode each agent draws a fresh processing cost ``lam ~ N(mu, sigma)``
(clipped at 0).  The reward fed to the learner is ``u - lam * penalty`` where
``u`` is the game payoff divided by the environment's ``utility_scale``.

``kl_mode`` selects the penalty:

* ``exact``: ``D_KL(pi(.|s) || q)``.  This term does not depend on the sampled
  action, so its score-function gradient vanishes in expectation; its analytic
  gradient is therefore added to the policy loss.
* ``per_action``: ``pi(a_t|s) log(pi(a_t|s) / q(a_t))``, fed through the reward
  only.  Its expectation is ``sum_a pi(a)^2 log(pi(a)/q(a))``, not the KL.
* ``none``: unregularised PPO (the standard MARL baseline).
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Supertype, sample_lambda
from .envs import Environment
from .policy import (
    NetworkShape,
    PolicyParameters,
    encode_batch,
    init_params,
    mlp_backward,
    mlp_forward,
    observation_dim,
    sample_action,
    softmax,
)

log = logging.getLogger(__name__)

KL_MODES = ("exact", "per_action", "none")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    iterations: int = 500
    # None: sized per environment by ``suggested_episodes``
    episodes_per_iteration: int | None = None
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 1e-3
    critic_learning_rate: float = 3e-3
    minibatch_epochs: int = 4
    minibatch_size: int = 512
    max_grad_norm: float = 0.5
    anneal_lr: bool = True
    seed: int = 0
    kl_mode: str = "exact"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if (self.episodes_per_iteration is not None and self.episodes_per_iteration < 1) \
                or self.minibatch_size < 1 or self.minibatch_epochs < 1:
            raise ValueError("batch settings must be positive")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if not self.clip_epsilon > 0:
            raise ValueError("clip_epsilon must be positive")
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"kl_mode must be one of {KL_MODES}")

    def replace(self, **kw) -> "TrainingConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def desk(cls, **kw) -> "TrainingConfig":
        """Reduced profile used by the test-suite and quick runs."""
        return cls(**{"iterations": 150, **kw})


# ----------------------------------------------------------------- transitions


@dataclass
class Batch:
    """Transitions stored column-wise.

    Rows are grouped by trajectory: trajectory ``k`` (one agent in one episode)
    occupies rows ``k*horizon : (k+1)*horizon`` in time order.
    """

    obs: np.ndarray
    actions: np.ndarray
    raw_utility: np.ndarray
    utility: np.ndarray
    kl_penalty: np.ndarray
    reward: np.ndarray
    logp: np.ndarray
    lam: np.ndarray
    episode: np.ndarray
    agent: np.ndarray
    step: np.ndarray
    horizon: int
    n_actions: int
    price: np.ndarray | None = None   # (episodes, horizon)

    def __len__(self):
        return len(self.actions)

    @property
    def priors(self) -> np.ndarray:
        return self.obs[:, -self.n_actions:]


@dataclass
class Rollout:
    """Trace-level view of a batch of episodes (used for simulation output)."""

    actions: np.ndarray      # (E, H, N) grid indices
    utilities: np.ndarray    # (E, H, N) raw payoffs
    lams: np.ndarray         # (E, N)
    price: np.ndarray | None  # (E, H)
    floored: int = 0


def _as_supertypes(supertypes, n_agents: int) -> list[Supertype]:
    if isinstance(supertypes, Supertype):
        return [supertypes] * n_agents
    sts = list(supertypes)
    if len(sts) == 1:
        return sts * n_agents
    if len(sts) != n_agents:
        raise ValueError(f"need 1 or {n_agents} supertypes, got {len(sts)}")
    return sts


def penalty(probs: np.ndarray, q: np.ndarray, actions: np.ndarray, kl_mode: str) -> np.ndarray:
    """Per-row information cost of the chosen actions under ``kl_mode``."""
    if kl_mode == "none":
        return np.zeros(len(actions))
    if np.any((probs > 0) & (q <= 0)):
        raise ValueError("prior puts zero mass on a supported action")
    logratio = np.log(probs) - np.log(q)
    if kl_mode == "exact":
        return np.maximum((probs * logratio).sum(axis=1), 0.0)
    rows = np.arange(len(actions))
    return probs[rows, actions] * logratio[rows, actions]


def sample_lambdas(sts: Sequence[Supertype], n_episodes: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_lambda(st, rng, size=n_episodes) for st in sts], axis=1)


def run_episodes(env: Environment, params: PolicyParameters, supertypes, n_episodes: int,
                 rng: np.random.Generator, kl_mode: str = "exact", lams: np.ndarray | None = None,
                 greedy: bool = False):
    """Play ``n_episodes`` episodes in lock-step with a frozen policy.

    Returns ``(Batch, Rollout)``.
    """
    if n_episodes < 1:
        raise ValueError(f"need at least one episode, got {n_episodes}")
    n, h = env.n_agents, env.horizon
    sts = _as_supertypes(supertypes, n)
    n_act = env.space.n
    if params.shape.obs_dim != observation_dim(env.n_features, n_act) or params.shape.n_out != n_act:
        raise ValueError(
            f"policy shape {params.shape.sizes} does not fit env {env.name} "
            f"(obs {observation_dim(env.n_features, n_act)}, actions {n_act})")
    priors = np.stack([st.prior_for(env.space).probs for st in sts])        # (N, n_act)
    if lams is None:
        lams = sample_lambdas(sts, n_episodes, rng)                           # (E, N)
    ids = np.tile(np.arange(n), n_episodes)
    lam_rows = lams.reshape(-1)
    q_rows = np.tile(priors, (n_episodes, 1))

    obs_d = params.shape.obs_dim
    obs = np.empty((h, n_episodes * n, obs_d))
    acts = np.empty((h, n_episodes * n), dtype=np.int64)
    logp = np.empty((h, n_episodes * n))
    kl = np.empty((h, n_episodes * n))
    raw = np.empty((h, n_episodes * n))
    price = np.empty((n_episodes, h)) if env.has_price else None
    floored = 0

    state = env.reset(n_episodes, rng)
    for t in range(h):
        feats = env.features(state).reshape(n_episodes * n, -1)
        o = encode_batch(feats, ids, n, lam_rows, priors[0])
        o[:, -n_act:] = q_rows
        logits, _ = mlp_forward(params, o)
        probs = softmax(logits)
        a = np.argmax(probs, axis=1) if greedy else sample_action(probs, rng)
        res = env.step(state, a.reshape(n_episodes, n), rng)
        state = res.state
        obs[t], acts[t] = o, a
        rows = np.arange(len(a))
        logp[t] = np.log(probs[rows, a])
        kl[t] = penalty(probs, q_rows, a, kl_mode)
        raw[t] = res.utilities.reshape(-1)
        if price is not None:
            price[:, t] = res.price
        if res.floored is not None:
            floored += int(np.count_nonzero(res.floored))

    # (H, E*N, ...) -> (E*N, H, ...) so each trajectory is contiguous
    def traj(x):
        return np.swapaxes(x, 0, 1).reshape(n_episodes * n * h, *x.shape[2:])

    lam_t = np.repeat(lam_rows, h)
    raw_t = traj(raw)
    util_t = raw_t / env.utility_scale
    kl_t = traj(kl)
    batch = Batch(
        obs=traj(obs), actions=traj(acts), raw_utility=raw_t, utility=util_t,
        kl_penalty=kl_t, reward=util_t - lam_t * kl_t, logp=traj(logp), lam=lam_t,
        episode=np.repeat(np.arange(n_episodes), n * h), agent=np.repeat(ids, h),
        step=np.tile(np.arange(h), n_episodes * n), horizon=h, n_actions=n_act, price=price,
    )
    rollout = Rollout(
        actions=acts.reshape(h, n_episodes, n).transpose(1, 0, 2),
        utilities=raw.reshape(h, n_episodes, n).transpose(1, 0, 2),
        lams=lams, price=price, floored=floored,
    )
    return batch, rollout


def suggested_episodes(env: Environment) -> int:
    """About 512 transitions per iteration for one-shot games, 16 episodes otherwise."""
    if env.horizon == 1:
        return -(-512 // env.n_agents)
    return 16


def resolve_config(cfg: TrainingConfig, env: Environment) -> TrainingConfig:
    if cfg.episodes_per_iteration is None:
        return cfg.replace(episodes_per_iteration=suggested_episodes(env))
    return cfg


def collect_rollouts(env: Environment, params: PolicyParameters, supertypes, cfg: TrainingConfig,
                     rng: np.random.Generator) -> Batch:
    cfg = resolve_config(cfg, env)
    batch, _ = run_episodes(env, params, supertypes, cfg.episodes_per_iteration, rng, cfg.kl_mode)
    return batch


# ------------------------------------------------------------------ advantages


@dataclass
class ValueModel:
    """Critic network plus running statistics used to standardise its targets."""

    params: PolicyParameters
    ret_mean: float = 0.0
    ret_var: float = 1.0
    count: float = 0.0

    def predict(self, obs: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.params, obs)
        return out[:, 0] * np.sqrt(self.ret_var) + self.ret_mean

    def update_stats(self, returns: np.ndarray):
        # parallel-variance merge of the running and batch moments
        b_n = float(len(returns))
        b_mean = float(returns.mean())
        b_var = float(returns.var())
        tot = self.count + b_n
        delta = b_mean - self.ret_mean
        mean = self.ret_mean + delta * b_n / tot
        m2 = self.ret_var * self.count + b_var * b_n + delta ** 2 * self.count * b_n / tot
        self.ret_mean, self.ret_var, self.count = mean, max(m2 / tot, 1e-8), tot


@dataclass
class Advantages:
    advantages: np.ndarray   # normalised
    returns: np.ndarray      # value targets
    scale: float             # std divided out of the raw advantages


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """GAE over trajectories laid out as rows of ``(M, H)``; episodes end at ``H``."""
    m, h = rewards.shape
    adv = np.zeros((m, h))
    last = np.zeros(m)
    for t in range(h - 1, -1, -1):
        next_v = values[:, t + 1] if t + 1 < h else 0.0
        delta = rewards[:, t] + gamma * next_v - values[:, t]
        last = delta + gamma * lam * last
        adv[:, t] = last
    return adv


def compute_advantages(batch: Batch, gamma: float, gae_lambda: float, value: ValueModel | None) -> Advantages:
    h = batch.horizon
    values = value.predict(batch.obs) if value is not None else np.zeros(len(batch))
    adv = gae(batch.reward.reshape(-1, h), values.reshape(-1, h), gamma, gae_lambda).reshape(-1)
    returns = adv + values
    std = float(adv.std())
    if std < 1e-8:
        return Advantages(np.zeros_like(adv), returns, 1.0)
    return Advantages((adv - adv.mean()) / std, returns, std)


# ---------------------------------------------------------------------- update


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(x), np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _clip_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(g @ g))
    if not np.isfinite(norm):
        raise TrainingDivergedError(f"non-finite gradient norm {norm}")
    return g * (max_norm / norm) if max_norm > 0 and norm > max_norm else g


def policy_loss_grad(params: PolicyParameters, obs, actions, logp_old, adv, lam_coef, q,
                     clip_epsilon: float, exact_kl: bool):
    """Clipped-surrogate loss (to minimise) and its gradient.

    ``lam_coef`` weights the analytic KL gradient (``lam / advantage scale``).
    """
    logits, acts = mlp_forward(params, obs)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp_all = z - logz
    probs = np.exp(logp_all)
    rows = np.arange(len(actions))
    ratio = np.exp(logp_all[rows, actions] - logp_old)
    clipped = np.clip(ratio, 1 - clip_epsilon, 1 + clip_epsilon)
    s1, s2 = ratio * adv, clipped * adv
    m = len(actions)
    loss = -float(np.minimum(s1, s2).mean())
    active = (s1 <= s2) | (ratio == clipped)
    g_logp = np.where(active, ratio * adv, 0.0)
    d_logits = probs * g_logp[:, None]
    d_logits[rows, actions] -= g_logp
    d_logits /= m
    if exact_kl and np.any(lam_coef):
        logratio = logp_all - np.log(q)
        kl = (probs * logratio).sum(axis=1, keepdims=True)
        loss += float((lam_coef * kl[:, 0]).mean())
        d_logits += (lam_coef / m)[:, None] * probs * (logratio - kl)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite policy loss {loss}")
    return loss, mlp_backward(params, acts, d_logits)


@dataclass
class Optimizers:
    policy: Adam
    critic: Adam


def ppo_update(params: PolicyParameters, value: ValueModel, batch: Batch, adv: Advantages,
               cfg: TrainingConfig, optim: Optimizers | None = None,
               rng: np.random.Generator | None = None):
    """Run ``minibatch_epochs`` passes of clipped-surrogate ascent plus critic regression.

    Returns ``(new_params, new_value, optim, stats)``; the inputs are not modified.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    optim = optim or Optimizers(Adam(cfg.learning_rate), Adam(cfg.critic_learning_rate))
    rng = rng or np.random.default_rng(cfg.seed)
    exact = cfg.kl_mode == "exact"
    lam_coef = batch.lam / adv.scale
    q = batch.priors

    value = dataclasses.replace(value)
    value.update_stats(adv.returns)
    target = (adv.returns - value.ret_mean) / np.sqrt(value.ret_var)

    theta = params.flat.copy()
    phi = value.params.flat.copy()
    n = len(batch)
    mb = min(cfg.minibatch_size, n)
    losses = []
    for _ in range(cfg.minibatch_epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            cur = params.replace(theta)
            loss, g = policy_loss_grad(cur, batch.obs[idx], batch.actions[idx], batch.logp[idx],
                                       adv.advantages[idx], lam_coef[idx], q[idx],
                                       cfg.clip_epsilon, exact)
            if np.any(g):
                theta = optim.policy.step(theta, _clip_norm(g, cfg.max_grad_norm))
            losses.append(loss)

            vp = value.params.replace(phi)
            out, acts = mlp_forward(vp, batch.obs[idx])
            err = out[:, 0] - target[idx]
            gv = mlp_backward(vp, acts, (err / len(idx))[:, None])
            phi = optim.critic.step(phi, _clip_norm(gv, cfg.max_grad_norm))
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
        raise TrainingDivergedError("parameters became non-finite during the update")
    value.params = value.params.replace(phi)
    stats = {"policy_loss": float(np.mean(losses))}
    return params.replace(theta), value, optim, stats


# ----------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: PolicyParameters
    value: ValueModel
    curve: list[dict] = field(default_factory=list)
    config: TrainingConfig | None = None


def network_shapes(env: Environment) -> tuple[NetworkShape, NetworkShape]:
    d = observation_dim(env.n_features, env.space.n)
    return NetworkShape(d, env.space.n), NetworkShape(d, 1)


def train(env: Environment, supertypes, cfg: TrainingConfig,
          callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Collect, estimate advantages and update for ``cfg.iterations`` rounds.

    Deterministic given ``cfg.seed``.  ``result.config`` holds the resolved config.
    """
    cfg = resolve_config(cfg, env)
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, roll_rng, upd_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    pshape, vshape = network_shapes(env)
    params = init_params(pshape, init_rng, out_gain=0.01)
    value = ValueModel(init_params(vshape, init_rng, out_gain=1.0))
    optim = Optimizers(Adam(cfg.learning_rate), Adam(cfg.critic_learning_rate))
    curve = []
    for it in range(cfg.iterations):
        if cfg.anneal_lr:
            frac = 1.0 - it / cfg.iterations
            optim.policy.lr = cfg.learning_rate * frac
            optim.critic.lr = cfg.critic_learning_rate * frac
        batch = collect_rollouts(env, params, supertypes, cfg, roll_rng)
        adv = compute_advantages(batch, cfg.gamma, cfg.gae_lambda, value)
        params, value, optim, stats = ppo_update(params, value, batch, adv, cfg, optim, upd_rng)
        row = {
            "iteration": it,
            "mean_raw_utility": float(batch.raw_utility.mean()),
            "mean_kl_penalty": float(batch.kl_penalty.mean()),
            "mean_regularized_reward": float(batch.reward.mean()),
        }
        curve.append(row)
        if callback is not None:
            callback(it, {**row, **stats})
        elif it % 25 == 0 or it == cfg.iterations - 1:
            log.debug("iter %d utility %.4f kl %.4f", it, row["mean_raw_utility"], row["mean_kl_penalty"])
    return TrainResult(params, value, curve, cfg)


CURVE_COLUMNS = ("iteration", "mean_raw_utility", "mean_kl_penalty", "mean_regularized_reward")


def write_curve(path, curve: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in CURVE_COLUMNS})
