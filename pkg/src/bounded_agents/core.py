"""Action grids, prior beliefs, supertypes and KL information costs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-12


@dataclass(frozen=True)
class ActionSpace:
    """Ordinal discrete action grid ``lo, lo + step, ..., hi``."""

    lo: float
    step: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"action space needs at least 2 actions, got n={self.n}")
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")

    @classmethod
    def from_bounds(cls, lo: float, hi: float, step: float = 1.0) -> "ActionSpace":
        n = int(round((hi - lo) / step)) + 1
        space = cls(lo, step, n)
        if not math.isclose(space.hi, hi, rel_tol=0, abs_tol=1e-9 * max(1.0, abs(hi))):
            raise ValueError(f"[{lo}, {hi}] is not a whole number of steps of {step}")
        return space

    @property
    def hi(self) -> float:
        return self.lo + (self.n - 1) * self.step

    @property
    def values(self) -> np.ndarray:
        # round away float drift so 0.1-step grids print and compare cleanly
        return np.round(self.lo + self.step * np.arange(self.n), 10)

    def index_of(self, value: float) -> int:
        """Index of ``value`` on the grid; raises if it is off-grid."""
        k = (value - self.lo) / self.step
        i = int(round(k))
        if abs(k - i) > 1e-6 or not 0 <= i < self.n:
            raise ValueError(f"{value} is not on the grid [{self.lo}, {self.hi}] step {self.step}")
        return i


@dataclass(frozen=True)
class PriorBelief:
    """Probability mass over the actions of an ``ActionSpace``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("prior must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("prior entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > PROB_TOL * p.size:
            raise ValueError(f"prior sums to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size

    def __eq__(self, other):
        return isinstance(other, PriorBelief) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())


def uniform_prior(space: ActionSpace) -> PriorBelief:
    return PriorBelief(np.full(space.n, 1.0 / space.n))


def prominent_number_prior(space: ActionSpace, boost: float = 3.0) -> PriorBelief:
    """Prior that weights multiples of 5 ``boost`` times more than other actions.

    Raises:
        ValueError: if the grid holds no multiple of 5 or ``boost`` is not positive.
    """
    if boost <= 0:
        raise ValueError(f"boost must be positive, got {boost}")
    vals = space.values
    prominent = np.isclose(np.mod(vals + 1e-9, 5.0), 0.0, atol=1e-6)
    if not prominent.any():
        raise ValueError(f"no multiples of 5 in [{space.lo}, {space.hi}]")
    w = np.where(prominent, float(boost), 1.0)
    return PriorBelief(w / w.sum())


PRIOR_KINDS = ("uniform", "prominent")


def make_prior(space: ActionSpace, kind: str = "uniform", boost: float = 3.0) -> PriorBelief:
    if kind == "uniform":
        return uniform_prior(space)
    if kind == "prominent":
        return prominent_number_prior(space, boost)
    raise ValueError(f"unknown prior kind {kind!r}; expected one of {PRIOR_KINDS}")


@dataclass(frozen=True)
class Supertype:
    """Template from which agents draw processing costs ``lambda ~ N(mu, mu * sigma_star)``.

    ``prior`` and ``prior_boost`` name the prior constructor; ``role`` tags the
    environment role the supertype plays (all agents in our games share one).
    """

    mu: float
    sigma_star: float
    prior: str = "uniform"
    prior_boost: float = 3.0
    role: str = "player"

    def __post_init__(self):
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise ValueError(f"mu must be finite and >= 0, got {self.mu}")
        if not (self.sigma_star >= 0 and math.isfinite(self.sigma_star)):
            raise ValueError(f"sigma_star must be finite and >= 0, got {self.sigma_star}")
        if self.prior not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.prior!r}")

    @property
    def sigma(self) -> float:
        return self.mu * self.sigma_star

    def prior_for(self, space: ActionSpace) -> PriorBelief:
        return make_prior(space, self.prior, self.prior_boost)


@dataclass(frozen=True)
class AgentSpec:
    id: int
    lam: float
    prior: PriorBelief = field(repr=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"processing cost must be >= 0, got {self.lam}")


def sample_lambda(st: Supertype, rng: np.random.Generator, size=None):
    """Draw processing costs from ``N(mu, sigma)`` clipped at zero.

    With ``sigma == 0`` no random number is consumed and ``mu`` is returned.
    """
    if st.sigma == 0.0:
        return st.mu if size is None else np.full(size, st.mu)
    draw = rng.normal(st.mu, st.sigma, size=size)
    return np.maximum(draw, 0.0) if size is not None else max(0.0, float(draw))


def make_agents(st: Supertype, n: int, space: ActionSpace, rng: np.random.Generator) -> list[AgentSpec]:
    prior = st.prior_for(space)
    lams = sample_lambda(st, rng, size=n)
    return [AgentSpec(i, float(lam), prior) for i, lam in enumerate(lams)]


def _check_pair(pi, q):
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q.probs if isinstance(q, PriorBelief) else q, dtype=float)
    if pi.shape[-1:] != q.shape[-1:]:
        raise ValueError(f"shape mismatch: pi {pi.shape} vs q {q.shape}")
    q = np.broadcast_to(q, pi.shape)
    if np.any((pi > 0) & (q <= 0)):
        raise ValueError("prior puts zero mass on an action the policy supports (infinite KL)")
    return pi, q


def kl_terms(pi, q) -> np.ndarray:
    """Per-action terms ``pi(a) * log(pi(a) / q(a))``, zero where ``pi(a) == 0``.

    Works along the last axis, so batches of distributions are accepted.
    """
    pi, q = _check_pair(pi, q)
    out = np.zeros_like(pi)
    m = pi > 0
    out[m] = pi[m] * (np.log(pi[m]) - np.log(q[m]))
    return out


def kl_divergence(pi, q) -> float:
    return max(0.0, float(math.fsum(kl_terms(pi, q))))


def kl_contribution(pi, q, a: int) -> float:
    pi, q = _check_pair(pi, q)
    if not 0 <= a < pi.size:
        raise IndexError(f"action index {a} out of range for {pi.size} actions")
    if pi[a] == 0:
        return 0.0
    return float(pi[a] * (math.log(pi[a]) - math.log(q[a])))


def regularized_reward(u, lam, penalty):
    """Utility minus the weighted information cost, ``u - lam * penalty``."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("processing cost must be >= 0")
    return u - lam * penalty


def entropy(pi) -> float:
    pi = np.asarray(pi, dtype=float)
    m = pi > 0
    return float(-np.sum(pi[m] * np.log(pi[m])))


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())
