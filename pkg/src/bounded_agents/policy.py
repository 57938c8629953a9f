"""Shared softmax policy: observation encoding and a tanh MLP with exact backprop.

Parameters live in one flat float64 vector ordered ``W1, b1, W2, b2, W3, b3``
with ``W`` stored row-major as ``(fan_in, fan_out)``.  The same network class
doubles as the critic (``n_out == 1``).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import PriorBelief

HIDDEN = (64, 64)


class NonFiniteParameterError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkShape:
    obs_dim: int
    n_out: int
    hidden: tuple[int, ...] = HIDDEN

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.obs_dim, *self.hidden, self.n_out)

    @cached_property
    def slices(self) -> list[tuple[slice, tuple[int, int], slice]]:
        out, k = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(k, k + fan_in * fan_out)
            k = w.stop
            b = slice(k, k + fan_out)
            k = b.stop
            out.append((w, (fan_in, fan_out), b))
        return out

    @property
    def n_params(self) -> int:
        return self.slices[-1][2].stop

    def unpack(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(flat[w].reshape(shape), flat[b]) for w, shape, b in self.slices]


@dataclass(frozen=True, eq=False)
class PolicyParameters:
    """Immutable snapshot of network weights."""

    shape: NetworkShape
    flat: np.ndarray

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64)
        if flat.shape != (self.shape.n_params,):
            raise ValueError(f"expected {self.shape.n_params} parameters, got {flat.shape}")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    @property
    def layers(self):
        return self.shape.unpack(self.flat)

    def replace(self, flat: np.ndarray) -> "PolicyParameters":
        return PolicyParameters(self.shape, flat)


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    qm, r = np.linalg.qr(a)
    qm = qm * np.sign(np.diag(r))
    if fan_in < fan_out:
        qm = qm.T
    return gain * qm[:fan_in, :fan_out]


def init_params(shape: NetworkShape, rng: np.random.Generator, out_gain: float = 0.01) -> PolicyParameters:
    """Orthogonal init, gain 1 on hidden layers and ``out_gain`` on the output layer.

    Biases start at zero, so a small ``out_gain`` gives a near-uniform policy.
    """
    flat = np.zeros(shape.n_params)
    n_layers = len(shape.slices)
    for k, (w, (fan_in, fan_out), _) in enumerate(shape.slices):
        gain = out_gain if k == n_layers - 1 else 1.0
        flat[w] = _orthogonal(rng, fan_in, fan_out, gain).ravel()
    return PolicyParameters(shape, flat)


def zero_params(shape: NetworkShape) -> PolicyParameters:
    return PolicyParameters(shape, np.zeros(shape.n_params))


# ---------------------------------------------------------------- observations


def observation_dim(n_env_features: int, n_actions: int) -> int:
    return n_env_features + 2 + n_actions


def lambda_feature(lam):
    return np.asarray(lam, dtype=float) / (1.0 + np.asarray(lam, dtype=float))


def id_code(i, n_agents: int):
    if n_agents <= 1:
        return np.zeros_like(np.asarray(i, dtype=float))
    return np.asarray(i, dtype=float) / (n_agents - 1)


def encode_observation(env_features, i: int, n_agents: int, lam: float, q: PriorBelief | np.ndarray) -> np.ndarray:
    """Concatenate ``[env_features, i/(N-1), lam/(1+lam), q]`` into one vector."""
    if lam < 0:
        raise ValueError(f"processing cost must be >= 0, got {lam}")
    if not 0 <= i < max(n_agents, 1):
        raise ValueError(f"agent index {i} out of range for N={n_agents}")
    probs = q.probs if isinstance(q, PriorBelief) else np.asarray(q, dtype=float)
    feats = np.atleast_1d(np.asarray(env_features, dtype=float)).ravel()
    return np.concatenate([feats, [float(id_code(i, n_agents)), float(lambda_feature(lam))], probs])


def encode_batch(env_features: np.ndarray, ids: np.ndarray, n_agents: int, lams: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``encode_observation`` for ``B`` agents sharing one prior.

    ``env_features`` has shape ``(B, f)`` (``f`` may be 0).
    """
    b = len(ids)
    return np.hstack([
        np.asarray(env_features, dtype=float).reshape(b, -1),
        id_code(ids, n_agents).reshape(b, 1),
        lambda_feature(lams).reshape(b, 1),
        np.broadcast_to(q, (b, q.size)),
    ])


# --------------------------------------------------------------------- network


@dataclass(frozen=True)
class ActionDistribution:
    probs: np.ndarray
    logits: np.ndarray

    @property
    def log_probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mlp_forward(params: PolicyParameters, obs: np.ndarray):
    """Batched forward pass. Returns ``(outputs, hidden activations)``."""
    acts = [obs]
    x = obs
    layers = params.layers
    for w, b in layers[:-1]:
        x = np.tanh(x @ w + b)
        acts.append(x)
    w, b = layers[-1]
    return x @ w + b, acts


def mlp_backward(params: PolicyParameters, acts: list[np.ndarray], d_out: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(d_out * outputs)`` w.r.t. the flat parameter vector."""
    grad = np.empty(params.shape.n_params)
    layers = params.layers
    delta = d_out
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        wsl, wshape, bsl = params.shape.slices[k]
        grad[wsl] = (acts[k].T @ delta).ravel()
        grad[bsl] = delta.sum(axis=0)
        if k:
            delta = (delta @ w.T) * (1.0 - acts[k] ** 2)
    return grad


def _check_finite(params: PolicyParameters):
    if not np.all(np.isfinite(params.flat)):
        raise NonFiniteParameterError("policy parameters contain NaN or inf")


def forward(params: PolicyParameters, obs: np.ndarray) -> ActionDistribution:
    """Softmax policy for one observation (1-D) or a batch (2-D)."""
    _check_finite(params)
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != params.shape.obs_dim:
        raise ValueError(f"observation length {obs.shape[-1]} != network input {params.shape.obs_dim}")
    single = obs.ndim == 1
    logits, _ = mlp_forward(params, obs.reshape(-1, obs.shape[-1]))
    probs = softmax(logits)
    if single:
        logits, probs = logits[0], probs[0]
    return ActionDistribution(probs=probs, logits=logits)


def sample_action(dist: ActionDistribution | np.ndarray, rng: np.random.Generator):
    """Inverse-CDF sampling; one uniform draw per distribution row."""
    probs = dist.probs if isinstance(dist, ActionDistribution) else np.asarray(dist)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (u * cdf[..., -1:] >= cdf).sum(axis=-1)
    idx = np.minimum(idx, probs.shape[-1] - 1)
    return int(idx) if probs.ndim == 1 else idx


def log_prob_and_grad(params: PolicyParameters, obs: np.ndarray, a: int) -> tuple[float, np.ndarray]:
    """``log pi(a | obs)`` and its gradient over all parameters (same flat layout)."""
    _check_finite(params)
    obs = np.asarray(obs, dtype=float).reshape(1, -1)
    logits, acts = mlp_forward(params, obs)
    probs = softmax(logits)
    logp = float(logits[0, a] - logits[0].max() - np.log(np.exp(logits[0] - logits[0].max()).sum()))
    d_logits = -probs
    d_logits[0, a] += 1.0
    return logp, mlp_backward(params, acts, d_logits)


def greedy_action(params: PolicyParameters, obs: np.ndarray) -> int:
    return int(np.argmax(forward(params, obs).probs))
