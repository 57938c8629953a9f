"""Plain-text policy checkpoints.

Layout::

    bounded-agents-checkpoint 1
    {json header: layer sizes, obs_dim, n_actions, seed, env, supertype, training config}
    <policy parameter 0>
    ...
    <critic parameter 0>
    ...

One float per line in shortest round-trip ``repr`` form, so loading is lossless.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .core import Supertype
from .learner import TrainingConfig
from .policy import NetworkShape, PolicyParameters

MAGIC = "bounded-agents-checkpoint 1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    env: str
    env_overrides: dict
    supertype: Supertype
    training: TrainingConfig
    params: PolicyParameters
    value_params: PolicyParameters | None = None
    meta: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.training.seed

    def header(self) -> dict:
        return {
            "layer_sizes": list(self.params.shape.sizes),
            "obs_dim": self.params.shape.obs_dim,
            "n_actions": self.params.shape.n_out,
            "seed": self.seed,
            "env": self.env,
            "env_overrides": self.env_overrides,
            "supertype": dataclasses.asdict(self.supertype),
            "training": dataclasses.asdict(self.training),
            "n_policy_params": int(self.params.flat.size),
            "critic_layer_sizes": list(self.value_params.shape.sizes) if self.value_params else None,
            "meta": self.meta,
        }


def _shape_from_sizes(sizes) -> NetworkShape:
    return NetworkShape(sizes[0], sizes[-1], tuple(sizes[1:-1]))


def save_checkpoint(path, ckpt: Checkpoint):
    lines = [MAGIC, json.dumps(ckpt.header(), sort_keys=True)]
    lines += [repr(float(x)) for x in ckpt.params.flat]
    if ckpt.value_params is not None:
        lines += [repr(float(x)) for x in ckpt.value_params.flat]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        magic = fh.readline().rstrip("\n")
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic line {magic!r})")
        try:
            head = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: unreadable header: {exc}") from None
        body = [float(x) for x in fh.read().split()]
    pshape = _shape_from_sizes(head["layer_sizes"])
    n_p = pshape.n_params
    if n_p != head["n_policy_params"]:
        raise CheckpointError(f"{path}: header parameter count does not match layer sizes")
    params = PolicyParameters(pshape, np.array(body[:n_p]))
    value = None
    if head.get("critic_layer_sizes"):
        vshape = _shape_from_sizes(head["critic_layer_sizes"])
        if len(body) != n_p + vshape.n_params:
            raise CheckpointError(f"{path}: expected {n_p + vshape.n_params} values, found {len(body)}")
        value = PolicyParameters(vshape, np.array(body[n_p:]))
    elif len(body) != n_p:
        raise CheckpointError(f"{path}: expected {n_p} values, found {len(body)}")
    return Checkpoint(head["env"], head["env_overrides"], Supertype(**head["supertype"]),
                      TrainingConfig(**head["training"]), params, value, head.get("meta", {}))
