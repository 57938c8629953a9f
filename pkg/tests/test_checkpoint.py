import numpy as np
import pytest

from bounded_agents.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from bounded_agents.core import Supertype
from bounded_agents.envs import make_env
from bounded_agents.learner import TrainingConfig, network_shapes
from bounded_agents.policy import init_params


def make_ckpt(seed=0):
    env = make_env("cobweb")
    pshape, vshape = network_shapes(env)
    rng = np.random.default_rng(seed)
    p = init_params(pshape, rng, out_gain=1.0)
    # awkward magnitudes exercise the round trip
    p = p.replace(p.flat * np.exp(rng.normal(0, 5, size=p.flat.size)))
    v = init_params(vshape, rng)
    return Checkpoint("cobweb", {"horizon": 20}, Supertype(1, 0.25, prior="prominent"),
                      TrainingConfig(iterations=7, seed=seed, episodes_per_iteration=16), p, v,
                      {"critic_return_mean": 0.1})


def test_roundtrip_is_lossless(tmp_path):
    ck = make_ckpt()
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.params.flat.tobytes() == ck.params.flat.tobytes()
    assert back.value_params.flat.tobytes() == ck.value_params.flat.tobytes()
    assert back.supertype == ck.supertype and back.training == ck.training
    assert back.env_overrides == {"horizon": 20} and back.meta == ck.meta
    assert back.seed == 0


def test_header_fields(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", make_ckpt(3))
    import json
    lines = (tmp_path / "a.ckpt").read_text().splitlines()
    assert lines[0] == MAGIC
    head = json.loads(lines[1])
    assert head["layer_sizes"] == [104, 64, 64, 101]
    assert head["obs_dim"] == 104 and head["n_actions"] == 101 and head["seed"] == 3


def test_save_is_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", make_ckpt(1))
    save_checkpoint(tmp_path / "b.ckpt", make_ckpt(1))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_policy_only_checkpoint(tmp_path):
    ck = make_ckpt()
    ck.value_params = None
    save_checkpoint(tmp_path / "a.ckpt", ck)
    assert load_checkpoint(tmp_path / "a.ckpt").value_params is None


def test_corrupt_checkpoints(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_text("hello\n")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    save_checkpoint(p, make_ckpt())
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(CheckpointError, match="expected"):
        load_checkpoint(p)
    p.write_text(lines[0] + "\n{not json\n")
    with pytest.raises(CheckpointError, match="header"):
        load_checkpoint(p)
