"""Regenerate the synthetic reference datasets shipped in ``bounded_agents/data``.

    python3 scripts/make_reference_data.py
"""

from pathlib import Path

from bounded_agents.calibration import equilibrium_dataset, generate_dataset, write_dataset
from bounded_agents.core import Supertype
from bounded_agents.envs import make_env
from bounded_agents.learner import TrainingConfig, train

OUT = Path(__file__).resolve().parents[1] / "src" / "bounded_agents" / "data"
TRUE = Supertype(1.0, 0.25)


def main():
    OUT.mkdir(exist_ok=True)
    env = make_env("cournot_duopoly")
    res = train(env, TRUE, TrainingConfig.desk(seed=20240501))
    ds = generate_dataset("cournot_duopoly", res.params, TRUE, n_subjects=40, n_rounds=30, seed=20240502)
    write_dataset(OUT / "cournot_duopoly_mu1_ss0.25.csv", ds)
    write_dataset(OUT / "cournot_duopoly_nash.csv", equilibrium_dataset("cournot_duopoly", 20, 40, 30))
    print(f"wrote {len(ds)} rows per dataset to {OUT}")


if __name__ == "__main__":
    main()
